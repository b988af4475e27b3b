import json
import struct

import pytest
import torch
import torch.nn.functional as F

from vidadapt.checkpoint import CONTAINER_VERSION, MAGIC, read_container, write_container
from vidadapt.errors import CheckpointError, ConfigError, NumericalError, ShapeError
from vidadapt.flowwarp import FlowField, OracleFlowSource
from vidadapt.segnet import (
    SegModelConfig,
    forward_pair,
    frames_to_tensor,
    init_params,
    load_checkpoint,
    load_checkpoint_full,
    predict_clip,
    save_checkpoint,
)

TINY = SegModelConfig(num_classes=3, base_channels=4, num_down_levels=2)


def frames(seed, n=2, height=16, width=16):
    return torch.rand(n, 3, height, width, generator=torch.Generator().manual_seed(seed))


def test_probabilities_sum_to_one():
    model = init_params(TINY, seed=0)
    flow = FlowField.constant(16, 16, 1.5, -0.5)

    probs, features = model.forward_pair(frames(1), frames(2), flow)

    assert probs.shape == (2, 3, 16, 16)
    assert features.shape == (2, 3, 16, 16)
    assert torch.all(probs >= 0)
    assert torch.allclose(probs.sum(dim=1), torch.ones(2, 16, 16), atol=1e-5)


def test_odd_sizes_keep_input_resolution():
    model = init_params(SegModelConfig(num_classes=4, base_channels=2, num_down_levels=3), seed=0)
    probs, _ = model.forward_pair(frames(1, 1, 17, 23), frames(2, 1, 17, 23), FlowField.zeros(17, 23))
    assert probs.shape == (1, 4, 17, 23)


def test_forward_is_reproducible():
    model = init_params(TINY, seed=0)
    x = frames(3)

    first, _ = forward_pair(model, x, x, FlowField.zeros(16, 16))
    second, _ = forward_pair(model, x, x, FlowField.zeros(16, 16))

    assert torch.equal(first, second)


def test_mismatched_frames_rejected():
    model = init_params(TINY, seed=0)
    with pytest.raises(ShapeError, match="frame shapes differ"):
        model.forward_pair(frames(1), frames(2, height=8), FlowField.zeros(16, 16))


def test_same_seed_same_parameters():
    a, b, c = init_params(TINY, 5), init_params(TINY, 5), init_params(TINY, 6)

    for (_, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb)
    assert not torch.equal(a.branch_current.stem.weight, c.branch_current.stem.weight)


def test_initialization_is_scaled_by_fan_in():
    model = init_params(TINY, 0)
    stem = model.branch_current.stem.weight
    assert stem.abs().max() <= 1.0 / (3 * 9) ** 0.5


def test_branch_sharing_halves_branches():
    shared = init_params(TINY, 0)
    separate = init_params(SegModelConfig(num_classes=3, base_channels=4, share_branches=False), 0)

    assert shared.previous_branch() is shared.branch_current
    assert separate.previous_branch() is not separate.branch_current
    assert separate.num_parameters() > shared.num_parameters()


def test_fusion_starts_as_average():
    model = init_params(TINY, 0)
    x = frames(4)

    probs, _ = model.forward_pair(x, x, FlowField.zeros(16, 16))

    expected = torch.softmax(model.branch_current(x), dim=1)
    assert torch.allclose(probs, expected, atol=1e-6)


def test_fusion_ignoring_previous_branch_gives_current_branch():
    model = init_params(TINY, 0)
    with torch.no_grad():
        model.fusion.weight.zero_()
        model.fusion.weight[:, :3, 0, 0] = torch.eye(3)
        model.fusion.bias.zero_()
    current = frames(5)

    probs, _ = model.forward_pair(current, frames(6), FlowField.constant(16, 16, 2.0, 1.0))

    torch.testing.assert_close(probs, torch.softmax(model.branch_current(current), dim=1))


def test_class_permutation_is_equivariant():
    model = init_params(TINY, 0)
    x, y = frames(7), frames(8)
    flow = FlowField.constant(16, 16, 0.5, 0.0)
    permutation = torch.tensor([2, 0, 1])
    before, _ = model.forward_pair(x, y, flow)

    with torch.no_grad():
        model.fusion.weight.copy_(model.fusion.weight[permutation])
        model.fusion.bias.copy_(model.fusion.bias[permutation])
    after, _ = model.forward_pair(x, y, flow)

    torch.testing.assert_close(after, before[:, permutation])
    assert torch.equal(after.argmax(dim=1), permutation.argsort()[before.argmax(dim=1)])


def test_non_finite_activation_names_layer():
    model = init_params(TINY, 0)
    with torch.no_grad():
        model.branch_current.stem.weight[0, 0, 0, 0] = float("nan")

    with pytest.raises(NumericalError, match="stem"):
        model.forward_pair(frames(1), frames(2), FlowField.zeros(16, 16))


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        init_params(SegModelConfig(num_classes=1), 0)
    with pytest.raises(ConfigError, match="activation"):
        init_params(SegModelConfig(num_classes=3, activation="tanh"), 0)


def test_frames_to_tensor_layout():
    array = torch.rand(5, 6, 3).numpy()
    tensor = frames_to_tensor(array)
    assert tensor.shape == (1, 3, 5, 6)
    assert torch.equal(tensor[0, 1], torch.from_numpy(array[..., 1]))
    with pytest.raises(ShapeError):
        frames_to_tensor(torch.rand(5, 6, 4).numpy())


def test_cross_entropy_gradient_matches_central_differences(param_gradcheck):
    config = SegModelConfig(num_classes=3, base_channels=2, num_down_levels=1, activation="elu")
    model = init_params(config, seed=1).double()
    assert model.num_parameters() <= 500
    generator = torch.Generator().manual_seed(0)
    current = torch.rand(1, 3, 8, 8, generator=generator, dtype=torch.float64)
    previous = torch.rand(1, 3, 8, 8, generator=generator, dtype=torch.float64)
    labels = torch.randint(0, 3, (1, 8, 8), generator=generator)
    flow = FlowField.constant(8, 8, 0.3, -0.6)

    def loss(call):
        _, fused = call(current, previous, flow)
        return F.cross_entropy(fused, labels)

    assert param_gradcheck(model, loss)


def test_checkpoint_roundtrip_reproduces_outputs(tmp_path):
    model = init_params(TINY, 0)
    optimizer = torch.optim.SGD(model.parameters(), lr=0.1, momentum=0.9)
    x, y = frames(1), frames(2)
    flow = FlowField.constant(16, 16, 1.0, 0.0)
    probs, _ = model.forward_pair(x, y, flow)
    probs.sum().backward()
    optimizer.step()
    expected, _ = model.forward_pair(x, y, flow)

    path = save_checkpoint(tmp_path / "model.vdck", model, optimizer.state_dict(), {"note": "a"})
    loaded, state = load_checkpoint(path)
    actual, _ = loaded.forward_pair(x, y, flow)

    assert torch.equal(actual, expected)
    assert loaded.config == TINY
    assert state["param_groups"][0]["momentum"] == 0.9
    buffers = [s["momentum_buffer"] for s in state["state"].values()]
    reference = [s["momentum_buffer"] for s in optimizer.state_dict()["state"].values()]
    assert all(torch.equal(a, b) for a, b in zip(buffers, reference))
    assert load_checkpoint_full(path)[2] == {"note": "a"}


def test_save_load_save_is_byte_identical(tmp_path):
    model = init_params(TINY, 3)
    first = save_checkpoint(tmp_path / "a.vdck", model)
    loaded, state = load_checkpoint(first)
    second = save_checkpoint(tmp_path / "b.vdck", loaded, state)

    assert first.read_bytes() == second.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "m.vdck", init_params(TINY, 0))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))

    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)


def test_container_version_mismatch_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "m.vdck", init_params(TINY, 0))
    raw = bytearray(path.read_bytes())
    raw[4] = 7
    path.write_bytes(bytes(raw))

    with pytest.raises(CheckpointError, match="version 7"):
        load_checkpoint(path)


def test_checkpoint_format_mismatch_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "m.vdck", init_params(TINY, 0))
    arrays, meta = read_container(path)
    write_container(path, arrays, {**meta, "format": 99})

    with pytest.raises(CheckpointError, match="format 99"):
        load_checkpoint(path)


def test_truncated_checkpoint_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "m.vdck", init_params(TINY, 0))
    path.write_bytes(path.read_bytes()[:-10])

    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_flipped_array_byte_fails_checksum(tmp_path):
    path = save_checkpoint(tmp_path / "m.vdck", init_params(TINY, 0))
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0x01
    path.write_bytes(bytes(raw))

    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_header_without_meta_rejected(tmp_path):
    header = json.dumps({"version": CONTAINER_VERSION, "arrays": []}).encode("utf-8")
    path = tmp_path / "m.vdck"
    path.write_bytes(struct.pack("<4sIQ", MAGIC, CONTAINER_VERSION, len(header)) + header)

    with pytest.raises(CheckpointError, match="malformed header"):
        read_container(path)


@pytest.mark.parametrize("missing", ["model_config", "optimizer"])
def test_incomplete_checkpoint_metadata_rejected(tmp_path, missing):
    path = save_checkpoint(tmp_path / "m.vdck", init_params(TINY, 0))
    arrays, meta = read_container(path)
    del meta[missing]
    write_container(path, arrays, meta)

    with pytest.raises(CheckpointError, match="incomplete"):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.vdck")


def test_predict_clip_covers_every_frame(tiny_clip):
    model = init_params(TINY, 0)
    model.train()

    probs, features = predict_clip(model, tiny_clip, OracleFlowSource())

    assert probs.shape == (5, 3, 16, 24)
    assert features.shape == (5, 3, 16, 24)
    assert torch.allclose(probs.sum(dim=1), torch.ones(5, 16, 24), atol=1e-5)
    assert model.training
