import json
from dataclasses import replace

import numpy as np
import pytest

from vidadapt.errors import DatasetError, ShapeError
from vidadapt.synthdata import (
    MANIFEST_NAME,
    TARGET_SHIFT,
    ClipSpec,
    DomainShift,
    ObjectSpec,
    TextureId,
    apply_domain_shift,
    generate_clip,
    generate_dataset,
    label_warp_agreement,
    load_dataset,
    random_clip_spec,
    read_manifest,
    write_dataset,
)


def test_static_scene_has_zero_flow_and_no_occlusion():
    spec = random_clip_spec(5, height=16, width=24, num_frames=3, num_classes=3, max_speed=0.0)
    clip = generate_clip(spec)

    assert not clip.flows_fwd.any()
    assert not clip.flows_bwd.any()
    assert not clip.occlusion_masks.any()


def test_moving_square_flow_matches_motion(moving_square_spec):
    clip = generate_clip(moving_square_spec)

    on_object = clip.labels[0] == 1
    assert on_object.sum() == 49
    assert np.all(clip.forward_flow(1).numpy()[on_object] == (2.0, 0.0))
    assert np.all(clip.forward_flow(1).numpy()[~on_object] == 0.0)

    moved = clip.labels[1] == 1
    assert np.all(clip.backward_flow(1).numpy()[moved] == (-2.0, 0.0))


def test_moving_square_uncovers_trailing_edge(moving_square_spec):
    clip = generate_clip(moving_square_spec)

    occluded = clip.occlusion(1)
    # Square spans columns 5..11 in frame 0 and 7..13 in frame 1.
    assert occluded[5:12, 5:7].all()
    assert not occluded[5:12, 7:14].any()
    assert occluded.sum() == 14


def test_generation_is_deterministic(moving_square_spec):
    assert generate_clip(moving_square_spec) == generate_clip(moving_square_spec)
    spec = random_clip_spec(21, height=16, width=24, num_frames=4, num_classes=4)
    assert generate_clip(spec) == generate_clip(spec)


def test_clip_shapes_and_label_range(tiny_clip):
    assert tiny_clip.frames.shape == (5, 16, 24, 3)
    assert tiny_clip.labels.shape == (5, 16, 24)
    assert tiny_clip.flows_bwd.shape == (4, 16, 24, 2)
    assert tiny_clip.frames.min() >= 0.0
    assert tiny_clip.frames.max() <= 1.0
    assert tiny_clip.labels.max() < 3


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_oracle_flow_reproduces_labels(seed):
    clip = generate_clip(random_clip_spec(seed, height=32, width=48, num_frames=4, num_classes=4))

    for k in range(1, clip.num_frames):
        assert label_warp_agreement(clip, k) >= 0.99


def test_object_classes_stay_in_range():
    spec = random_clip_spec(8, num_classes=3, num_objects=10)
    assert all(1 <= obj.class_id < 3 for obj in spec.objects)


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"height": 15}, "at least 16"),
        ({"width": 8}, "at least 16"),
        ({"num_frames": 2}, "at least 3 frames"),
        ({"num_classes": 1}, "num_classes"),
    ],
)
def test_invalid_specs_rejected(moving_square_spec, overrides, message):
    with pytest.raises(ShapeError, match=message):
        generate_clip(replace(moving_square_spec, **overrides))


def test_background_class_reserved(moving_square_spec):
    obj = ObjectSpec(class_id=0, shape="rect", center=(4.0, 4.0), radii=(2.0, 2.0))
    with pytest.raises(ShapeError, match="object class 0"):
        generate_clip(replace(moving_square_spec, objects=(obj,)))


def test_identity_shift_is_bit_exact(tiny_clip):
    shifted = apply_domain_shift(tiny_clip, DomainShift())
    assert np.array_equal(shifted.frames, tiny_clip.frames)
    assert shifted.frames is not tiny_clip.frames


def test_brightness_gain_clamps(tiny_clip):
    clip = replace(tiny_clip, frames=np.full_like(tiny_clip.frames, 0.6))

    shifted = apply_domain_shift(clip, DomainShift(brightness_gain=2.0))

    assert np.all(shifted.frames == 1.0)


def test_noise_is_reproducible(tiny_clip):
    shift = DomainShift(noise_std=0.1, seed=4)

    first = apply_domain_shift(tiny_clip, shift)
    second = apply_domain_shift(tiny_clip, shift)

    assert np.array_equal(first.frames, second.frames)
    assert not np.array_equal(first.frames, tiny_clip.frames)


@pytest.mark.parametrize("texture", list(TextureId))
def test_shift_never_touches_labels_or_flow(tiny_clip, texture):
    shifted = apply_domain_shift(tiny_clip, replace(TARGET_SHIFT, texture_id=texture))

    assert np.array_equal(shifted.labels, tiny_clip.labels)
    assert np.array_equal(shifted.flows_fwd, tiny_clip.flows_fwd)
    assert np.array_equal(shifted.flows_bwd, tiny_clip.flows_bwd)
    assert np.array_equal(shifted.occlusion_masks, tiny_clip.occlusion_masks)
    assert shifted.frames.min() >= 0.0
    assert shifted.frames.max() <= 1.0


def test_target_clips_differ_in_appearance_only():
    kwargs = dict(height=16, width=24, num_frames=3, num_classes=3, num_objects=2)
    source = generate_dataset("source", 1, 40, **kwargs)[0]
    target = generate_dataset("target", 1, 40, **kwargs)[0]

    assert target.domain == "target"
    assert np.array_equal(source.labels, target.labels)
    assert not np.array_equal(source.frames, target.frames)


def test_write_then_load(tmp_path, tiny_clip):
    clips = [tiny_clip, generate_clip(random_clip_spec(12, height=16, width=16, num_frames=3))]

    manifest = write_dataset(clips, tmp_path / "data")
    loaded = load_dataset(tmp_path / "data")

    assert [entry.directory for entry in manifest.clips] == ["clip_00000", "clip_00001"]
    assert loaded == clips
    assert loaded[0].name == tiny_clip.name
    assert loaded[0].spec == tiny_clip.spec


def test_load_limit(tmp_path, tiny_clip):
    write_dataset([tiny_clip] * 3, tmp_path)
    assert len(load_dataset(tmp_path, limit=2)) == 2


def test_same_seed_writes_identical_bytes(tmp_path, moving_square_spec):
    write_dataset([generate_clip(moving_square_spec)], tmp_path / "a")
    write_dataset([generate_clip(moving_square_spec)], tmp_path / "b", workers=2)

    for path in sorted((tmp_path / "a").rglob("*")):
        if path.is_file():
            twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
            assert path.read_bytes() == twin.read_bytes()


def test_empty_directory_has_no_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest not found"):
        load_dataset(tmp_path)


def test_corrupt_manifest(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text("{not json")
    with pytest.raises(DatasetError, match="corrupt manifest"):
        read_manifest(tmp_path)


def test_deleted_file_names_its_clip(tmp_path):
    clips = generate_dataset("source", 10, 0, height=16, width=16, num_frames=3, num_classes=3)
    manifest = write_dataset(clips, tmp_path)
    victim = manifest.clips[6]
    (tmp_path / victim.directory / "labels.bin").unlink()

    with pytest.raises(DatasetError, match=victim.name):
        load_dataset(tmp_path)


def test_truncated_file_is_reported(tmp_path, tiny_clip):
    write_dataset([tiny_clip], tmp_path)
    path = tmp_path / "clip_00000" / "frames.bin"
    path.write_bytes(path.read_bytes()[:-4])

    with pytest.raises(DatasetError, match="frames.bin"):
        load_dataset(tmp_path)


def test_flow_direction_tag_checked(tmp_path, tiny_clip):
    write_dataset([tiny_clip], tmp_path)
    path = tmp_path / "clip_00000" / "flow_bwd.bin"
    payload = bytearray(path.read_bytes())
    payload[0] ^= 0xFF
    path.write_bytes(bytes(payload))

    with pytest.raises(DatasetError, match="direction tag"):
        load_dataset(tmp_path)


def test_clip_spec_defaults_to_source_domain():
    spec = ClipSpec(height=16, width=16, num_frames=3, num_classes=2)
    assert generate_clip(spec).domain == "source"


def test_manifest_records_how_clips_were_drawn(tmp_path):
    kwargs = dict(height=16, width=16, num_frames=3, num_classes=3)
    clips = generate_dataset("target", 2, 7, **kwargs)

    write_dataset(clips, tmp_path, generation={"domain": "target", "first_seed": 7, **kwargs})
    manifest = read_manifest(tmp_path)

    assert manifest.generation["first_seed"] == 7
    assert manifest.generation["height"] == 16
    assert [entry.seed for entry in manifest.clips] == [7, 8]
    shift = manifest.clips[1].shift
    assert shift["brightness_gain"] == TARGET_SHIFT.brightness_gain
    assert shift["texture_id"] == TARGET_SHIFT.texture_id.value


@pytest.mark.parametrize("remove", [("domain",), ("arrays", "labels"), ("C",)])
def test_incomplete_clip_header_is_a_dataset_error(tmp_path, tiny_clip, remove):
    write_dataset([tiny_clip], tmp_path)
    path = tmp_path / "clip_00000" / "header.json"
    header = json.loads(path.read_text())
    node = header
    for key in remove[:-1]:
        node = node[key]
    del node[remove[-1]]
    path.write_text(json.dumps(header))

    with pytest.raises(DatasetError, match="corrupt header"):
        load_dataset(tmp_path)
