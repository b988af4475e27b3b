"""Toy-scale video segmentation model with two branches and score fusion.

The current-frame branch segments frame k. The previous-frame branch
segments frame k-1, and its score map is backward-warped onto frame k. A
1x1 convolution fuses the two score maps, and a softmax yields the
probability map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .base_network import BaseNetwork
from .checkpoint import (
    load_state_arrays,
    pack_tree,
    read_container,
    state_arrays,
    unpack_tree,
    write_container,
)
from .errors import CheckpointError, ConfigError, ShapeError
from .flowwarp import FlowField, FlowSource, backward_warp

if TYPE_CHECKING:
    from .synthdata import VideoClip

CHECKPOINT_KIND = "segnet"
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class SegModelConfig:
    num_classes: int
    base_channels: int = 16
    num_down_levels: int = 2
    share_branches: bool = True
    activation: str = "relu"
    in_channels: int = 3

    def validate(self) -> "SegModelConfig":
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.num_down_levels < 0:
            raise ConfigError("num_down_levels must be >= 0")
        if self.activation not in ("relu", "elu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        return self


def _activation(name: str) -> nn.Module:
    return nn.ELU() if name == "elu" else nn.ReLU()


class SegBranch(BaseNetwork):
    """Small encoder-decoder producing per-pixel class scores at input resolution."""

    def __init__(self, config: SegModelConfig, **kwargs: Any) -> None:
        """Initialize the SegBranch.

        Args:
            config (SegModelConfig):
                Model configuration.
        """
        super().__init__(**kwargs)
        c = config.base_channels
        self.stem = nn.Conv2d(config.in_channels, c, 3, padding=1)
        self.down = nn.ModuleList(
            nn.Conv2d(c * 2**i, c * 2 ** (i + 1), 3, padding=1)
            for i in range(config.num_down_levels)
        )
        self.up = nn.ModuleList(
            nn.Conv2d(c * 2 ** (i + 1) + c * 2**i, c * 2**i, 3, padding=1)
            for i in reversed(range(config.num_down_levels))
        )
        self.head = nn.Conv2d(c, config.num_classes, 1)
        self.act = _activation(config.activation)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = self._checked("stem", self.act(self.stem(frames)))
        skips = []
        for i, conv in enumerate(self.down):
            skips.append(x)
            x = self._checked(f"down.{i}", self.act(conv(F.avg_pool2d(x, 2, ceil_mode=True))))
        for i, conv in enumerate(self.up):
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = self._checked(f"up.{i}", self.act(conv(torch.cat([x, skip], dim=1))))
        return self._checked("head", self.head(x))


class SegModel(BaseNetwork):
    """Two-branch segmentation model with a 1x1 score-fusion layer."""

    def __init__(self, config: SegModelConfig, **kwargs: Any) -> None:
        """Initialize the SegModel.

        Args:
            config (SegModelConfig):
                Model configuration. With ``share_branches`` the previous-frame
                branch reuses the current-frame branch's weights.
        """
        super().__init__(**kwargs)
        self.config = config.validate()
        self.branch_current = SegBranch(config, **kwargs)
        self.branch_previous = None if config.share_branches else SegBranch(config, **kwargs)
        self.fusion = nn.Conv2d(2 * config.num_classes, config.num_classes, 1)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def previous_branch(self) -> SegBranch:
        return self.branch_previous or self.branch_current

    @torch.no_grad()
    def reset_fusion_(self) -> None:
        """Set the fusion layer to the plain average of the two score maps."""
        c = self.num_classes
        eye = torch.eye(c, dtype=self.fusion.weight.dtype)
        self.fusion.weight.copy_(torch.cat([eye, eye], dim=1).mul_(0.5).view(c, 2 * c, 1, 1))
        self.fusion.bias.zero_()

    def forward_pair(
        self,
        frame_k: torch.Tensor,
        frame_km1: torch.Tensor,
        flow_bwd: FlowField,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict frame k from frames k and k-1.

        Args:
            frame_k (torch.Tensor):
                ``(N, 3, H, W)`` current frames.
            frame_km1 (torch.Tensor):
                ``(N, 3, H, W)`` previous frames.
            flow_bwd (FlowField):
                BACKWARD flow from frame k to frame k-1, ``(H, W, 2)`` or
                ``(N, H, W, 2)``.

        Returns:
            tuple[torch.Tensor, torch.Tensor]: ``(probs, features)`` where
            ``probs`` is the ``(N, C, H, W)`` softmax output and ``features``
            the pre-softmax fused scores.

        Raises:
            ShapeError: if the frames differ in shape.
            NumericalError: naming the layer that produced a non-finite value.
        """
        if frame_k.shape != frame_km1.shape:
            raise ShapeError(
                f"frame shapes differ: {tuple(frame_k.shape)} vs {tuple(frame_km1.shape)}"
            )
        scores_current = self.branch_current(frame_k)
        scores_previous = self.previous_branch()(frame_km1)
        # Out-of-frame scores are zero, i.e. uniform after the softmax.
        warped_previous, _ = backward_warp(scores_previous, flow_bwd, fill=0.0)
        fused = self._checked(
            "fusion", self.fusion(torch.cat([scores_current, warped_previous], dim=1))
        )
        return torch.softmax(fused, dim=1), fused

    def forward(
        self, frame_k: torch.Tensor, frame_km1: torch.Tensor, flow_bwd: FlowField
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.forward_pair(frame_k, frame_km1, flow_bwd)


def forward_pair(
    params: SegModel, frame_k: torch.Tensor, frame_km1: torch.Tensor, flow_bwd: FlowField
) -> tuple[torch.Tensor, torch.Tensor]:
    """Functional spelling of SegModel.forward_pair."""
    return params.forward_pair(frame_k, frame_km1, flow_bwd)


def init_params(config: SegModelConfig, seed: int, **kwargs: Any) -> SegModel:
    """Build a model with deterministic scaled-uniform initialization.

    Every convolution draws weights and biases from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)) using a generator seeded with ``seed``; the fusion layer
    then starts as the average of the two score maps.
    """
    model = SegModel(config, **kwargs)
    generator = torch.Generator().manual_seed(seed)
    model.init_uniform_(generator)
    model.reset_fusion_()
    return model


def frames_to_tensor(frames: np.ndarray | torch.Tensor) -> torch.Tensor:
    """``(H, W, 3)`` or ``(N, H, W, 3)`` frames to a float32 ``(N, 3, H, W)`` tensor."""
    tensor = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    if tensor.dim() == 3:
        tensor = tensor.unsqueeze(0)
    if tensor.dim() != 4 or tensor.shape[-1] != 3:
        raise ShapeError(f"frames must be (N, H, W, 3), got {tuple(tensor.shape)}")
    return tensor.permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def predict_clip(
    model: SegModel, clip: "VideoClip", flow_source: FlowSource, gap: int = 1
) -> tuple[torch.Tensor, torch.Tensor]:
    """Run every frame of a clip; return ``(probs, features)`` of shape ``(T, C, H, W)``.

    Frames without a predecessor ``gap`` frames back are paired with
    themselves and a zero flow.
    """
    was_training = model.training
    model.eval()
    probs, features = [], []
    try:
        for k in range(clip.num_frames):
            frame_k = frames_to_tensor(clip.frames[k])
            if k - gap >= 0:
                flow, _ = flow_source.pair(clip, k, gap)
                frame_prev = frames_to_tensor(clip.frames[k - gap])
            else:
                flow = FlowField.zeros(clip.height, clip.width)
                frame_prev = frame_k
            p, f = model.forward_pair(frame_k, frame_prev, flow)
            probs.append(p[0])
            features.append(f[0])
    finally:
        model.train(was_training)
    return torch.stack(probs), torch.stack(features)


def save_checkpoint(
    path: str | Path,
    params: SegModel,
    optimizer_state: dict[str, Any] | None = None,
    extra: dict[str, Any] | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> Path:
    """Write model parameters, optimizer state and the config echo.

    ``extra`` (JSON-able) and ``extra_arrays`` let the trainer store its
    discriminators and sampler state in the same container.
    """
    arrays = state_arrays(params, "model")
    arrays.update(extra_arrays or {})
    meta = {
        "kind": CHECKPOINT_KIND,
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(params.config),
        "optimizer": pack_tree(optimizer_state, "optimizer", arrays),
        "extra": extra or {},
    }
    return write_container(path, arrays, meta)


def load_checkpoint(path: str | Path) -> tuple[SegModel, dict[str, Any] | None]:
    """Rebuild the model and optimizer state written by save_checkpoint.

    Raises:
        CheckpointError: on a version mismatch, a foreign container, or a
            corrupt file.
    """
    model, optimizer_state, _, _ = load_checkpoint_full(path)
    return model, optimizer_state


def load_checkpoint_full(
    path: str | Path,
) -> tuple[SegModel, dict[str, Any] | None, dict[str, Any], dict[str, np.ndarray]]:
    """Like load_checkpoint, also returning the ``extra`` metadata and all arrays."""
    arrays, meta = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a segmentation checkpoint")
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path} has segmentation checkpoint format {meta.get('format')}, expected {CHECKPOINT_FORMAT}"
        )
    try:
        model = SegModel(SegModelConfig(**meta["model_config"]))
        optimizer = unpack_tree(meta["optimizer"], arrays)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete segmentation checkpoint ({exc!r})") from exc
    load_state_arrays(model, "model", arrays)
    return model, optimizer, meta.get("extra", {}), arrays
