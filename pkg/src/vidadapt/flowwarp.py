"""Flow fields, backward warping, block-matching flow and occlusion masks.

Conventions:
    * Flow data is ``(..., H, W, 2)`` holding ``(dx, dy)`` in pixels.
    * A BACKWARD field lives on the grid of the later frame and points at the
      matching location in the earlier frame (``k -> k-1``). A FORWARD field
      lives on the earlier frame's grid and points into the later frame.
    * Maps that get warped are channels-first, ``(..., C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn.functional as F
from docstring_inheritance import GoogleDocstringInheritanceInitMeta

from .errors import FlowError, ShapeError
from .logs import get_logger

if TYPE_CHECKING:
    from .synthdata import VideoClip

log = get_logger(__name__)

DEFAULT_OCCLUSION_THRESHOLD = 1.0


class FlowDirection(IntEnum):
    """Direction tag stored with every flow field (one byte on disk)."""

    FORWARD = 0
    BACKWARD = 1


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement field with an explicit direction tag."""

    data: torch.Tensor
    direction: FlowDirection

    def __post_init__(self) -> None:
        data = self.data
        if not isinstance(data, torch.Tensor):
            data = torch.as_tensor(np.asarray(data))
        if not data.is_floating_point():
            data = data.to(torch.float32)
        if data.dim() < 3 or data.shape[-1] != 2:
            raise ShapeError(f"flow data must be (..., H, W, 2), got {tuple(data.shape)}")
        if not torch.isfinite(data).all():
            raise FlowError("flow data contains non-finite entries")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "direction", FlowDirection(self.direction))

    @classmethod
    def zeros(
        cls, height: int, width: int, direction: FlowDirection = FlowDirection.BACKWARD
    ) -> "FlowField":
        return cls(torch.zeros(height, width, 2), direction)

    @classmethod
    def constant(
        cls,
        height: int,
        width: int,
        dx: float,
        dy: float,
        direction: FlowDirection = FlowDirection.BACKWARD,
    ) -> "FlowField":
        data = torch.empty(height, width, 2)
        data[..., 0] = dx
        data[..., 1] = dy
        return cls(data, direction)

    @property
    def height(self) -> int:
        return int(self.data.shape[-3])

    @property
    def width(self) -> int:
        return int(self.data.shape[-2])

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy()

    def retag(self, direction: FlowDirection) -> "FlowField":
        return FlowField(self.data, direction)


@dataclass(frozen=True, eq=False)
class ValidityMask:
    """Boolean ``(..., H, W)`` mask; True marks a trustworthy correspondence."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        data = self.data
        if not isinstance(data, torch.Tensor):
            data = torch.as_tensor(np.asarray(data))
        object.__setattr__(self, "data", data.to(torch.bool))

    def __and__(self, other: "ValidityMask") -> "ValidityMask":
        return ValidityMask(self.data & other.data)

    def fraction(self) -> float:
        return float(self.data.float().mean()) if self.data.numel() else 0.0


def _pixel_grid(height: int, width: int, dtype: torch.dtype, device) -> tuple[torch.Tensor, torch.Tensor]:
    gy, gx = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return gx, gy


def _bilinear_sample(
    values: torch.Tensor, offsets: torch.Tensor, fill: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``values`` (..., C, H, W) at ``grid + offsets`` (..., H, W, 2).

    Returns the sampled map and the in-bounds mask. Out-of-bounds pixels
    receive ``fill``. Integer offsets reproduce exact index shifts.
    """
    height, width = values.shape[-2:]
    channels = values.shape[-3]
    if tuple(offsets.shape[-3:-1]) != (height, width):
        raise ShapeError(
            f"flow grid {tuple(offsets.shape[-3:-1])} does not match map grid {(height, width)}"
        )
    lead = torch.broadcast_shapes(values.shape[:-3], offsets.shape[:-3])
    values = values.expand(*lead, channels, height, width)
    offsets = offsets.to(values.dtype).expand(*lead, height, width, 2)

    gx, gy = _pixel_grid(height, width, values.dtype, values.device)
    sx = gx + offsets[..., 0]
    sy = gy + offsets[..., 1]
    inside = (sx >= 0) & (sx <= width - 1) & (sy >= 0) & (sy <= height - 1)

    fx = torch.floor(sx)
    fy = torch.floor(sy)
    wx = (sx - fx).unsqueeze(-3)
    wy = (sy - fy).unsqueeze(-3)
    x0 = fx.long().clamp(0, width - 1)
    y0 = fy.long().clamp(0, height - 1)
    x1 = (x0 + 1).clamp(max=width - 1)
    y1 = (y0 + 1).clamp(max=height - 1)

    flat = values.reshape(-1, channels, height * width)

    def gather(ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
        index = (ys * width + xs).reshape(-1, 1, height * width).expand(-1, channels, -1)
        return flat.gather(2, index).reshape(*lead, channels, height, width)

    out = (
        (1 - wx) * (1 - wy) * gather(y0, x0)
        + wx * (1 - wy) * gather(y0, x1)
        + (1 - wx) * wy * gather(y1, x0)
        + wx * wy * gather(y1, x1)
    )
    out = torch.where(inside.unsqueeze(-3), out, torch.full_like(out, fill))
    return out, inside


def backward_warp(
    values: torch.Tensor, flow: FlowField, fill: float | None = None
) -> tuple[torch.Tensor, ValidityMask]:
    """Resample a channels-first map from the earlier frame onto the later frame.

    Args:
        values (torch.Tensor):
            Map of shape ``(..., C, H, W)`` on the earlier frame's grid.
        flow (FlowField):
            BACKWARD field on the later frame's grid.
        fill (float | None):
            Value written where the sample falls outside the frame. Defaults
            to ``1 / C`` so warped probability maps stay on the simplex.

    Returns:
        tuple[torch.Tensor, ValidityMask]: the warped map and its in-bounds mask.

    Raises:
        FlowError: if the flow is not tagged BACKWARD.
        ShapeError: if the flow grid does not match the map grid.
    """
    if flow.direction is not FlowDirection.BACKWARD:
        raise FlowError("backward_warp needs a BACKWARD flow field")
    if values.dim() < 3:
        raise ShapeError(f"map must be (..., C, H, W), got {tuple(values.shape)}")
    if fill is None:
        fill = 1.0 / values.shape[-3]
    out, inside = _bilinear_sample(values, flow.data.to(values.device), fill)
    return out, ValidityMask(inside)


def warp_labels(
    labels: np.ndarray, flow: FlowField, fill: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour backward warp of an integer label map ``(..., H, W)``."""
    if flow.direction is not FlowDirection.BACKWARD:
        raise FlowError("warp_labels needs a BACKWARD flow field")
    labels = np.asarray(labels)
    height, width = labels.shape[-2:]
    data = flow.numpy()
    if data.shape[-3:-1] != (height, width):
        raise ShapeError(f"flow grid {data.shape[-3:-1]} does not match labels {(height, width)}")
    gy, gx = np.mgrid[0:height, 0:width]
    sx = np.rint(gx + data[..., 0]).astype(np.int64)
    sy = np.rint(gy + data[..., 1]).astype(np.int64)
    valid = (sx >= 0) & (sx < width) & (sy >= 0) & (sy < height)
    sx = np.clip(sx, 0, width - 1)
    sy = np.clip(sy, 0, height - 1)
    warped = np.take_along_axis(
        labels.reshape(*labels.shape[:-2], -1),
        (sy * width + sx).reshape(*sx.shape[:-2], -1),
        axis=-1,
    ).reshape(sx.shape)
    return np.where(valid, warped, fill).astype(labels.dtype), valid


def _displacement_order(radius: int) -> list[tuple[int, int]]:
    # Zero displacement first, then outward; strict comparison keeps the first winner.
    candidates = [
        (dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
    ]
    return sorted(candidates, key=lambda d: (abs(d[0]) + abs(d[1]), abs(d[1]), d[1], d[0]))


def estimate_flow(
    frame_a: np.ndarray | torch.Tensor,
    frame_b: np.ndarray | torch.Tensor,
    patch_size: int = 5,
    search_radius: int = 3,
) -> FlowField:
    """Integer block-matching flow from ``frame_b`` back to ``frame_a``.

    For every pixel ``p`` of ``frame_b`` the displacement ``d`` minimizing the
    patch sum of squared differences between ``frame_b`` around ``p`` and
    ``frame_a`` around ``p + d`` is chosen, so ``frame_b(p) ~ frame_a(p + d)``.
    The result is tagged BACKWARD (it lives on ``frame_b``'s grid). Ties go to
    the displacement closest to zero.

    Args:
        frame_a (np.ndarray | torch.Tensor):
            Earlier frame, ``(H, W, 3)``.
        frame_b (np.ndarray | torch.Tensor):
            Later frame, same shape.
        patch_size (int):
            Odd side length of the matching window.
        search_radius (int):
            Largest displacement tried along each axis.

    Raises:
        ShapeError: if the frames differ in shape.
        FlowError: if the frames are smaller than the patch.
    """
    a = torch.as_tensor(np.asarray(frame_a), dtype=torch.float64)
    b = torch.as_tensor(np.asarray(frame_b), dtype=torch.float64)
    if a.shape != b.shape or a.dim() != 3:
        raise ShapeError(f"frames must share an (H, W, 3) shape, got {tuple(a.shape)} and {tuple(b.shape)}")
    height, width = a.shape[:2]
    if patch_size < 1 or patch_size % 2 == 0:
        raise FlowError(f"patch_size must be odd and positive, got {patch_size}")
    if height < patch_size or width < patch_size:
        raise FlowError(f"frames {height}x{width} are smaller than the {patch_size}px patch")

    a = a.permute(2, 0, 1).unsqueeze(0)
    b = b.permute(2, 0, 1).unsqueeze(0)
    r = search_radius
    a_padded = F.pad(a, (r, r, r, r), mode="replicate")
    gx, gy = _pixel_grid(height, width, torch.float64, a.device)

    best_cost = torch.full((height, width), float("inf"), dtype=torch.float64)
    best = torch.zeros(height, width, 2, dtype=torch.float32)
    for dx, dy in _displacement_order(r):
        shifted = a_padded[..., r + dy : r + dy + height, r + dx : r + dx + width]
        diff = ((b - shifted) ** 2).sum(dim=1, keepdim=True)
        cost = F.avg_pool2d(
            diff, patch_size, stride=1, padding=patch_size // 2, count_include_pad=False
        )[0, 0]
        inside = (gx + dx >= 0) & (gx + dx < width) & (gy + dy >= 0) & (gy + dy < height)
        cost = torch.where(inside, cost, torch.full_like(cost, float("inf")))
        better = cost < best_cost
        best_cost = torch.where(better, cost, best_cost)
        best[..., 0] = torch.where(better, float(dx), best[..., 0])
        best[..., 1] = torch.where(better, float(dy), best[..., 1])
    return FlowField(best, FlowDirection.BACKWARD)


def occlusion_mask(
    flow_fwd: FlowField,
    flow_bwd: FlowField,
    threshold: float = DEFAULT_OCCLUSION_THRESHOLD,
) -> ValidityMask:
    """Forward-backward consistency mask on the backward field's grid.

    A pixel ``p`` of the later frame is valid when ``p + bwd(p)`` lies inside
    the earlier frame and ``|bwd(p) + fwd(p + bwd(p))| <= threshold``.

    Raises:
        FlowError: if both fields carry the same direction tag.
        ShapeError: if the grids differ.
    """
    if flow_fwd.direction == flow_bwd.direction:
        raise FlowError("occlusion_mask needs one FORWARD and one BACKWARD field")
    if flow_fwd.direction is FlowDirection.BACKWARD:
        flow_fwd, flow_bwd = flow_bwd, flow_fwd
    if flow_fwd.data.shape != flow_bwd.data.shape:
        raise ShapeError("forward and backward flows must share a shape")
    bwd = flow_bwd.data.to(torch.float64)
    fwd = flow_fwd.data.to(torch.float64).movedim(-1, -3)
    sampled, inside = _bilinear_sample(fwd, bwd, 0.0)
    round_trip = bwd + sampled.movedim(-3, -1)
    distance = torch.linalg.vector_norm(round_trip, dim=-1)
    return ValidityMask(inside & (distance <= threshold))


def compose_flows(first: FlowField, second: FlowField) -> FlowField:
    """Chain two same-direction fields: ``first`` is applied, then ``second``.

    For BACKWARD fields ``first`` maps ``k -> k-1`` and ``second`` maps
    ``k-1 -> k-2``; for FORWARD fields ``first`` maps ``k-2 -> k-1`` and
    ``second`` maps ``k-1 -> k``. Samples falling outside the frame contribute
    zero displacement; use occlusion_mask to find them.
    """
    if first.direction != second.direction:
        raise FlowError("compose_flows needs fields with the same direction tag")
    sampled, _ = _bilinear_sample(second.data.movedim(-1, -3), first.data, 0.0)
    return FlowField(first.data + sampled.movedim(-3, -1), first.direction)


class FlowSource(metaclass=GoogleDocstringInheritanceInitMeta):
    """Supplies backward flow and validity for frame pairs of a clip."""

    def __init__(self, *, threshold: float = DEFAULT_OCCLUSION_THRESHOLD) -> None:
        """Initialize the FlowSource.

        Args:
            threshold (float):
                Forward-backward distance above which a pixel counts as occluded.
        """
        self.threshold = threshold

    def pair(self, clip: "VideoClip", k: int, gap: int = 1) -> tuple[FlowField, ValidityMask]:
        """Backward flow from frame ``k`` to frame ``k - gap`` and its validity.

        Args:
            clip (VideoClip):
                Clip holding the frames.
            k (int):
                Index of the later frame.
            gap (int):
                Frame distance to the earlier frame.

        Returns:
            tuple[FlowField, ValidityMask]: BACKWARD flow on frame ``k`` and the
            mask of non-occluded, in-frame pixels.
        """
        raise NotImplementedError

    @staticmethod
    def _check_pair(clip: "VideoClip", k: int, gap: int) -> None:
        if gap < 1 or k - gap < 0 or k >= clip.num_frames:
            raise FlowError(f"no frame pair ({k - gap}, {k}) in a clip of {clip.num_frames} frames")


class OracleFlowSource(FlowSource):
    """Exact flow recorded by the synthetic renderer."""

    def pair(self, clip: "VideoClip", k: int, gap: int = 1) -> tuple[FlowField, ValidityMask]:
        self._check_pair(clip, k, gap)
        if gap == 1:
            return clip.backward_flow(k), ValidityMask(~torch.from_numpy(clip.occlusion(k)))
        bwd = clip.backward_flow(k)
        for j in range(k - 1, k - gap, -1):
            bwd = compose_flows(bwd, clip.backward_flow(j))
        fwd = clip.forward_flow(k - gap + 1)
        for j in range(k - gap + 2, k + 1):
            fwd = compose_flows(fwd, clip.forward_flow(j))
        return bwd, occlusion_mask(fwd, bwd, self.threshold)


class EstimatedFlowSource(FlowSource):
    """Block-matching estimate, validated by a forward-backward check."""

    def __init__(
        self,
        *,
        patch_size: int = 5,
        search_radius: int = 3,
        threshold: float = DEFAULT_OCCLUSION_THRESHOLD,
    ) -> None:
        """Initialize the EstimatedFlowSource.

        Args:
            patch_size (int):
                Block-matching window size.
            search_radius (int):
                Block-matching search radius.
        """
        super().__init__(threshold=threshold)
        self.patch_size = patch_size
        self.search_radius = search_radius

    def pair(self, clip: "VideoClip", k: int, gap: int = 1) -> tuple[FlowField, ValidityMask]:
        self._check_pair(clip, k, gap)
        earlier, later = clip.frames[k - gap], clip.frames[k]
        bwd = estimate_flow(earlier, later, self.patch_size, self.search_radius)
        # Matching the other way round yields the field on the earlier grid.
        fwd = estimate_flow(later, earlier, self.patch_size, self.search_radius)
        return bwd, occlusion_mask(fwd.retag(FlowDirection.FORWARD), bwd, self.threshold)


def make_flow_source(
    kind: str,
    *,
    patch_size: int = 5,
    search_radius: int = 3,
    threshold: float = DEFAULT_OCCLUSION_THRESHOLD,
) -> FlowSource:
    """Build the flow source named by the ``flow_source`` option."""
    if kind == "oracle":
        return OracleFlowSource(threshold=threshold)
    if kind == "estimated":
        return EstimatedFlowSource(
            patch_size=patch_size, search_radius=search_radius, threshold=threshold
        )
    raise FlowError(f"unknown flow source {kind!r}")
