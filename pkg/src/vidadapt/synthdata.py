"""Paired-domain synthetic videos: moving shapes, dense labels, exact flow.

Each clip shows textured shapes gliding at constant integer velocity over a
static textured background. Because the motion is analytic the generator
knows the exact flow in both directions and which pixels are disoccluded.
A ``DomainShift`` then alters appearance only, which yields a labelled
"source" domain and a shifted "target" domain.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import DatasetError, ShapeError
from .flowwarp import FlowDirection, FlowField, warp_labels
from .logs import get_logger

log = get_logger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
HEADER_NAME = "header.json"
MIN_SIZE = 16
MIN_FRAMES = 3

# Class 0 is background; class c > 0 draws with CLASS_COLORS[c - 1].
CLASS_COLORS: tuple[tuple[float, float, float], ...] = (
    (0.85, 0.20, 0.20),
    (0.20, 0.65, 0.25),
    (0.20, 0.35, 0.85),
    (0.90, 0.80, 0.20),
    (0.70, 0.25, 0.75),
    (0.20, 0.75, 0.80),
    (0.95, 0.55, 0.15),
    (0.55, 0.35, 0.20),
)


class TextureId(str, Enum):
    """Background modulation patterns a domain shift can overlay."""

    NONE = "none"
    STRIPES = "stripes"
    CHECKER = "checker"
    GRAIN = "grain"


@dataclass(frozen=True)
class DomainShift:
    """Appearance change separating the target domain from the source domain.

    The identity shift (hue 0, gain 1, no noise, no texture) leaves frames
    bit-identical.
    """

    hue_shift: float = 0.0
    """Rotation of the hue circle, in turns."""

    brightness_gain: float = 1.0
    """Multiplicative gain applied after the hue rotation."""

    noise_std: float = 0.0
    """Standard deviation of additive Gaussian noise."""

    texture_id: TextureId = TextureId.NONE
    """Pattern multiplied into background pixels."""

    seed: int = 0
    """Seed of the noise stream."""

    def __post_init__(self) -> None:
        object.__setattr__(self, "texture_id", TextureId(self.texture_id))

    @property
    def is_identity(self) -> bool:
        return (
            self.hue_shift == 0.0
            and self.brightness_gain == 1.0
            and self.noise_std == 0.0
            and self.texture_id is TextureId.NONE
        )


# Presets, in the spirit of named style themes.
SOURCE_SHIFT = DomainShift()
TARGET_SHIFT = DomainShift(
    hue_shift=0.08, brightness_gain=0.8, noise_std=0.04, texture_id=TextureId.STRIPES
)


@dataclass(frozen=True)
class ObjectSpec:
    """One moving shape. Larger list index means closer to the camera."""

    class_id: int
    shape: str
    center: tuple[float, float]
    radii: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    texture_phase: float = 0.0


@dataclass(frozen=True)
class ClipSpec:
    """Everything needed to render one clip deterministically."""

    height: int
    width: int
    num_frames: int
    num_classes: int
    objects: tuple[ObjectSpec, ...] = ()
    shift_params: DomainShift = SOURCE_SHIFT
    seed: int = 0
    domain: str = "source"

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def validate(self) -> "ClipSpec":
        if self.height < MIN_SIZE or self.width < MIN_SIZE:
            raise ShapeError(
                f"clip must be at least {MIN_SIZE}x{MIN_SIZE}, got {self.height}x{self.width}"
            )
        if self.num_frames < MIN_FRAMES:
            raise ShapeError(f"clip needs at least {MIN_FRAMES} frames, got {self.num_frames}")
        if not 2 <= self.num_classes <= 256:
            raise ShapeError(f"num_classes must lie in [2, 256], got {self.num_classes}")
        for obj in self.objects:
            if not 1 <= obj.class_id < self.num_classes:
                raise ShapeError(
                    f"object class {obj.class_id} outside [1, {self.num_classes})"
                )
            if obj.shape not in ("ellipse", "rect"):
                raise ShapeError(f"unknown object shape {obj.shape!r}")
        if self.domain not in ("source", "target"):
            raise ShapeError(f"domain must be 'source' or 'target', got {self.domain!r}")
        return self


def spec_to_dict(spec: ClipSpec) -> dict[str, Any]:
    data = asdict(spec)
    data["shift_params"]["texture_id"] = spec.shift_params.texture_id.value
    return data


def spec_from_dict(data: dict[str, Any]) -> ClipSpec:
    objects = tuple(
        ObjectSpec(
            class_id=o["class_id"],
            shape=o["shape"],
            center=tuple(o["center"]),
            radii=tuple(o["radii"]),
            velocity=tuple(o["velocity"]),
            color=tuple(o["color"]),
            texture_phase=o["texture_phase"],
        )
        for o in data["objects"]
    )
    return ClipSpec(
        height=data["height"],
        width=data["width"],
        num_frames=data["num_frames"],
        num_classes=data["num_classes"],
        objects=objects,
        shift_params=DomainShift(**data["shift_params"]),
        seed=data["seed"],
        domain=data["domain"],
    )


@dataclass(eq=False)
class VideoClip:
    """A rendered clip with dense labels and exact flow.

    Flow and occlusion arrays have ``T - 1`` entries; entry ``k - 1`` links
    frame ``k`` to frame ``k - 1``. Use the accessors rather than indexing.
    """

    frames: np.ndarray
    """``(T, H, W, 3)`` float32 in [0, 1]."""

    labels: np.ndarray
    """``(T, H, W)`` uint8 class ids in [0, C)."""

    flows_fwd: np.ndarray
    """``(T-1, H, W, 2)`` float32, frame k-1 grid -> frame k."""

    flows_bwd: np.ndarray
    """``(T-1, H, W, 2)`` float32, frame k grid -> frame k-1."""

    occlusion_masks: np.ndarray
    """``(T-1, H, W)`` bool, True where frame k's pixel has no source in k-1."""

    domain: str
    num_classes: int
    name: str = ""
    spec: ClipSpec | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        t, h, w = self.labels.shape
        if self.frames.shape != (t, h, w, 3):
            raise ShapeError(f"frames {self.frames.shape} do not match labels {self.labels.shape}")
        for name in ("flows_fwd", "flows_bwd"):
            if getattr(self, name).shape != (t - 1, h, w, 2):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}")
        if self.occlusion_masks.shape != (t - 1, h, w):
            raise ShapeError(f"occlusion_masks has shape {self.occlusion_masks.shape}")

    @property
    def num_frames(self) -> int:
        return int(self.labels.shape[0])

    @property
    def height(self) -> int:
        return int(self.labels.shape[1])

    @property
    def width(self) -> int:
        return int(self.labels.shape[2])

    def _check_k(self, k: int) -> None:
        if not 1 <= k < self.num_frames:
            raise IndexError(f"frame pair index {k} outside [1, {self.num_frames})")

    def backward_flow(self, k: int) -> FlowField:
        """Flow on frame k pointing into frame k-1."""
        self._check_k(k)
        return FlowField(self.flows_bwd[k - 1], FlowDirection.BACKWARD)

    def forward_flow(self, k: int) -> FlowField:
        """Flow on frame k-1 pointing into frame k."""
        self._check_k(k)
        return FlowField(self.flows_fwd[k - 1], FlowDirection.FORWARD)

    def occlusion(self, k: int) -> np.ndarray:
        """Pixels of frame k whose frame k-1 source is covered or off-frame."""
        self._check_k(k)
        return self.occlusion_masks[k - 1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VideoClip):
            return NotImplemented
        return (
            self.domain == other.domain
            and self.num_classes == other.num_classes
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.flows_fwd, other.flows_fwd)
            and np.array_equal(self.flows_bwd, other.flows_bwd)
            and np.array_equal(self.occlusion_masks, other.occlusion_masks)
        )

    __hash__ = None  # type: ignore[assignment]


################################################################@##########
# Rendering
################################################################@##########
def _background(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    gy, gx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = 0.45 + 0.05 * rng.uniform(-1, 1, size=3)
    image = np.empty((height, width, 3))
    for c in range(3):
        pattern = np.zeros((height, width))
        for _ in range(3):
            fx, fy = rng.uniform(0.05, 0.6, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            pattern += np.sin(fx * gx + fy * gy + phase)
        image[..., c] = base[c] + 0.06 * pattern / 3.0
    return image


def _object_position(obj: ObjectSpec, t: int) -> tuple[float, float]:
    return obj.center[0] + obj.velocity[0] * t, obj.center[1] + obj.velocity[1] * t


def _object_mask(obj: ObjectSpec, t: int, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    cx, cy = _object_position(obj, t)
    rx, ry = obj.radii
    if obj.shape == "ellipse":
        return ((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2 <= 1.0
    return (np.abs(gx - cx) <= rx) & (np.abs(gy - cy) <= ry)


def _object_shading(obj: ObjectSpec, t: int, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # Texture is fixed in object coordinates, so it moves with the shape.
    cx, cy = _object_position(obj, t)
    u, v = gx - cx, gy - cy
    return 0.85 + 0.15 * np.sin(0.9 * u + obj.texture_phase) * np.cos(0.7 * v)


def _render(spec: ClipSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return frames ``(T, H, W, 3)`` and surface ids ``(T, H, W)`` (0 = background)."""
    rng = np.random.default_rng(spec.seed)
    h, w, t_count = spec.height, spec.width, spec.num_frames
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    background = _background(h, w, rng)
    frames = np.empty((t_count, h, w, 3))
    surfaces = np.zeros((t_count, h, w), dtype=np.int32)
    for t in range(t_count):
        image = background.copy()
        for index, obj in enumerate(spec.objects, start=1):
            mask = _object_mask(obj, t, gx, gy)
            shading = _object_shading(obj, t, gx, gy)
            image[mask] = np.asarray(obj.color) * shading[mask][:, None]
            surfaces[t][mask] = index
        frames[t] = image
    return np.clip(frames, 0.0, 1.0).astype(np.float32), surfaces


def _surface_velocities(spec: ClipSpec) -> np.ndarray:
    velocities = np.zeros((spec.num_objects + 1, 2), dtype=np.float32)
    for index, obj in enumerate(spec.objects, start=1):
        velocities[index] = obj.velocity
    return velocities


def generate_clip(spec: ClipSpec) -> VideoClip:
    """Render a clip, its labels, exact flows and occlusion masks.

    The clip's own ``shift_params`` is applied last, so a target-domain spec
    yields target-domain frames directly.

    Raises:
        ShapeError: if the spec is invalid (frames smaller than 16 px, fewer
            than 3 frames, class ids outside [1, C)).
    """
    spec.validate()
    frames, surfaces = _render(spec)
    class_of_surface = np.array(
        [0] + [obj.class_id for obj in spec.objects], dtype=np.uint8
    )
    labels = class_of_surface[surfaces]
    velocities = _surface_velocities(spec)

    h, w = spec.height, spec.width
    gy, gx = np.mgrid[0:h, 0:w]
    flows_fwd = velocities[surfaces[:-1]]
    flows_bwd = -velocities[surfaces[1:]]
    occlusions = np.empty((spec.num_frames - 1, h, w), dtype=bool)
    for k in range(1, spec.num_frames):
        sx = np.rint(gx + flows_bwd[k - 1, ..., 0]).astype(np.int64)
        sy = np.rint(gy + flows_bwd[k - 1, ..., 1]).astype(np.int64)
        inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
        source = surfaces[k - 1][np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)]
        occlusions[k - 1] = ~inside | (source != surfaces[k])

    clip = VideoClip(
        frames=frames,
        labels=labels,
        flows_fwd=np.ascontiguousarray(flows_fwd, dtype=np.float32),
        flows_bwd=np.ascontiguousarray(flows_bwd + 0.0, dtype=np.float32),
        occlusion_masks=occlusions,
        domain=spec.domain,
        num_classes=spec.num_classes,
        name=f"{spec.domain}_{spec.seed:06d}",
        spec=spec,
    )
    return apply_domain_shift(clip, spec.shift_params)


def _texture_pattern(texture: TextureId, height: int, width: int) -> np.ndarray:
    gy, gx = np.mgrid[0:height, 0:width].astype(np.float64)
    if texture is TextureId.STRIPES:
        return np.sin(0.8 * gx + 0.3 * gy)
    if texture is TextureId.CHECKER:
        return np.where(((gx // 4) + (gy // 4)) % 2 == 0, 1.0, -1.0)
    if texture is TextureId.GRAIN:
        return np.random.default_rng(12345).uniform(-1.0, 1.0, size=(height, width))
    return np.zeros((height, width))


def apply_domain_shift(clip: VideoClip, shift: DomainShift) -> VideoClip:
    """Alter frame appearance only; labels, flows and masks are shared unchanged.

    Steps, each skipped when it is the identity: background texture
    modulation, hue rotation, brightness gain, additive noise. Frames are
    clamped to [0, 1].
    """
    if shift.is_identity:
        return replace(clip, frames=clip.frames.copy())
    frames = clip.frames.astype(np.float64)
    if shift.texture_id is not TextureId.NONE:
        pattern = _texture_pattern(shift.texture_id, clip.height, clip.width)
        gain = np.where(clip.labels == 0, 1.0 + 0.2 * pattern[None], 1.0)
        frames = frames * gain[..., None]
    if shift.hue_shift != 0.0:
        hsv = rgb_to_hsv(np.clip(frames, 0.0, 1.0))
        hsv[..., 0] = np.mod(hsv[..., 0] + shift.hue_shift, 1.0)
        frames = hsv_to_rgb(hsv)
    if shift.brightness_gain != 1.0:
        frames = frames * shift.brightness_gain
    if shift.noise_std > 0.0:
        rng = np.random.default_rng(shift.seed)
        frames = frames + rng.normal(0.0, shift.noise_std, size=frames.shape)
    return replace(clip, frames=np.clip(frames, 0.0, 1.0).astype(np.float32))


def label_warp_agreement(clip: VideoClip, k: int) -> float:
    """Fraction of non-occluded pixels where warping labels k-1 reproduces labels k."""
    warped, valid = warp_labels(clip.labels[k - 1], clip.backward_flow(k))
    keep = valid & ~clip.occlusion(k)
    if not keep.any():
        return 1.0
    return float((warped[keep] == clip.labels[k][keep]).mean())


def random_clip_spec(
    seed: int,
    *,
    height: int = 64,
    width: int = 128,
    num_frames: int = 6,
    num_classes: int = 5,
    num_objects: int = 4,
    max_speed: float = 3.0,
    shift: DomainShift = SOURCE_SHIFT,
    domain: str = "source",
) -> ClipSpec:
    """Draw a clip spec from ``seed``.

    Class ``c`` is drawn as an ellipse when odd and a rectangle when even,
    with its palette colour plus a small jitter, so classes stay
    identifiable by shape and colour.
    """
    rng = np.random.default_rng([seed, 7])
    speed = int(np.floor(max_speed))
    objects = []
    for _ in range(num_objects):
        class_id = int(rng.integers(1, num_classes))
        base = np.asarray(CLASS_COLORS[(class_id - 1) % len(CLASS_COLORS)])
        color = np.clip(base + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        rx = float(rng.uniform(0.06, 0.16) * width)
        ry = float(rng.uniform(0.10, 0.25) * height)
        objects.append(
            ObjectSpec(
                class_id=class_id,
                shape="ellipse" if class_id % 2 == 1 else "rect",
                center=(float(rng.uniform(0, width)), float(rng.uniform(0, height))),
                radii=(rx, ry),
                velocity=(
                    float(rng.integers(-speed, speed + 1)),
                    float(rng.integers(-speed, speed + 1)),
                ),
                color=tuple(float(c) for c in color),
                texture_phase=float(rng.uniform(0, 2 * np.pi)),
            )
        )
    return ClipSpec(
        height=height,
        width=width,
        num_frames=num_frames,
        num_classes=num_classes,
        objects=tuple(objects),
        shift_params=replace(shift, seed=seed),
        seed=seed,
        domain=domain,
    ).validate()


def generate_dataset(
    domain: str,
    count: int,
    first_seed: int,
    *,
    shift: DomainShift | None = None,
    **spec_kwargs: Any,
) -> list[VideoClip]:
    """Generate ``count`` clips using seeds ``first_seed .. first_seed + count - 1``."""
    if shift is None:
        shift = TARGET_SHIFT if domain == "target" else SOURCE_SHIFT
    return [
        generate_clip(
            random_clip_spec(first_seed + i, shift=shift, domain=domain, **spec_kwargs)
        )
        for i in range(count)
    ]


################################################################@##########
# Dataset IO
################################################################@##########
@dataclass(frozen=True)
class ManifestEntry:
    name: str
    directory: str
    domain: str
    seed: int | None = None
    shift: dict[str, Any] | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Contents of ``manifest.json``."""

    path: Path
    clips: tuple[ManifestEntry, ...]
    format_version: int = FORMAT_VERSION
    generation: dict[str, Any] = field(default_factory=dict)


# name -> (file, on-disk dtype)
_ARRAYS: dict[str, tuple[str, str]] = {
    "frames": ("frames.bin", "<f4"),
    "labels": ("labels.bin", "u1"),
    "flows_fwd": ("flow_fwd.bin", "<f4"),
    "flows_bwd": ("flow_bwd.bin", "<f4"),
    "occlusion_masks": ("occ.bin", "u1"),
}
_FLOW_TAGS = {"flows_fwd": FlowDirection.FORWARD, "flows_bwd": FlowDirection.BACKWARD}


def _dump_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def _write_clip(clip: VideoClip, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    header: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "name": clip.name,
        "domain": clip.domain,
        "T": clip.num_frames,
        "H": clip.height,
        "W": clip.width,
        "C": clip.num_classes,
        "arrays": {},
        "spec": spec_to_dict(clip.spec) if clip.spec is not None else None,
    }
    for name, (filename, dtype) in _ARRAYS.items():
        array = np.ascontiguousarray(getattr(clip, name).astype(dtype))
        payload = array.tobytes(order="C")
        if name in _FLOW_TAGS:
            payload = bytes([int(_FLOW_TAGS[name])]) + payload
        (directory / filename).write_bytes(payload)
        header["arrays"][name] = {"file": filename, "dtype": dtype, "shape": list(array.shape)}
    (directory / HEADER_NAME).write_text(_dump_json(header), encoding="utf-8")


def _manifest_entry(index: int, clip: VideoClip) -> ManifestEntry:
    seed = shift = None
    if clip.spec is not None:
        seed = clip.spec.seed
        shift = spec_to_dict(clip.spec)["shift_params"]
    return ManifestEntry(
        name=clip.name or f"clip_{index:05d}",
        directory=f"clip_{index:05d}",
        domain=clip.domain,
        seed=seed,
        shift=shift,
    )


def write_dataset(
    clips: Sequence[VideoClip],
    path: str | Path,
    *,
    workers: int = 1,
    generation: dict[str, Any] | None = None,
) -> DatasetManifest:
    """Write clips under ``path`` and finish with ``manifest.json``.

    Clip directories are independent and may be written by ``workers``
    threads; the manifest is written last by the caller's thread. Besides the
    format version and one entry per clip (with its seed and domain shift),
    the manifest echoes ``generation``, the settings the clips were drawn with.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = tuple(_manifest_entry(i, clip) for i, clip in enumerate(clips))
    jobs = [(clip, path / entry.directory) for clip, entry in zip(clips, entries)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda job: _write_clip(*job), jobs))
    else:
        for job in jobs:
            _write_clip(*job)
    generation = dict(generation or {})
    manifest = {
        "format_version": FORMAT_VERSION,
        "generation": generation,
        "clips": [asdict(entry) for entry in entries],
    }
    (path / MANIFEST_NAME).write_text(_dump_json(manifest), encoding="utf-8")
    log.info("wrote %d clips to %s", len(entries), path)
    return DatasetManifest(path=path, clips=entries, generation=generation)


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
        version = int(data["format_version"])
        entries = tuple(ManifestEntry(**entry) for entry in data["clips"])
        generation = dict(data.get("generation") or {})
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt manifest {manifest_path}: {exc}") from exc
    if version != FORMAT_VERSION:
        raise DatasetError(
            f"manifest {manifest_path} has format version {version}, expected {FORMAT_VERSION}"
        )
    return DatasetManifest(path=path, clips=entries, format_version=version, generation=generation)


def _read_array(entry: ManifestEntry, directory: Path, name: str, meta: dict[str, Any]) -> np.ndarray:
    file_path = directory / meta["file"]
    if not file_path.is_file():
        raise DatasetError(f"clip {entry.name}: missing file {file_path}")
    payload = file_path.read_bytes()
    if name in _FLOW_TAGS:
        if not payload or payload[0] != int(_FLOW_TAGS[name]):
            raise DatasetError(f"clip {entry.name}: bad direction tag in {file_path}")
        payload = payload[1:]
    dtype = np.dtype(meta["dtype"])
    shape = tuple(int(n) for n in meta["shape"])
    if len(payload) != dtype.itemsize * int(np.prod(shape)):
        raise DatasetError(f"clip {entry.name}: corrupt file {file_path} (size mismatch)")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def _read_clip(entry: ManifestEntry, directory: Path) -> VideoClip:
    header_path = directory / HEADER_NAME
    if not header_path.is_file():
        raise DatasetError(f"clip {entry.name}: missing file {header_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        arrays = {
            name: _read_array(entry, directory, name, header["arrays"][name]) for name in _ARRAYS
        }
        spec = spec_from_dict(header["spec"]) if header.get("spec") else None
        return VideoClip(
            frames=arrays["frames"].astype(np.float32),
            labels=arrays["labels"].astype(np.uint8),
            flows_fwd=arrays["flows_fwd"].astype(np.float32),
            flows_bwd=arrays["flows_bwd"].astype(np.float32),
            occlusion_masks=arrays["occlusion_masks"].astype(bool),
            domain=header["domain"],
            num_classes=int(header["C"]),
            name=header.get("name", entry.name),
            spec=spec,
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"clip {entry.name}: corrupt header {header_path}: {exc!r}") from exc


def load_dataset(path: str | Path, limit: int | None = None) -> list[VideoClip]:
    """Load the clips listed in ``path/manifest.json``.

    Raises:
        DatasetError: naming the manifest or the clip file that is missing
            or corrupt.
    """
    manifest = read_manifest(path)
    entries: Iterable[ManifestEntry] = manifest.clips
    if limit:
        entries = manifest.clips[:limit]
    clips = [_read_clip(entry, manifest.path / entry.directory) for entry in entries]
    log.debug("loaded %d clips from %s", len(clips), manifest.path)
    return clips
