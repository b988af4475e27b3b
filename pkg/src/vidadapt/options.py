"""Run configuration: user-facing option keys, defaults, merging and file IO."""

from __future__ import annotations

import json
import math
import tomllib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Literal, TypedDict, cast

from .errors import ConfigError

MODES: tuple[str, ...] = ("source_only", "sa", "sta", "jt", "ctcr", "itcr", "davsn")
FLOW_SOURCES: tuple[str, ...] = ("oracle", "estimated")
GENERATOR_FORMS: tuple[str, ...] = ("non_saturating", "saturating")
ACTIVATIONS: tuple[str, ...] = ("relu", "elu")

CONFIG_FILENAME = "config.toml"


class RunOptions(TypedDict, total=False):
    """Option keys users can set in a config file or with ``--set``.

    All fields are optional - anything left out keeps its default.
    """

    mode: Literal["source_only", "sa", "sta", "jt", "ctcr", "itcr", "davsn"]
    """Ablation mode; selects which loss terms are active."""

    lambda_sa: float
    """Weight of the spatial adversarial term inside the C-TCR loss."""

    lambda_wd: float
    """Weight of the discriminator weight-discrepancy term."""

    lambda_u: float
    """Weight of the unsupervised (C-TCR and I-TCR) terms in the joint objective."""

    lr0: float
    """Initial generator learning rate."""

    total_steps: int
    """Number of training steps."""

    poly_power: float
    """Exponent of the polynomial learning-rate decay."""

    momentum: float
    """SGD momentum of the generator optimizer."""

    weight_decay: float
    """Generator weight decay (never applied to biases)."""

    disc_lr0: float
    """Initial discriminator learning rate."""

    disc_momentum: float
    """SGD momentum of the discriminator optimizer."""

    disc_weight_decay: float
    """Discriminator weight decay (never applied to biases)."""

    source_batch: int
    """Source clip triples per step."""

    target_batch: int
    """Target clip triples per step."""

    seed: int
    """Seed for parameter initialization and batch sampling."""

    flow_source: Literal["oracle", "estimated"]
    """Use the generator's exact flow or the block-matching estimate."""

    frame_gap: int
    """Frame gap between the current and previous frame of a pair."""

    generator_form: Literal["non_saturating", "saturating"]
    """Generator-side surrogate of the adversarial terms."""

    num_classes: int
    """Number of classes, background included."""

    base_channels: int
    """Width of the first segmentation branch level."""

    num_down_levels: int
    """Downsampling levels in each segmentation branch."""

    share_branches: bool
    """Whether the current-frame and previous-frame branches share weights."""

    activation: Literal["relu", "elu"]
    """Nonlinearity inside the segmentation branches."""

    disc_base_channels: int
    """Channels of the first discriminator layer (doubled per layer)."""

    disc_layers: int
    """Convolutional layers per discriminator, classifier included."""

    disc_slope: float
    """Negative slope of the discriminator leaky ReLUs."""

    disc_patch_output: bool
    """Score every patch instead of pooling to one score."""

    occlusion_threshold: float
    """Forward-backward round-trip distance (pixels) above which a pixel is occluded."""

    block_patch: int
    """Block-matching patch size (odd)."""

    block_radius: int
    """Block-matching search radius in pixels."""

    eval_every: int
    """Steps between evaluations (0 disables periodic evaluation)."""

    checkpoint_every: int
    """Steps between checkpoints (0 keeps only the final checkpoint)."""

    eval_clips: int
    """Maximum held-out target clips per evaluation (0 = all)."""

    feature_stride: int
    """Spatial subsampling stride for the feature-variance analysis."""

    threads: int
    """Torch intra-op thread count (fixed for reproducibility)."""

    source_dataset: str
    """Directory of the labelled source dataset."""

    target_dataset: str
    """Directory of the unlabelled target training dataset."""

    eval_dataset: str
    """Directory of the held-out target dataset used for evaluation."""

    output_dir: str
    """Directory receiving checkpoints, metrics and the config echo."""

    resume: str
    """Checkpoint to resume training from (empty = fresh run)."""

    height: int
    """Generated frame height."""

    width: int
    """Generated frame width."""

    num_frames: int
    """Frames per generated clip."""

    num_objects: int
    """Moving objects per generated clip."""

    max_speed: float
    """Largest per-axis object speed in pixels per frame."""

    num_source_clips: int
    """Source clips written by ``gen``."""

    num_target_clips: int
    """Target training clips written by ``gen``."""

    num_eval_clips: int
    """Held-out target clips written by ``gen``."""

    source_seed: int
    """First seed of the source seed range."""

    target_seed: int
    """First seed of the target training seed range."""

    eval_seed: int
    """First seed of the held-out target seed range."""


@dataclass
class RunConfig:
    """Fully resolved run configuration. Defaults follow the published settings."""

    mode: str = "davsn"
    lambda_sa: float = 1.0
    lambda_wd: float = 1.0
    lambda_u: float = 0.001
    lr0: float = 1e-4
    total_steps: int = 3000
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    disc_lr0: float = 1e-4
    disc_momentum: float = 0.9
    disc_weight_decay: float = 1e-4
    source_batch: int = 1
    target_batch: int = 1
    seed: int = 0
    flow_source: str = "oracle"
    frame_gap: int = 1
    generator_form: str = "non_saturating"
    num_classes: int = 5
    base_channels: int = 16
    num_down_levels: int = 2
    share_branches: bool = True
    activation: str = "relu"
    disc_base_channels: int = 16
    disc_layers: int = 4
    disc_slope: float = 0.2
    disc_patch_output: bool = False
    occlusion_threshold: float = 1.0
    block_patch: int = 5
    block_radius: int = 3
    eval_every: int = 500
    checkpoint_every: int = 1000
    eval_clips: int = 0
    feature_stride: int = 4
    threads: int = 1
    source_dataset: str = "data/source"
    target_dataset: str = "data/target"
    eval_dataset: str = "data/target_eval"
    output_dir: str = "runs/default"
    resume: str = ""
    height: int = 64
    width: int = 128
    num_frames: int = 6
    num_objects: int = 4
    max_speed: float = 3.0
    num_source_clips: int = 200
    num_target_clips: int = 200
    num_eval_clips: int = 50
    source_seed: int = 0
    target_seed: int = 100_000
    eval_seed: int = 200_000

    def validate(self) -> "RunConfig":
        """Check value ranges; raise ConfigError naming the first bad key."""
        _check_choice("mode", self.mode, MODES)
        _check_choice("flow_source", self.flow_source, FLOW_SOURCES)
        _check_choice("generator_form", self.generator_form, GENERATOR_FORMS)
        _check_choice("activation", self.activation, ACTIVATIONS)
        for key in ("lambda_sa", "lambda_wd", "lambda_u", "weight_decay",
                    "disc_weight_decay", "momentum", "disc_momentum",
                    "lr0", "disc_lr0", "poly_power", "max_speed"):
            value = getattr(self, key)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{key} must be a finite non-negative number, got {value!r}")
        if self.occlusion_threshold <= 0:
            raise ConfigError("occlusion_threshold must be positive")
        for key in ("total_steps", "eval_every", "checkpoint_every", "eval_clips"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        for key in ("source_batch", "target_batch", "frame_gap", "base_channels",
                    "num_down_levels", "disc_base_channels", "feature_stride",
                    "threads", "block_patch", "num_frames"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.disc_layers < 2:
            raise ConfigError("disc_layers must be >= 2")
        if self.block_patch % 2 == 0:
            raise ConfigError("block_patch must be odd")
        if self.block_radius < 0:
            raise ConfigError("block_radius must be >= 0")
        if self.num_frames < 2 * self.frame_gap + 1:
            raise ConfigError("num_frames must be >= 2 * frame_gap + 1")
        ranges = [
            ("source_seed", self.source_seed, self.num_source_clips),
            ("target_seed", self.target_seed, self.num_target_clips),
            ("eval_seed", self.eval_seed, self.num_eval_clips),
        ]
        for i, (name_a, start_a, count_a) in enumerate(ranges):
            for name_b, start_b, count_b in ranges[i + 1 :]:
                if start_a < start_b + count_b and start_b < start_a + count_a:
                    raise ConfigError(f"seed ranges of {name_a} and {name_b} overlap")
        return self


def _check_choice(key: str, value: str, choices: tuple[str, ...]) -> None:
    if value not in choices:
        raise ConfigError(f"{key} must be one of {', '.join(choices)}; got {value!r}")


_FIELD_TYPES: dict[str, type] = {
    f.name: cast(type, {"float": float, "int": int, "bool": bool, "str": str}[str(f.type)])
    for f in fields(RunConfig)
}


def _coerce(key: str, value: Any) -> Any:
    expected = _FIELD_TYPES[key]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is not bool and isinstance(value, bool):
        raise ConfigError(f"{key} expects {expected.__name__}, got a boolean")
    if not isinstance(value, expected):
        raise ConfigError(
            f"{key} expects {expected.__name__}, got {type(value).__name__} {value!r}"
        )
    return value


def merge_options(
    *overrides: RunOptions | dict[str, Any] | None,
    base: RunConfig | None = None,
) -> RunConfig:
    """Overlay option dicts on the defaults (later dicts win) and validate.

    Raises:
        ConfigError: on an unknown key, a wrongly typed value, or a value
            outside its range.
    """
    merged = asdict(base or RunConfig())
    for user in overrides:
        if not user:
            continue
        for key, value in cast(dict[str, Any], user).items():
            if key not in merged:
                raise ConfigError(f"unknown config key: {key!r}")
            merged[key] = _coerce(key, value)
    return RunConfig(**merged).validate()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse flat ``key = value`` text into a dict (no tables allowed)."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{source}: nested table {key!r} is not allowed")
    return data


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a config file into an option dict."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def parse_set_flags(flags: list[str] | None) -> dict[str, Any]:
    """Turn ``key=value`` flags into an option dict.

    Values are read as TOML scalars; anything that does not parse is kept as a
    bare string, so ``--set mode=davsn`` needs no quoting.
    """
    result: dict[str, Any] = {}
    for flag in flags or []:
        key, sep, raw = flag.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {flag!r}")
        raw = raw.strip()
        try:
            result[key] = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            result[key] = raw
    return result


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return json.dumps(value)


def dump_config(config: RunConfig) -> str:
    """Serialize a config as flat ``key = value`` text, one key per line."""
    return "".join(
        f"{key} = {_format_value(value)}\n" for key, value in asdict(config).items()
    )


def write_config_echo(config: RunConfig, directory: str | Path) -> Path:
    """Write the resolved config into ``directory/config.toml``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_FILENAME
    path.write_text(dump_config(config), encoding="utf-8")
    return path
