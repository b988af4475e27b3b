"""Alternating min-max training over source and target clip triples.

Each step draws one triple of frames ``(k - 2l, k - l, k)`` per sample from
each domain, predicts frames ``k - l`` and ``k``, updates the two
discriminators on detached predictions, then updates the segmentation model
with the discriminators frozen.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from torch import nn

from .checkpoint import load_state_arrays, pack_tree, state_arrays, unpack_tree
from .discriminators import Discriminator, build_discriminators, stack_pair
from .errors import CheckpointError, ConfigError, NumericalError
from .evalkit import EvalResult, evaluate_clips
from .flowwarp import FlowField, FlowSource, ValidityMask, backward_warp, make_flow_source
from .logs import get_logger
from .losses import (
    LossBundle,
    ObjectiveParts,
    assemble_objective,
    generator_adversarial,
    loss_ctcr,
    loss_itcr,
    loss_sa,
    loss_ssl,
    loss_sta,
    loss_wd,
)
from .options import RunConfig, write_config_echo
from .segnet import (
    SegModel,
    SegModelConfig,
    frames_to_tensor,
    init_params,
    load_checkpoint_full,
    save_checkpoint,
)
from .synthdata import VideoClip, load_dataset

log = get_logger(__name__)

ALL_TERMS = frozenset({"ssl", "sa", "sta", "wd", "itcr"})
ADVERSARIAL_TERMS = frozenset({"sa", "sta", "wd"})

MODE_TERMS: dict[str, frozenset[str]] = {
    "source_only": frozenset({"ssl"}),
    "sa": frozenset({"ssl", "sa"}),
    "sta": frozenset({"ssl", "sta"}),
    "jt": frozenset({"ssl", "sa", "sta"}),
    "ctcr": frozenset({"ssl", "sa", "sta", "wd"}),
    "itcr": frozenset({"ssl", "itcr"}),
    "davsn": ALL_TERMS,
}

METRICS_FILENAME = "metrics.jsonl"
FINAL_CHECKPOINT = "final.vdck"
TRAINER_CHECKPOINT_KIND = "trainer"


def active_terms(mode: str, lambda_u: float) -> frozenset[str]:
    """Loss terms a mode trains with. ``lambda_u == 0`` leaves only supervision."""
    try:
        terms = MODE_TERMS[mode]
    except KeyError:
        raise ConfigError(f"unknown mode {mode!r}") from None
    return MODE_TERMS["source_only"] if lambda_u == 0 else terms


def poly_lr(step: int, lr0: float, total_steps: int, power: float = 0.9) -> float:
    """Polynomial decay ``lr0 * (1 - step / total_steps) ** power``.

    The schedule reaches 0 at ``step == total_steps``, including an empty
    schedule where that endpoint is step 0.

    Raises:
        ValueError: if ``step`` lies outside ``[0, total_steps]``.
    """
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return lr0 * (1.0 - step / total_steps) ** power


@dataclass(frozen=True)
class TrainConfig:
    """The training-relevant slice of a RunConfig."""

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
    model: SegModelConfig = field(default_factory=lambda: SegModelConfig(num_classes=5))
    disc_layers: int = 4
    disc_base_channels: int = 16
    disc_slope: float = 0.2
    disc_patch_output: bool = False
    occlusion_threshold: float = 1.0
    block_patch: int = 5
    block_radius: int = 3

    @classmethod
    def from_run_config(cls, run: RunConfig) -> "TrainConfig":
        values = asdict(run)
        names = {f for f in cls.__dataclass_fields__ if f != "model"}
        model = SegModelConfig(
            num_classes=run.num_classes,
            base_channels=run.base_channels,
            num_down_levels=run.num_down_levels,
            share_branches=run.share_branches,
            activation=run.activation,
        )
        return cls(model=model, **{name: values[name] for name in names})

    @property
    def terms(self) -> frozenset[str]:
        return active_terms(self.mode, self.lambda_u)

    def make_flow_source(self) -> FlowSource:
        return make_flow_source(
            self.flow_source,
            patch_size=self.block_patch,
            search_radius=self.block_radius,
            threshold=self.occlusion_threshold,
        )


@dataclass
class TripleBatch:
    """Frame triples ``(k - 2l, k - l, k)`` with the flows linking them.

    Attributes:
        frames (torch.Tensor):
            ``(N, 3, 3, H, W)``; the second axis runs over the triple.
        flow_prev (FlowField):
            BACKWARD ``(N, H, W, 2)`` from ``k - l`` to ``k - 2l``.
        flow_curr (FlowField):
            BACKWARD ``(N, H, W, 2)`` from ``k`` to ``k - l``.
        valid_curr (ValidityMask):
            ``(N, H, W)`` non-occluded, in-frame pixels of the ``k - l -> k`` pair.
        labels (torch.Tensor | None):
            ``(N, H, W)`` labels of frame ``k``; None for unlabelled batches.
    """

    frames: torch.Tensor
    flow_prev: FlowField
    flow_curr: FlowField
    valid_curr: ValidityMask
    labels: torch.Tensor | None = None

    @property
    def size(self) -> int:
        return int(self.frames.shape[0])


def make_triple_batch(
    clips: Sequence[VideoClip],
    picks: Iterable[tuple[int, int]],
    flow_source: FlowSource,
    gap: int = 1,
    *,
    with_labels: bool = True,
) -> TripleBatch:
    """Assemble a TripleBatch from ``(clip index, k)`` picks."""
    frames, prev, curr, valid, labels = [], [], [], [], []
    for index, k in picks:
        clip = clips[index]
        frames.append(frames_to_tensor(clip.frames[[k - 2 * gap, k - gap, k]]))
        flow_p, _ = flow_source.pair(clip, k - gap, gap)
        flow_c, valid_c = flow_source.pair(clip, k, gap)
        prev.append(flow_p.data)
        curr.append(flow_c.data)
        valid.append(valid_c.data)
        if with_labels:
            labels.append(torch.from_numpy(clip.labels[k].astype(np.int64)))
    return TripleBatch(
        frames=torch.stack(frames),
        flow_prev=FlowField(torch.stack(prev), flow_p.direction),
        flow_curr=FlowField(torch.stack(curr), flow_c.direction),
        valid_curr=ValidityMask(torch.stack(valid)),
        labels=torch.stack(labels) if with_labels else None,
    )


class ClipSampler:
    """Seeded draws of ``(clip index, k)`` with ``k`` in ``[2 * gap, T)``."""

    def __init__(self, lengths: Sequence[int], gap: int, seed: int | np.random.SeedSequence) -> None:
        self.lengths = list(lengths)
        self.gap = gap
        short = [i for i, t in enumerate(self.lengths) if t < 2 * gap + 1]
        if not self.lengths or short:
            raise ConfigError(f"every clip needs at least {2 * gap + 1} frames for frame gap {gap}")
        self._rng = np.random.default_rng(seed)

    def draw(self, count: int) -> list[tuple[int, int]]:
        picks = []
        for _ in range(count):
            index = int(self._rng.integers(len(self.lengths)))
            k = int(self._rng.integers(2 * self.gap, self.lengths[index]))
            picks.append((index, k))
        return picks

    def get_state(self) -> dict[str, Any]:
        return self._rng.bit_generator.state

    def set_state(self, state: dict[str, Any]) -> None:
        self._rng.bit_generator.state = state


def _param_groups(modules: Iterable[nn.Module], weight_decay: float) -> list[dict[str, Any]]:
    decay, no_decay = [], []
    for module in modules:
        for param in module.parameters():
            (decay if param.dim() > 1 else no_decay).append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(value).all()):
        raise NumericalError(name, f"loss term {name} is not finite")
    return value


def _item(value: torch.Tensor | None) -> float | None:
    return None if value is None else float(value.detach())


@dataclass
class TrainState:
    """Everything a run needs to continue bit-exactly."""

    model: SegModel
    d_s: Discriminator
    d_st: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    source_sampler: ClipSampler
    target_sampler: ClipSampler
    step: int = 0


@dataclass
class _Predictions:
    src_k: torch.Tensor
    src_km1: torch.Tensor | None = None
    tgt_k: torch.Tensor | None = None
    tgt_km1: torch.Tensor | None = None


class Trainer:
    """Owns a TrainState and runs the two-phase update."""

    def __init__(
        self,
        config: TrainConfig,
        source_lengths: Sequence[int],
        target_lengths: Sequence[int],
    ) -> None:
        """Initialize the Trainer with freshly initialized networks.

        Args:
            config (TrainConfig):
                Training settings.
            source_lengths (Sequence[int]):
                Frame counts of the source clips, for the sampler.
            target_lengths (Sequence[int]):
                Frame counts of the target clips, for the sampler.
        """
        self.config = config
        self.terms = config.terms
        model = init_params(config.model, config.seed)
        d_s, d_st = build_discriminators(
            config.model.num_classes,
            num_layers=config.disc_layers,
            base_channels=config.disc_base_channels,
            slope=config.disc_slope,
            patch_output=config.disc_patch_output,
            seed=config.seed + 1,
        )
        opt_g = torch.optim.SGD(
            _param_groups([model], config.weight_decay),
            lr=config.lr0,
            momentum=config.momentum,
        )
        opt_d = torch.optim.SGD(
            _param_groups([d_s, d_st], config.disc_weight_decay),
            lr=config.disc_lr0,
            momentum=config.disc_momentum,
        )
        source_seq, target_seq = np.random.SeedSequence(config.seed).spawn(2)
        self.state = TrainState(
            model=model,
            d_s=d_s,
            d_st=d_st,
            opt_g=opt_g,
            opt_d=opt_d,
            source_sampler=ClipSampler(source_lengths, config.frame_gap, source_seq),
            target_sampler=ClipSampler(target_lengths, config.frame_gap, target_seq),
        )

    @property
    def model(self) -> SegModel:
        return self.state.model

    def _discriminators(self) -> list[Discriminator]:
        return [self.state.d_s, self.state.d_st]

    def sample(
        self,
        source: Sequence[VideoClip],
        target: Sequence[VideoClip],
        flow_source: FlowSource,
    ) -> tuple[TripleBatch, TripleBatch]:
        gap = self.config.frame_gap
        src = make_triple_batch(
            source, self.state.source_sampler.draw(self.config.source_batch), flow_source, gap
        )
        tgt = make_triple_batch(
            target,
            self.state.target_sampler.draw(self.config.target_batch),
            flow_source,
            gap,
            with_labels=False,
        )
        return src, tgt

    def _predict(self, source: TripleBatch, target: TripleBatch) -> _Predictions:
        model = self.state.model
        terms = self.terms

        def pair(batch: TripleBatch, later: int) -> torch.Tensor:
            flow = batch.flow_curr if later == 2 else batch.flow_prev
            probs, _ = model.forward_pair(batch.frames[:, later], batch.frames[:, later - 1], flow)
            return probs

        preds = _Predictions(src_k=pair(source, 2))
        if "sta" in terms:
            preds.src_km1 = pair(source, 1)
        if terms & {"sa", "sta", "itcr"}:
            preds.tgt_k = pair(target, 2)
        if terms & {"sta", "itcr"}:
            preds.tgt_km1 = pair(target, 1)
        return preds

    def discriminator_phase(self, preds: _Predictions) -> dict[str, torch.Tensor]:
        """Update D_s and D_st on detached predictions.

        Returns the adversarial and discrepancy terms (before the update) and
        the discriminator loss; empty when the mode trains no discriminator.
        """
        terms = self.terms
        if not terms & ADVERSARIAL_TERMS:
            return {}
        cfg = self.config
        d_s, d_st = self.state.d_s, self.state.d_st
        self.state.opt_d.zero_grad(set_to_none=True)
        parts: dict[str, torch.Tensor] = {}
        if "sa" in terms:
            parts["sa"] = _finite(
                "sa", loss_sa(d_s(preds.src_k.detach()), d_s(preds.tgt_k.detach()))
            )
        if "sta" in terms:
            src_stack = stack_pair(preds.src_km1.detach(), preds.src_k.detach())
            tgt_stack = stack_pair(preds.tgt_km1.detach(), preds.tgt_k.detach())
            parts["sta"] = _finite("sta", loss_sta(d_st(src_stack), d_st(tgt_stack)))
        if "wd" in terms:
            parts["wd"] = _finite("wd", loss_wd(d_st, d_s))
        objective = ObjectiveParts(ssl=torch.zeros(()), **parts)
        _, disc_loss = assemble_objective(objective, cfg.lambda_u, cfg.lambda_sa, cfg.lambda_wd)
        parts["disc"] = _finite("disc", disc_loss)
        disc_loss.backward()
        self.state.opt_d.step()
        return parts

    def generator_phase(
        self, preds: _Predictions, source: TripleBatch, target: TripleBatch
    ) -> dict[str, torch.Tensor]:
        """Update the segmentation model with both discriminators frozen."""
        terms = self.terms
        cfg = self.config
        d_s, d_st = self.state.d_s, self.state.d_st
        self.state.opt_g.zero_grad(set_to_none=True)
        frozen = [p for d in self._discriminators() for p in d.parameters()]
        for param in frozen:
            param.requires_grad_(False)
        try:
            parts: dict[str, torch.Tensor] = {"ssl": _finite("ssl", loss_ssl(preds.src_k, source.labels))}
            if "sa" in terms:
                parts["sa_gen"] = _finite(
                    "sa", generator_adversarial(d_s(preds.tgt_k), cfg.generator_form)
                )
            if "sta" in terms:
                stacked = stack_pair(preds.tgt_km1, preds.tgt_k)
                parts["sta_gen"] = _finite(
                    "sta", generator_adversarial(d_st(stacked), cfg.generator_form)
                )
            gate = None
            if "itcr" in terms:
                propagated, inside = backward_warp(preds.tgt_km1, target.flow_curr)
                itcr, gate = loss_itcr(preds.tgt_k, propagated, target.valid_curr & inside)
                parts["itcr"] = _finite("itcr", itcr)
            gen_loss, _ = assemble_objective(
                ObjectiveParts(**parts), cfg.lambda_u, cfg.lambda_sa, cfg.lambda_wd
            )
            parts["total"] = _finite("total", gen_loss)
            if gate is not None:
                parts["gate_fraction"] = gate
            gen_loss.backward()
            self.state.opt_g.step()
        finally:
            for param in frozen:
                param.requires_grad_(True)
        return parts

    def train_step(self, source: TripleBatch, target: TripleBatch) -> LossBundle:
        """One discriminator update followed by one generator update."""
        cfg = self.config
        # Steps past the schedule run at the final rate of zero.
        step = min(self.state.step, cfg.total_steps)
        _set_lr(self.state.opt_g, poly_lr(step, cfg.lr0, cfg.total_steps, cfg.poly_power))
        _set_lr(self.state.opt_d, poly_lr(step, cfg.disc_lr0, cfg.total_steps, cfg.poly_power))
        preds = self._predict(source, target)
        disc = self.discriminator_phase(preds)
        gen = self.generator_phase(preds, source, target)
        self.state.step += 1
        sa, sta, wd = (_item(disc.get(name)) for name in ("sa", "sta", "wd"))
        ctcr = None
        if disc:
            ctcr = loss_ctcr(sa or 0.0, sta or 0.0, wd or 0.0, cfg.lambda_sa, cfg.lambda_wd)
        return LossBundle(
            ssl=_item(gen["ssl"]),
            sa=sa,
            sta=sta,
            wd=wd,
            ctcr=ctcr,
            itcr=_item(gen.get("itcr")),
            total=_item(gen["total"]),
            disc=_item(disc.get("disc")),
            gate_fraction=_item(gen.get("gate_fraction")),
        ).check_finite()

    def save(self, path: str | Path) -> Path:
        """Write a resumable checkpoint (model, discriminators, optimizers, samplers)."""
        state = self.state
        arrays = state_arrays(state.d_s, "d_s")
        arrays.update(state_arrays(state.d_st, "d_st"))
        extra = {
            "kind": TRAINER_CHECKPOINT_KIND,
            "step": state.step,
            "train_config": asdict(self.config),
            "disc_optimizer": pack_tree(state.opt_d.state_dict(), "disc_optimizer", arrays),
            "source_sampler": state.source_sampler.get_state(),
            "target_sampler": state.target_sampler.get_state(),
        }
        return save_checkpoint(path, state.model, state.opt_g.state_dict(), extra, arrays)

    def restore(self, path: str | Path) -> None:
        """Load a checkpoint written by save into this trainer.

        Raises:
            CheckpointError: if the file is not a trainer checkpoint or its
                architecture differs from this trainer's.
        """
        model, opt_state, extra, arrays = load_checkpoint_full(path)
        if extra.get("kind") != TRAINER_CHECKPOINT_KIND:
            raise CheckpointError(f"{path} holds a model only and cannot resume training")
        if model.config != self.config.model:
            raise CheckpointError(f"{path} was written for a different model configuration")
        try:
            disc_opt_state = unpack_tree(extra["disc_optimizer"], arrays)
            samplers = extra["source_sampler"], extra["target_sampler"]
            step = int(extra["step"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: incomplete trainer checkpoint ({exc!r})") from exc
        state = self.state
        state.model.load_state_dict(model.state_dict())
        load_state_arrays(state.d_s, "d_s", arrays)
        load_state_arrays(state.d_st, "d_st", arrays)
        state.opt_g.load_state_dict(opt_state)
        state.opt_d.load_state_dict(disc_opt_state)
        state.source_sampler.set_state(samplers[0])
        state.target_sampler.set_state(samplers[1])
        state.step = step
        log.info("resumed from %s at step %d", path, state.step)


@dataclass
class TrainingResult:
    final_checkpoint: Path
    metrics_path: Path
    last_eval: EvalResult | None = None


def eval_steps(total_steps: int, eval_every: int) -> list[int]:
    """Steps after which the held-out set is evaluated; always includes the last."""
    steps = set(range(0, total_steps + 1, eval_every)) if eval_every > 0 else set()
    steps.add(total_steps)
    return sorted(steps)


def _dump_record(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.is_file():
        path.write_text("", encoding="utf-8")
        return
    kept = [
        line
        for line in path.read_text(encoding="utf-8").splitlines(keepends=True)
        if line.strip() and json.loads(line)["step"] <= step
    ]
    path.write_text("".join(kept), encoding="utf-8")


def run_training(
    config: RunConfig,
    *,
    source: Sequence[VideoClip] | None = None,
    target: Sequence[VideoClip] | None = None,
    eval_clips: Sequence[VideoClip] | None = None,
    console: Console | None = None,
    show_progress: bool = True,
) -> TrainingResult:
    """Train with periodic evaluation, checkpoints and a JSON-lines metrics log.

    Datasets not passed in are loaded from the paths in ``config``. The
    output directory receives ``config.toml``, ``metrics.jsonl``, periodic
    ``checkpoint_<step>.vdck`` files and ``final.vdck``.

    Raises:
        DatasetError: if a dataset is missing or corrupt.
        NumericalError: if a loss term becomes non-finite.
    """
    torch.set_num_threads(config.threads)
    output = Path(config.output_dir)
    write_config_echo(config, output)
    source = source if source is not None else load_dataset(config.source_dataset)
    target = target if target is not None else load_dataset(config.target_dataset)
    if eval_clips is None:
        eval_clips = load_dataset(config.eval_dataset, limit=config.eval_clips or None)
    elif config.eval_clips:
        eval_clips = eval_clips[: config.eval_clips]

    train_config = TrainConfig.from_run_config(config)
    if train_config.terms != MODE_TERMS[config.mode]:
        log.info("lambda_u is 0: mode %s trains as source_only", config.mode)
    flow_source = train_config.make_flow_source()
    trainer = Trainer(
        train_config,
        [clip.num_frames for clip in source],
        [clip.num_frames for clip in target],
    )
    metrics_path = output / METRICS_FILENAME
    if config.resume:
        trainer.restore(config.resume)
        _truncate_metrics(metrics_path, trainer.state.step)
    else:
        metrics_path.write_text("", encoding="utf-8")

    evals = set(eval_steps(config.total_steps, config.eval_every))
    last_eval: EvalResult | None = None

    def checkpoint_due(step: int) -> bool:
        return config.checkpoint_every > 0 and step > 0 and step % config.checkpoint_every == 0

    with (
        open(metrics_path, "a", encoding="utf-8") as metrics,
        Progress(
            TextColumn("[bold]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TimeElapsedColumn(),
            console=console,
            disable=not show_progress,
            transient=True,
        ) as progress,
    ):
        task = progress.add_task(config.mode, total=config.total_steps, completed=trainer.state.step)

        def evaluate(step: int) -> None:
            nonlocal last_eval
            last_eval = evaluate_clips(
                trainer.model,
                eval_clips,
                flow_source,
                gap=config.frame_gap,
                feature_stride=config.feature_stride,
            )
            metrics.write(_dump_record({"kind": "eval", "step": step, **last_eval.to_record()}))
            metrics.flush()
            log.info("step %d: target mIoU %.4f", step, last_eval.miou)

        if trainer.state.step == 0 and 0 in evals:
            evaluate(0)
        while trainer.state.step < config.total_steps:
            src_batch, tgt_batch = trainer.sample(source, target, flow_source)
            bundle = trainer.train_step(src_batch, tgt_batch)
            lr = trainer.state.opt_g.param_groups[0]["lr"]
            step = trainer.state.step
            metrics.write(_dump_record({"kind": "step", "step": step, "lr": lr, **bundle.as_dict()}))
            progress.advance(task)
            if step in evals:
                evaluate(step)
            if checkpoint_due(step) and step != config.total_steps:
                trainer.save(output / f"checkpoint_{step:06d}.vdck")
        metrics.flush()

    final = trainer.save(output / FINAL_CHECKPOINT)
    log.info("training finished after %d steps; checkpoint %s", trainer.state.step, final)
    return TrainingResult(final_checkpoint=final, metrics_path=metrics_path, last_eval=last_eval)
