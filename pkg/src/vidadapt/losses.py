"""Objective terms: supervised, adversarial, weight discrepancy, I-TCR, joint.

Probability maps are channels-first ``(N, C, H, W)``; label maps ``(N, H, W)``.
Adversarial terms take discriminator scores in (0, 1), clamped by
``SCORE_EPS`` inside the logarithms.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import torch
import torch.nn.functional as F

from .discriminators import Discriminator, flatten_layer_weights, shared_layer_indices
from .errors import NumericalError, ShapeError
from .flowwarp import ValidityMask

SCORE_EPS = 1e-7
PROB_EPS = 1e-12

DEFAULT_LAMBDA_SA = 1.0
DEFAULT_LAMBDA_WD = 1.0
DEFAULT_LAMBDA_U = 0.001


@dataclass
class LossBundle:
    """Scalar values recorded for one training step; inactive terms stay None."""

    ssl: float | None = None
    sa: float | None = None
    sta: float | None = None
    wd: float | None = None
    ctcr: float | None = None
    itcr: float | None = None
    total: float | None = None
    disc: float | None = None
    gate_fraction: float | None = None

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)

    def check_finite(self) -> "LossBundle":
        for name, value in asdict(self).items():
            if value is not None and not math.isfinite(value):
                raise NumericalError(name, f"loss term {name} is not finite ({value})")
        return self


def loss_ssl(
    p_k: torch.Tensor, labels: torch.Tensor, *, from_logits: bool = False
) -> torch.Tensor:
    """Mean per-pixel cross-entropy ``-log p_k[y]``.

    Args:
        p_k (torch.Tensor):
            ``(N, C, H, W)`` probabilities, or scores when ``from_logits``.
        labels (torch.Tensor):
            ``(N, H, W)`` integer labels in [0, C).

    Raises:
        ShapeError: if the grids differ or a label is out of range.
    """
    labels = labels.long()
    if p_k.shape[0] != labels.shape[0] or p_k.shape[-2:] != labels.shape[-2:]:
        raise ShapeError(f"prediction {tuple(p_k.shape)} and labels {tuple(labels.shape)} differ")
    num_classes = p_k.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ShapeError(f"labels must lie in [0, {num_classes})")
    if from_logits:
        return F.cross_entropy(p_k, labels)
    log_p = torch.log(p_k.clamp_min(PROB_EPS))
    return F.nll_loss(log_p, labels)


def entropy_map(p: torch.Tensor) -> torch.Tensor:
    """Shannon entropy (natural log) per pixel, ``(N, H, W)``; ``0 ln 0 = 0``."""
    return -torch.special.xlogy(p, p).sum(dim=-3)


def _adversarial(score_src: torch.Tensor, score_tgt: torch.Tensor) -> torch.Tensor:
    s = torch.as_tensor(score_src).clamp(SCORE_EPS, 1 - SCORE_EPS)
    t = torch.as_tensor(score_tgt).clamp(SCORE_EPS, 1 - SCORE_EPS)
    return (torch.log(s) + torch.log1p(-t)).mean()


def loss_sa(score_src: torch.Tensor, score_tgt: torch.Tensor) -> torch.Tensor:
    """Spatial adversarial loss ``log D_s(p^S_k) + log(1 - D_s(p^T_k))``.

    The discriminators ascend it; the generator works against it.
    """
    return _adversarial(score_src, score_tgt)


def loss_sta(score_src_stack: torch.Tensor, score_tgt_stack: torch.Tensor) -> torch.Tensor:
    """Spatial-temporal adversarial loss, same form as loss_sa over ``D_st`` scores."""
    return _adversarial(score_src_stack, score_tgt_stack)


def generator_adversarial(score_tgt: torch.Tensor, form: str = "non_saturating") -> torch.Tensor:
    """Generator-side surrogate for one adversarial term, to be minimized.

    ``non_saturating`` minimizes ``-log D(target)``; ``saturating`` minimizes
    ``log(1 - D(target))`` literally.
    """
    t = torch.as_tensor(score_tgt).clamp(SCORE_EPS, 1 - SCORE_EPS)
    if form == "saturating":
        return torch.log1p(-t).mean()
    if form == "non_saturating":
        return -torch.log(t).mean()
    raise ValueError(f"unknown generator form {form!r}")


def _cosine(a: torch.Tensor, b: torch.Tensor, where: str) -> torch.Tensor:
    norm_a = torch.linalg.vector_norm(a)
    norm_b = torch.linalg.vector_norm(b)
    if float(norm_a) == 0.0 or float(norm_b) == 0.0:
        raise NumericalError(where, f"zero-norm weight vector in {where}")
    return torch.dot(a, b) / (norm_a * norm_b)


def loss_wd(params_st: Discriminator, params_s: Discriminator) -> torch.Tensor:
    """Mean cosine similarity of the flattened weights of the shared-shape layers.

    Layer 1 differs in input channels (2C vs C) and is left out; J counts the
    remaining layers.

    Raises:
        NumericalError: if a layer's weight vector has zero norm.
    """
    indices = shared_layer_indices(params_st, params_s)
    if not indices:
        raise ShapeError("discriminators share no layer shapes")
    cosines = [
        _cosine(flatten_layer_weights(params_st, j), flatten_layer_weights(params_s, j), f"layer {j}")
        for j in indices
    ]
    return torch.stack(cosines).mean()


def loss_ctcr(
    sa: float | torch.Tensor,
    sta: float | torch.Tensor,
    wd: float | torch.Tensor,
    lambda_sa: float = DEFAULT_LAMBDA_SA,
    lambda_wd: float = DEFAULT_LAMBDA_WD,
) -> float | torch.Tensor:
    """Cross-domain term ``sta + lambda_sa * sa + lambda_wd * wd``."""
    return sta + lambda_sa * sa + lambda_wd * wd


def loss_itcr(
    p_k: torch.Tensor, p_hat_km1: torch.Tensor, valid: ValidityMask | torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Entropy-gated L1 consistency with the propagated previous prediction.

    A pixel contributes ``sum_c |p_k - p_hat|`` only when it is valid and the
    current prediction is strictly less confident than the propagated one,
    ``E(p_k) > E(p_hat)``. ``p_hat_km1`` is a fixed target (no gradient).

    Returns:
        tuple[torch.Tensor, torch.Tensor]: the loss (mean over valid pixels)
        and the gate fraction (mean gate over valid pixels). Both are zero
        when no pixel is valid.
    """
    if p_k.shape != p_hat_km1.shape:
        raise ShapeError(f"p_k {tuple(p_k.shape)} and p_hat {tuple(p_hat_km1.shape)} differ")
    mask = valid.data if isinstance(valid, ValidityMask) else valid
    mask = mask.to(torch.bool).expand(p_k.shape[:-3] + p_k.shape[-2:])
    target = p_hat_km1.detach()
    with torch.no_grad():
        gate = (entropy_map(p_k) - entropy_map(target) > 0) & mask
    l1 = (p_k - target).abs().sum(dim=-3)
    count = mask.sum()
    if int(count) == 0:
        zero = p_k.sum() * 0.0
        return zero, zero.detach()
    loss = (l1 * gate.to(l1.dtype)).sum() / count
    gate_fraction = gate.sum().to(l1.dtype) / count
    return loss, gate_fraction


@dataclass
class ObjectiveParts:
    """Per-step tensors feeding the joint objective; absent terms are None."""

    ssl: torch.Tensor
    sa: torch.Tensor | None = None
    sta: torch.Tensor | None = None
    wd: torch.Tensor | None = None
    sa_gen: torch.Tensor | None = None
    sta_gen: torch.Tensor | None = None
    itcr: torch.Tensor | None = None


def _or_zero(value: torch.Tensor | None) -> torch.Tensor | float:
    return 0.0 if value is None else value


def assemble_objective(
    parts: ObjectiveParts,
    lambda_u: float = DEFAULT_LAMBDA_U,
    lambda_sa: float = DEFAULT_LAMBDA_SA,
    lambda_wd: float = DEFAULT_LAMBDA_WD,
) -> tuple[torch.Tensor, torch.Tensor | float]:
    """Assemble the min-max objective as two losses to descend.

    ``gen_loss = ssl + lambda_u * ctcr_G + lambda_u * itcr`` where
    ``ctcr_G = sta_gen + lambda_sa * sa_gen`` (generator-side surrogates; the
    discrepancy term has no generator argument).

    ``disc_loss = -(sta + lambda_sa * sa) + lambda_wd * wd``: descending it
    ascends the adversarial terms while pushing the two discriminators'
    weights apart.
    """
    ctcr_gen = _or_zero(parts.sta_gen) + lambda_sa * _or_zero(parts.sa_gen)
    gen_loss = parts.ssl + lambda_u * ctcr_gen + lambda_u * _or_zero(parts.itcr)
    disc_loss = -(_or_zero(parts.sta) + lambda_sa * _or_zero(parts.sa)) + lambda_wd * _or_zero(
        parts.wd
    )
    return gen_loss, disc_loss
