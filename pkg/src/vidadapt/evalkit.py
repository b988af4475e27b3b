"""Evaluation: confusion matrices, IoU, temporal consistency, feature variance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np
import torch

from .errors import EvaluationError, ShapeError
from .flowwarp import FlowField, FlowSource, ValidityMask, backward_warp
from .logs import get_logger
from .segnet import predict_clip

if TYPE_CHECKING:
    from .segnet import SegModel
    from .synthdata import VideoClip

log = get_logger(__name__)


@dataclass
class ConfusionMatrix:
    """``C x C`` pixel counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ShapeError("confusion matrix counts must be non-negative")
        self.counts = counts

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(
    prediction: np.ndarray | torch.Tensor, labels: np.ndarray | torch.Tensor, num_classes: int
) -> ConfusionMatrix:
    """Count (label, prediction) pairs over all pixels of equally shaped label maps.

    Labels outside [0, num_classes) are ignored.
    """
    prediction = np.asarray(prediction, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if prediction.shape != labels.shape:
        raise ShapeError(f"prediction {prediction.shape} and labels {labels.shape} differ")
    keep = (labels >= 0) & (labels < num_classes)
    index = num_classes * labels[keep] + np.clip(prediction[keep], 0, num_classes - 1)
    counts = np.bincount(index, minlength=num_classes**2)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes whose union is empty (absent from both labels and predictions)
    get NaN and are left out of the mean.

    Raises:
        EvaluationError: if every class is absent.
    """
    counts = cm.counts.astype(np.float64)
    intersection = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - intersection
    present = union > 0
    if not present.any():
        raise EvaluationError("mIoU undefined: no class present in labels or predictions")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[present] = intersection[present] / union[present]
    return per_class, float(per_class[present].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EvaluationError("pixel accuracy undefined on an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def _consistency_counts(
    p_k: torch.Tensor, p_km1: torch.Tensor, flow_bwd: FlowField, occ: ValidityMask
) -> tuple[int, int]:
    if p_k.shape != p_km1.shape:
        raise ShapeError(f"maps differ: {tuple(p_k.shape)} vs {tuple(p_km1.shape)}")
    warped, inside = backward_warp(p_km1, flow_bwd)
    valid = (inside & occ).data
    agree = (p_k.argmax(dim=-3) == warped.argmax(dim=-3)) & valid
    return int(agree.sum()), int(valid.sum())


def temporal_consistency(
    p_k: torch.Tensor, p_km1: torch.Tensor, flow_bwd: FlowField, occ: ValidityMask
) -> float:
    """Fraction of valid, non-occluded pixels whose argmax agrees with the warped previous map.

    Raises:
        EvaluationError: if no pixel is valid.
    """
    agree, valid = _consistency_counts(p_k, p_km1, flow_bwd, occ)
    if valid == 0:
        raise EvaluationError("temporal consistency undefined: no valid pixels")
    return agree / valid


def feature_variance(
    features: np.ndarray | torch.Tensor, labels: np.ndarray | torch.Tensor
) -> tuple[float, float]:
    """Inter-class and intra-class variance of feature vectors.

    Args:
        features (np.ndarray | torch.Tensor):
            ``(N, D)`` vectors, or a ``(D, H, W)`` map.
        labels (np.ndarray | torch.Tensor):
            ``(N,)`` labels, or an ``(H, W)`` map.

    Returns:
        tuple[float, float]: ``(sigma2_inter, sigma2_intra)``. Intra is the mean
        over classes of the mean squared distance to the class centroid; inter
        is the mean squared distance of class centroids to the centroid of all
        features, so larger classes pull that reference point towards them.

    Raises:
        EvaluationError: if fewer than two classes are present.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if feats.ndim == 3:
        feats = feats.reshape(feats.shape[0], -1).T
        labels = labels.reshape(-1)
    if feats.ndim != 2 or labels.shape != feats.shape[:1]:
        raise ShapeError(f"features {feats.shape} do not match labels {labels.shape}")
    classes = np.unique(labels)
    if classes.size < 2:
        raise EvaluationError("feature variance needs at least two classes")
    centroids = []
    intra = []
    for c in classes:
        members = feats[labels == c]
        centroid = members.mean(axis=0)
        centroids.append(centroid)
        intra.append(((members - centroid) ** 2).sum(axis=1).mean())
    centroids = np.stack(centroids)
    inter = ((centroids - feats.mean(axis=0)) ** 2).sum(axis=1).mean()
    return float(inter), float(np.mean(intra))


def _nan_to_none(values: np.ndarray) -> list[float | None]:
    return [None if np.isnan(v) else float(v) for v in values]


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    per_class_iou: np.ndarray
    miou: float
    pixel_accuracy: float
    temporal_consistency: float | None
    sigma2_inter: float | None = None
    sigma2_intra: float | None = None
    num_clips: int = 0
    num_frames: int = 0

    def to_record(self) -> dict[str, Any]:
        """JSON-ready summary (absent classes become null)."""
        return {
            "miou_target": self.miou,
            "per_class_iou": _nan_to_none(self.per_class_iou),
            "pixel_accuracy": self.pixel_accuracy,
            "temporal_consistency": self.temporal_consistency,
            "sigma2_inter": self.sigma2_inter,
            "sigma2_intra": self.sigma2_intra,
            "num_clips": self.num_clips,
            "num_frames": self.num_frames,
        }


def evaluate_clips(
    model: "SegModel",
    clips: Sequence["VideoClip"],
    flow_source: FlowSource,
    *,
    gap: int = 1,
    feature_stride: int = 4,
) -> EvalResult:
    """Evaluate a model on labelled clips.

    Every frame is scored against its labels. Temporal consistency pools the
    valid pixels of all pairs ``(k - gap, k)``. Feature variance uses the
    channel-stacked fused scores of frames ``k - 1`` and ``k``, subsampled by
    ``feature_stride`` and labelled by frame ``k``.
    """
    if not clips:
        raise EvaluationError("no clips to evaluate")
    num_classes = model.num_classes
    cm = ConfusionMatrix.zeros(num_classes)
    agree_total = valid_total = 0
    feature_rows: list[np.ndarray] = []
    feature_labels: list[np.ndarray] = []
    frames = 0
    s = feature_stride
    for clip in clips:
        probs, features = predict_clip(model, clip, flow_source, gap=gap)
        prediction = probs.argmax(dim=1).numpy()
        cm = cm + confusion_matrix(prediction, clip.labels, num_classes)
        frames += clip.num_frames
        for k in range(gap, clip.num_frames):
            flow, valid = flow_source.pair(clip, k, gap)
            agree, count = _consistency_counts(probs[k], probs[k - gap], flow, valid)
            agree_total += agree
            valid_total += count
        for k in range(1, clip.num_frames):
            stacked = torch.cat([features[k - 1], features[k]], dim=0)[:, ::s, ::s]
            feature_rows.append(stacked.reshape(stacked.shape[0], -1).T.numpy())
            feature_labels.append(clip.labels[k, ::s, ::s].reshape(-1))
    per_class, mean = miou(cm)
    consistency = agree_total / valid_total if valid_total else None
    sigma_inter = sigma_intra = None
    if feature_rows:
        try:
            sigma_inter, sigma_intra = feature_variance(
                np.concatenate(feature_rows), np.concatenate(feature_labels)
            )
        except EvaluationError as exc:
            log.warning("feature variance skipped: %s", exc)
    log.debug("evaluated %d clips: mIoU %.4f", len(clips), mean)
    return EvalResult(
        confusion=cm,
        per_class_iou=per_class,
        miou=mean,
        pixel_accuracy=pixel_accuracy(cm),
        temporal_consistency=consistency,
        sigma2_inter=sigma_inter,
        sigma2_intra=sigma_intra,
        num_clips=len(clips),
        num_frames=frames,
    )
