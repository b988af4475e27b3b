import math

import numpy as np
import pytest
import torch

from vidadapt.errors import EvaluationError, ShapeError
from vidadapt.evalkit import (
    ConfusionMatrix,
    EvalResult,
    confusion_matrix,
    evaluate_clips,
    feature_variance,
    miou,
    pixel_accuracy,
    temporal_consistency,
)
from vidadapt.flowwarp import FlowField, OracleFlowSource, ValidityMask
from vidadapt.segnet import SegModelConfig, init_params


def one_hot_map(labels, num_classes):
    labels = torch.as_tensor(labels)
    return torch.nn.functional.one_hot(labels, num_classes).permute(2, 0, 1).double()


def all_valid(height, width):
    return ValidityMask(torch.ones(height, width, dtype=torch.bool))


################################################################@##########
# Confusion matrix and IoU
################################################################@##########
def test_two_class_example():
    per_class, mean = miou(ConfusionMatrix(np.array([[3, 1], [1, 3]])))
    assert per_class.tolist() == [0.6, 0.6]
    assert mean == pytest.approx(0.6)


def test_diagonal_is_perfect():
    per_class, mean = miou(ConfusionMatrix(np.diag([4, 9, 1])))
    assert per_class.tolist() == [1.0, 1.0, 1.0]
    assert mean == 1.0


def test_absent_class_is_excluded():
    counts = np.array([[2, 0, 1], [0, 0, 0], [1, 0, 2]])
    per_class, mean = miou(ConfusionMatrix(counts))

    assert math.isnan(per_class[1])
    assert mean == pytest.approx(0.5)


def test_all_classes_absent():
    with pytest.raises(EvaluationError, match="no class present"):
        miou(ConfusionMatrix.zeros(3))


def test_confusion_matrix_validation():
    with pytest.raises(ShapeError, match="square"):
        ConfusionMatrix(np.zeros((2, 3)))
    with pytest.raises(ShapeError, match="non-negative"):
        ConfusionMatrix(np.array([[1, -1], [0, 1]]))


def test_confusion_counts_and_merge():
    labels = np.array([[0, 0, 1], [2, 2, 1]])
    prediction = np.array([[0, 1, 1], [2, 0, 1]])

    cm = confusion_matrix(prediction, labels, 3)

    assert cm.counts.tolist() == [[1, 1, 0], [0, 2, 0], [1, 0, 1]]
    assert cm.total == labels.size
    assert (cm + cm).counts.tolist() == [[2, 2, 0], [0, 4, 0], [2, 0, 2]]
    with pytest.raises(ShapeError):
        cm + ConfusionMatrix.zeros(2)


def test_out_of_range_labels_are_ignored():
    cm = confusion_matrix(np.array([0, 1, 1]), np.array([0, 255, 1]), 2)
    assert cm.total == 2


def test_pixel_accuracy():
    assert pixel_accuracy(ConfusionMatrix(np.array([[3, 1], [1, 3]]))) == 0.75
    with pytest.raises(EvaluationError):
        pixel_accuracy(ConfusionMatrix.zeros(2))


@pytest.mark.parametrize("seed", range(100))
def test_miou_matches_set_oracle(seed):
    rng = np.random.default_rng(seed)
    num_classes = 4
    labels = rng.integers(0, num_classes, size=(8, 8))
    prediction = rng.integers(0, num_classes, size=(8, 8))

    per_class, mean = miou(confusion_matrix(prediction, labels, num_classes))

    pixels = {(y, x) for y in range(8) for x in range(8)}
    ious = []
    for c in range(num_classes):
        truth = {p for p in pixels if labels[p] == c}
        guess = {p for p in pixels if prediction[p] == c}
        union = truth | guess
        if union:
            ious.append(len(truth & guess) / len(union))
            assert per_class[c] == len(truth & guess) / len(union)
    assert mean == float(np.mean(ious))


################################################################@##########
# Temporal consistency
################################################################@##########
def test_identical_maps_are_consistent():
    p = one_hot_map(np.random.default_rng(0).integers(0, 3, size=(5, 6)), 3)
    assert temporal_consistency(p, p.clone(), FlowField.zeros(5, 6), all_valid(5, 6)) == 1.0


def test_disagreeing_maps_score_zero():
    labels = np.random.default_rng(1).integers(0, 3, size=(5, 6))
    p_k = one_hot_map(labels, 3)
    p_km1 = one_hot_map((labels + 1) % 3, 3)
    assert temporal_consistency(p_k, p_km1, FlowField.zeros(5, 6), all_valid(5, 6)) == 0.0


def test_half_agreement():
    labels = np.zeros((4, 4), dtype=np.int64)
    previous = labels.copy()
    previous[:, 2:] = 1
    assert temporal_consistency(
        one_hot_map(labels, 2), one_hot_map(previous, 2), FlowField.zeros(4, 4), all_valid(4, 4)
    ) == 0.5


def test_consistency_follows_the_flow():
    previous = np.zeros((4, 6), dtype=np.int64)
    previous[:, 3] = 1
    current = np.zeros((4, 6), dtype=np.int64)
    current[:, 1] = 1

    # Column 1 of frame k came from column 3 of frame k-1.
    score = temporal_consistency(
        one_hot_map(current, 2),
        one_hot_map(previous, 2),
        FlowField.constant(4, 6, 2.0, 0.0),
        all_valid(4, 6),
    )

    assert score == 1.0


def test_occluded_pixels_are_skipped():
    labels = np.zeros((4, 4), dtype=np.int64)
    previous = labels.copy()
    previous[:, 2:] = 1
    occ = torch.ones(4, 4, dtype=torch.bool)
    occ[:, 2:] = False

    score = temporal_consistency(
        one_hot_map(labels, 2), one_hot_map(previous, 2), FlowField.zeros(4, 4), ValidityMask(occ)
    )

    assert score == 1.0


def test_consistency_is_invariant_to_channel_permutation():
    rng = np.random.default_rng(2)
    p_k = torch.softmax(torch.as_tensor(rng.normal(size=(4, 6, 6))), dim=0)
    p_km1 = torch.softmax(torch.as_tensor(rng.normal(size=(4, 6, 6))), dim=0)
    flow = FlowField.constant(6, 6, 0.5, -1.0)
    permutation = [3, 1, 0, 2]

    plain = temporal_consistency(p_k, p_km1, flow, all_valid(6, 6))
    permuted = temporal_consistency(p_k[permutation], p_km1[permutation], flow, all_valid(6, 6))

    assert plain == permuted
    assert 0.0 <= plain <= 1.0


def test_no_valid_pixels():
    p = one_hot_map(np.zeros((3, 3), dtype=np.int64), 2)
    with pytest.raises(EvaluationError, match="no valid pixels"):
        temporal_consistency(p, p, FlowField.zeros(3, 3), ValidityMask(torch.zeros(3, 3)))


################################################################@##########
# Feature variance
################################################################@##########
def test_identical_features_have_no_variance():
    inter, intra = feature_variance(np.ones((6, 3)), np.array([0, 0, 1, 1, 2, 2]))
    assert (inter, intra) == (0.0, 0.0)


def test_two_points_in_one_dimension():
    inter, intra = feature_variance(np.array([[0.0], [0.0], [2.0]]), np.array([0, 0, 1]))
    # global centroid sits at 2/3
    assert inter == pytest.approx(10 / 9)
    assert intra == 0.0


def test_inter_variance_is_measured_from_the_global_centroid():
    features = np.array([[0.0], [0.0], [0.0], [2.0]])

    inter, intra = feature_variance(features, np.array([0, 0, 0, 1]))

    assert inter == pytest.approx((0.5**2 + 1.5**2) / 2)
    assert intra == 0.0


def test_duplicating_features_changes_nothing():
    rng = np.random.default_rng(3)
    features = rng.normal(size=(30, 4))
    labels = rng.integers(0, 3, size=30)

    once = feature_variance(features, labels)
    twice = feature_variance(np.concatenate([features, features]), np.concatenate([labels, labels]))

    assert twice == pytest.approx(once)


def test_variance_is_translation_invariant():
    rng = np.random.default_rng(4)
    features = rng.normal(size=(20, 3))
    labels = rng.integers(0, 2, size=20)
    labels[:2] = (0, 1)

    moved = feature_variance(features + np.array([5.0, -2.0, 7.0]), labels)

    assert moved == pytest.approx(feature_variance(features, labels))


def test_feature_map_layout():
    feature_map = np.zeros((1, 2, 2))
    feature_map[0, :, 1] = 2.0
    labels = np.array([[0, 1], [0, 1]])
    assert feature_variance(feature_map, labels) == (1.0, 0.0)


def test_single_class_rejected():
    with pytest.raises(EvaluationError, match="two classes"):
        feature_variance(np.zeros((4, 2)), np.zeros(4))


def test_feature_label_mismatch_rejected():
    with pytest.raises(ShapeError):
        feature_variance(np.zeros((4, 2)), np.zeros(3))


################################################################@##########
# Whole-clip evaluation
################################################################@##########
def test_evaluate_clips_summary(tiny_clip):
    model = init_params(SegModelConfig(num_classes=3, base_channels=4, num_down_levels=1), 0)

    result = evaluate_clips(model, [tiny_clip, tiny_clip], OracleFlowSource(), feature_stride=2)

    assert result.confusion.total == 2 * 5 * 16 * 24
    assert result.num_clips == 2
    assert result.num_frames == 10
    assert 0.0 <= result.miou <= 1.0
    assert 0.0 <= result.temporal_consistency <= 1.0
    record = result.to_record()
    assert set(record) == {
        "miou_target",
        "per_class_iou",
        "pixel_accuracy",
        "temporal_consistency",
        "sigma2_inter",
        "sigma2_intra",
        "num_clips",
        "num_frames",
    }
    assert len(record["per_class_iou"]) == 3


def test_evaluate_clips_is_deterministic(tiny_clip):
    model = init_params(SegModelConfig(num_classes=3, base_channels=4, num_down_levels=1), 1)

    first = evaluate_clips(model, [tiny_clip], OracleFlowSource())
    second = evaluate_clips(model, [tiny_clip], OracleFlowSource())

    assert first.to_record() == second.to_record()
    assert np.array_equal(first.confusion.counts, second.confusion.counts)


def test_evaluate_needs_clips():
    model = init_params(SegModelConfig(num_classes=3, base_channels=2, num_down_levels=1), 0)
    with pytest.raises(EvaluationError, match="no clips"):
        evaluate_clips(model, [], OracleFlowSource())


def test_record_maps_absent_classes_to_null():
    cm = ConfusionMatrix(np.array([[2, 0, 0], [0, 0, 0], [0, 0, 2]]))
    per_class, mean = miou(cm)
    result = EvalResult(
        confusion=cm, per_class_iou=per_class, miou=mean, pixel_accuracy=1.0, temporal_consistency=None
    )
    assert result.to_record()["per_class_iou"] == [1.0, None, 1.0]
