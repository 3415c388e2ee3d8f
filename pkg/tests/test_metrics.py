import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pano import metrics as E
from pano.errors import DataError, DimensionError
from pano.tensor import IGNORE_INDEX


def confusion_loop(pred, gt, k, ignore=IGNORE_INDEX):
    counts = [[0] * k for _ in range(k)]
    skipped = 0
    for p, g in zip(pred.reshape(-1).tolist(), gt.reshape(-1).tolist()):
        if g == ignore:
            skipped += 1
            continue
        counts[g][p] += 1
    return np.array(counts), skipped


def iou_by_hand(counts):
    """Spreadsheet-style: one class at a time, explicit TP/FP/FN sums."""
    k = len(counts)
    out = []
    for c in range(k):
        tp = counts[c][c]
        fp = sum(counts[r][c] for r in range(k) if r != c)
        fn = sum(counts[c][q] for q in range(k) if q != c)
        out.append(tp / (tp + fp + fn) if tp + fp + fn else None)
    defined = [v for v in out if v is not None]
    return out, sum(defined) / len(defined)


def test_perfect_prediction_is_diagonal():
    gt = np.random.default_rng(0).integers(0, 4, (6, 7))
    cm = E.accumulate(E.ConfusionMatrix(4), gt, gt)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    assert E.miou(cm)[1] == 1.0


def test_all_ignored_gives_zero_matrix():
    gt = np.full((3, 5), IGNORE_INDEX)
    cm = E.accumulate(E.ConfusionMatrix(3), np.zeros((3, 5), int), gt)
    assert cm.counts.sum() == 0 and cm.ignore_count == 15


def test_accumulate_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(120):
        k = int(rng.integers(1, 6))
        h, w = rng.integers(1, 7, 2)
        pred = rng.integers(0, k, (h, w))
        gt = rng.integers(0, k, (h, w))
        gt[rng.random((h, w)) < 0.2] = IGNORE_INDEX
        cm = E.accumulate(E.ConfusionMatrix(k), pred, gt)
        ref, skipped = confusion_loop(pred, gt, k)
        assert np.abs(cm.counts - ref).max() <= 1e-6
        assert cm.ignore_count == skipped
        assert cm.scored == h * w


def test_two_class_uniform_counts():
    cm = E.ConfusionMatrix(2)
    cm.counts[...] = [[1, 1], [1, 1]]
    iou, mean = E.miou(cm)
    np.testing.assert_allclose(iou, [1 / 3, 1 / 3])
    assert mean == pytest.approx(1 / 3)


def test_random_matrix_against_hand_evaluation():
    rng = np.random.default_rng(2)
    for _ in range(50):
        k = int(rng.integers(2, 6))
        cm = E.ConfusionMatrix(k)
        cm.counts[...] = rng.integers(1, 20, (k, k))
        cm.counts[0, :] = 0
        cm.counts[:, 0] = 0  # one class with an empty union
        ref, ref_mean = iou_by_hand(cm.counts.tolist())
        iou, mean = E.miou(cm)
        assert np.isnan(iou[0]) and ref[0] is None
        np.testing.assert_allclose(iou[1:], ref[1:], rtol=1e-12)
        assert mean == pytest.approx(ref_mean, rel=1e-12)


def test_out_of_range_ids_are_data_errors():
    with pytest.raises(DataError):
        E.accumulate(E.ConfusionMatrix(3), np.array([[3]]), np.array([[0]]))
    with pytest.raises(DataError):
        E.accumulate(E.ConfusionMatrix(3), np.array([[0]]), np.array([[7]]))
    with pytest.raises(DimensionError):
        E.accumulate(E.ConfusionMatrix(3), np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_merge_equals_joint_accumulation():
    rng = np.random.default_rng(3)
    a_pred, a_gt, b_pred, b_gt = (rng.integers(0, 3, (4, 4)) for _ in range(4))
    joint = E.accumulate(E.ConfusionMatrix(3), np.concatenate([a_pred, b_pred]), np.concatenate([a_gt, b_gt]))
    parts = E.accumulate(E.ConfusionMatrix(3), a_pred, a_gt).merge(E.accumulate(E.ConfusionMatrix(3), b_pred, b_gt))
    np.testing.assert_array_equal(parts.counts, joint.counts)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, (4, 4), elements=st.integers(0, 50)), st.permutations(range(4)))
def test_miou_is_permutation_equivariant(counts, perm):
    perm = np.array(perm)
    cm, relabelled = E.ConfusionMatrix(4), E.ConfusionMatrix(4)
    cm.counts[...] = counts
    relabelled.counts[...] = counts[np.ix_(perm, perm)]
    iou, mean = E.miou(cm)
    iou_p, mean_p = E.miou(relabelled)
    np.testing.assert_array_equal(np.isnan(iou_p), np.isnan(iou[perm]))
    np.testing.assert_allclose(iou_p, iou[perm], equal_nan=True)
    assert mean_p == pytest.approx(mean)
    defined = iou[~np.isnan(iou)]
    assert np.all((defined >= 0) & (defined <= 1)) and 0 <= mean <= 1


def test_table_lists_every_class():
    cm = E.ConfusionMatrix(2)
    cm.counts[...] = [[2, 0], [0, 0]]
    table = E.format_table(cm, ["sky", "ground"])
    assert "sky" in table and "n/a" in table and table.splitlines()[-1].endswith("100.00")
