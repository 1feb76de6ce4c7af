import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from razn.errors import UndefinedMetricError, ValidationError
from razn.metrics import (
    ConfusionAccumulator,
    CostLedger,
    CostRecord,
    format_report,
    iou_per_class,
    mean_iou,
    merged_iou,
    relative_time,
    table_row,
    weighted_iou,
)


def _acc(truth, pred, C=4):
    return ConfusionAccumulator(C).update(np.asarray(truth), np.asarray(pred))


def test_perfect_prediction():
    t = np.array([[0, 1], [2, 2]])
    acc = _acc(t, t)
    assert np.nan_to_num(iou_per_class(acc), nan=1.0).tolist() == [1.0, 1.0, 1.0, 1.0]
    assert mean_iou(acc) == 1.0


def test_disjoint_class_has_zero_iou():
    acc = _acc([[1, 1]], [[0, 0]], C=2)
    assert iou_per_class(acc)[1] == 0.0


def test_one_third_hand_case():
    acc = _acc([[1, 1, 0, 0]], [[1, 0, 1, 0]], C=2)
    assert iou_per_class(acc)[1] == pytest.approx(1 / 3)


def test_zero_union_classes_are_excluded():
    acc = _acc([[0, 1]], [[0, 1]])
    ious = iou_per_class(acc)
    assert np.isnan(ious[2]) and np.isnan(ious[3])
    assert mean_iou(acc) == 1.0


def test_empty_accumulator_raises():
    with pytest.raises(UndefinedMetricError):
        mean_iou(ConfusionAccumulator(4))


def test_weighted_iou_hand_case():
    # freqs (0.9, 0.1), IOUs (1, 0) -> weights (0.1, 0.9)
    acc = ConfusionAccumulator(2)
    acc.matrix[:] = [[9, 0], [0, 0]]
    acc.matrix[1, 1] = 0
    assert weighted_iou(acc, [0.9, 0.1]) == pytest.approx(0.1)


def test_weighted_iou_excludes_zero_frequency():
    acc = _acc([[0, 0, 1, 1]], [[0, 1, 1, 1]], C=3)
    full = weighted_iou(acc, [0.5, 0.5, 0.0])
    ious = iou_per_class(acc)
    assert full == pytest.approx(0.5 * ious[0] + 0.5 * ious[1])
    with pytest.raises(UndefinedMetricError):
        weighted_iou(acc, [0.0, 0.0, 0.0])


def test_weighted_equals_mean_under_equal_frequencies():
    rng = np.random.default_rng(0)
    t = np.repeat(np.arange(4), 64).reshape(16, 16)
    p = rng.integers(0, 4, size=(16, 16))
    acc = _acc(t, p)
    assert weighted_iou(acc) == pytest.approx(mean_iou(acc), abs=1e-15)


def test_accumulators_are_additive():
    rng = np.random.default_rng(1)
    t1, p1, t2, p2 = (rng.integers(0, 4, size=(8, 8)) for _ in range(4))
    joint = ConfusionAccumulator(4).update(np.stack([t1, t2]), np.stack([p1, p2]))
    assert np.array_equal((_acc(t1, p1) + _acc(t2, p2)).matrix, joint.matrix)


def test_update_validates():
    with pytest.raises(ValidationError):
        _acc([[0, 1]], [[0]])
    with pytest.raises(ValidationError):
        _acc([[0, 4]], [[0, 1]])


def test_merged_iou_groups():
    acc = _acc([[0, 1, 2, 3]], [[1, 0, 3, 2]])
    assert merged_iou(acc, (0, 1)) == 1.0 and merged_iou(acc, (2, 3)) == 1.0
    assert mean_iou(acc) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_iou_bounds(seed):
    rng = np.random.default_rng(seed)
    acc = _acc(rng.integers(0, 4, size=(8, 8)), rng.integers(0, 4, size=(8, 8)))
    for v in (mean_iou(acc), weighted_iou(acc)):
        assert 0.0 <= v <= 1.0


# ------------------------------------------------------------------ cost


def _ledger(zooms, ratio_units=1):
    led = CostLedger()
    for i, z in enumerate(zooms):
        led.add(CostRecord([0, i, 0, 1, 1], {1: 4} if z else {0: 1}, ratio_units, [0.5], [int(z)]))
    return led


def test_relative_time_extremes():
    assert relative_time(_ledger([0] * 10), 0.071) == (pytest.approx(1.071), 0.0)
    assert relative_time(_ledger([1] * 10), 0.071) == (pytest.approx(4.071), 0.0)


def test_relative_time_linear_in_zoom_fraction():
    zooms = [1, 0, 0, 1, 0, 0, 0, 1]
    mean, _ = relative_time(_ledger(zooms), 0.071)
    assert mean == pytest.approx(1.071 + 3 * np.mean(zooms))
    assert relative_time(_ledger(zooms[::-1]), 0.071)[0] == pytest.approx(mean)


def test_ledger_rejects_negative_units():
    with pytest.raises(ValidationError):
        CostLedger().add(CostRecord([0, 0, 0, 1, 1], {0: -1}))
    with pytest.raises(UndefinedMetricError):
        relative_time(CostLedger(), 0.1)


def test_report_format():
    acc = _acc([[0, 1, 2, 3]], [[0, 1, 2, 2]])
    row = table_row(acc)
    row["relative_time"] = (2.5, 0.5)
    text = format_report({"razn": row})
    header, line = text.strip().split("\n")
    assert header.split("\t")[0] == "method" and line.startswith("razn\t")
    assert line.split("\t")[-1] == "2.500+-0.500"
