"""Segmentation quality (IOU family) and inference-cost accounting."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError, ValidationError

NON_CARCINOMA = (0, 1)
CARCINOMA = (2, 3)


class ConfusionAccumulator:
    """``C x C`` pixel counts indexed ``[truth, prediction]``."""

    def __init__(self, num_classes: int = 4):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionAccumulator":
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise ValidationError(f"truth {truth.shape} and prediction {pred.shape} differ in shape")
        C = self.num_classes
        t = truth.ravel().astype(np.int64)
        p = pred.ravel().astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= C or p.min() < 0 or p.max() >= C):
            raise ValidationError(f"class indices must lie in [0, {C})")
        self.matrix += np.bincount(t * C + p, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator(self.num_classes)
        out.matrix = self.matrix + other.matrix
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def class_frequencies(self) -> np.ndarray:
        rows = self.matrix.sum(axis=1).astype(np.float64)
        return rows / max(rows.sum(), 1.0)

    def grouped(self, groups: Sequence[Sequence[int]]) -> "ConfusionAccumulator":
        """Collapse classes into ``groups`` (each class in at most one group)."""
        idx = np.full(self.num_classes, -1)
        for g, members in enumerate(groups):
            idx[list(members)] = g
        if (idx < 0).any():
            raise ValidationError("every class must belong to a group")
        out = ConfusionAccumulator(len(groups))
        np.add.at(out.matrix, (idx[:, None], idx[None, :]), self.matrix)
        return out


def iou_per_class(acc: ConfusionAccumulator) -> np.ndarray:
    """IOU per class; ``nan`` where the class has empty union."""
    m = acc.matrix
    if m.sum() == 0:
        raise UndefinedMetricError("empty accumulator")
    tp = np.diag(m).astype(np.float64)
    union = m.sum(axis=0) + m.sum(axis=1) - np.diag(m)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def mean_iou(acc: ConfusionAccumulator) -> float:
    """Mean over classes with non-empty union."""
    ious = iou_per_class(acc)
    if np.isnan(ious).all():
        raise UndefinedMetricError("no class has a non-empty union")
    return float(np.nanmean(ious))


def weighted_iou(acc: ConfusionAccumulator, frequencies: Sequence[float] | None = None) -> float:
    """Inverse-frequency weighted IOU; weights are normalized to sum to one.

    ``frequencies`` default to the ground-truth pixel shares in ``acc``.
    Classes with zero frequency are dropped.
    """
    freqs = acc.class_frequencies() if frequencies is None else np.asarray(frequencies, dtype=np.float64)
    keep = freqs > 0
    if not keep.any():
        raise UndefinedMetricError("all class frequencies are zero")
    ious = iou_per_class(acc)
    inv = np.zeros_like(freqs)
    inv[keep] = 1.0 / freqs[keep]
    w = inv / inv.sum()
    return float(np.sum(w[keep] * np.nan_to_num(ious[keep])))


def merged_iou(acc: ConfusionAccumulator, members: Sequence[int]) -> float:
    """IOU of a class group treated as one label."""
    rest = [c for c in range(acc.num_classes) if c not in members]
    return float(iou_per_class(acc.grouped([list(members), rest]))[0])


def table_row(acc: ConfusionAccumulator) -> dict:
    ious = iou_per_class(acc)
    return {
        "non_carcinoma_iou": merged_iou(acc, NON_CARCINOMA),
        "carcinoma_iou": merged_iou(acc, CARCINOMA),
        "miou": mean_iou(acc),
        "weighted_iou": weighted_iou(acc),
        "class_iou": [None if np.isnan(v) else float(v) for v in ious],
    }


# ------------------------------------------------------------------ cost


@dataclass
class CostRecord:
    ref: list[int]
    seg_units: dict[int, int] = field(default_factory=dict)
    policy_units: int = 0
    p_tilde: list[float] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)

    @property
    def total_seg_units(self) -> int:
        return sum(self.seg_units.values())

    def cost(self, policy_ratio: float) -> float:
        return self.policy_units * policy_ratio + self.total_seg_units


@dataclass
class CostLedger:
    """Per-patch inference cost in units of one segmentation pass."""

    records: list[CostRecord] = field(default_factory=list)

    def add(self, rec: CostRecord) -> None:
        if rec.policy_units < 0 or any(v < 0 for v in rec.seg_units.values()):
            raise ValidationError("cost units must be non-negative")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)


def relative_time(ledger: CostLedger, policy_ratio: float) -> tuple[float, float]:
    """Mean and population std of per-patch cost relative to one coarse pass."""
    if not ledger.records:
        raise UndefinedMetricError("empty cost ledger")
    # exact rational arithmetic: a constant ledger has std exactly 0
    costs = [float(r.cost(policy_ratio)) for r in ledger.records]
    return float(statistics.mean(costs)), float(statistics.pstdev(costs))


def format_report(rows: dict[str, dict]) -> str:
    """Tab-separated table: per-class IOU, mIOU, weighted IOU and cost, one row per method."""
    cols = ("non_carcinoma_iou", "carcinoma_iou", "miou", "weighted_iou")
    lines = ["method\tnon_carcinoma\tcarcinoma\tmiou\tweighted_iou\trelative_time"]
    for name, row in rows.items():
        vals = [f"{row[c]:.4f}" for c in cols]
        rt = row.get("relative_time")
        vals.append("-" if rt is None else f"{rt[0]:.3f}+-{rt[1]:.3f}")
        lines.append("\t".join([name] + vals))
    return "\n".join(lines) + "\n"
