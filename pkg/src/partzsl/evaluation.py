"""Recognition metrics: top-1 accuracy, calibrated stacking over the joint
seen+unseen label space, the seen-unseen accuracy curve, and its area.

The curve is piecewise constant in the calibration penalty, so it is swept
event-driven: one evaluation just below and just above every distinct
score gap, plus sentinels beyond the extremes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, InputError
from .model import ModelParams, PartFeatureSet, TfIdfMatrix, score_matrix


@dataclass(frozen=True)
class ScoreTable:
    """Class scores for a batch of samples over one label space.

    ``scores`` is M x C; ``labels[m]`` is the true class column of sample m;
    ``seen_mask[c]`` marks column c as a seen class.
    """

    scores: np.ndarray
    labels: np.ndarray
    seen_mask: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=int)
        seen_mask = np.asarray(self.seen_mask, dtype=bool)
        if scores.ndim != 2:
            raise DimensionMismatch(f"scores must be 2-D, got {scores.shape}")
        if labels.shape != (scores.shape[0],):
            raise DimensionMismatch(
                f"{scores.shape[0]} score rows but labels shape {labels.shape}")
        if seen_mask.shape != (scores.shape[1],):
            raise DimensionMismatch(
                f"{scores.shape[1]} score columns but seen_mask shape "
                f"{seen_mask.shape}")
        if not np.isfinite(scores).all():
            raise InputError("score table contains non-finite entries")
        if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
            raise InputError("labels reference columns outside the score table")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "seen_mask", seen_mask)

    @property
    def n_samples(self) -> int:
        return self.scores.shape[0]

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class CurvePoint:
    lam: float
    acc_unseen: float
    acc_seen: float


@dataclass(frozen=True)
class SeenUnseenCurve:
    points: tuple
    ausuc: float

    def to_rows(self) -> list:
        return [(p.lam, p.acc_unseen, p.acc_seen) for p in self.points]


def build_score_table(model: ModelParams, T: TfIdfMatrix, X: PartFeatureSet,
                      labels: Sequence[int], seen_mask: Sequence[bool]) -> ScoreTable:
    """Score every sample in X against every class column of T."""
    return ScoreTable(score_matrix(model, T, X), np.asarray(labels, dtype=int),
                      np.asarray(seen_mask, dtype=bool))


def top1_accuracy(table: ScoreTable, per_class: bool = True) -> float:
    """Top-1 accuracy with ties broken toward the lowest class index.

    With ``per_class`` the result is the mean over all table classes of the
    within-class accuracy, so every class must have at least one sample.
    """
    if table.n_samples == 0:
        raise InputError("cannot evaluate an empty score table")
    preds = np.argmax(table.scores, axis=1)
    if not per_class:
        return float(np.mean(preds == table.labels))
    accs = []
    for c in range(table.n_classes):
        mask = table.labels == c
        if not mask.any():
            raise InputError(
                f"class column {c} has no samples for per-class accuracy")
        accs.append(float(np.mean(preds[mask] == c)))
    return float(np.mean(accs))


def gzsl_predict(table: ScoreTable, lam: float) -> np.ndarray:
    """Predicted labels after subtracting the penalty from seen-class scores."""
    adjusted = table.scores - lam * table.seen_mask.astype(np.float64)
    return np.argmax(adjusted, axis=1)


def _per_class_accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    classes = np.unique(labels)
    return float(np.mean([np.mean(preds[labels == c] == c) for c in classes]))


def _accuracy(preds: np.ndarray, labels: np.ndarray, per_class: bool) -> float:
    if per_class:
        return _per_class_accuracy(preds, labels)
    return float(np.mean(preds == labels))


def _seen_unseen_gaps(table: ScoreTable) -> np.ndarray:
    """Per sample: best seen-class score minus best unseen-class score."""
    seen_best = table.scores[:, table.seen_mask].max(axis=1)
    unseen_best = table.scores[:, ~table.seen_mask].max(axis=1)
    return seen_best - unseen_best


def curve_lambdas(seen_table: ScoreTable, unseen_table: ScoreTable) -> np.ndarray:
    """The exact sweep: midpoints around every distinct gap plus sentinels."""
    gaps = np.unique(np.concatenate([_seen_unseen_gaps(seen_table),
                                     _seen_unseen_gaps(unseen_table)]))
    if gaps.size > 1:
        eps = max(float(np.min(np.diff(gaps))) / 2.0, 1e-12)
    else:
        eps = max(1e-12, abs(float(gaps[0])) * 1e-9, 1e-9)
    lambdas = np.concatenate([[gaps[0] - 1.0], gaps - eps, gaps + eps,
                              [gaps[-1] + 1.0]])
    return np.unique(lambdas)


def seen_unseen_curve(seen_table: ScoreTable, unseen_table: ScoreTable,
                      per_class: bool = True) -> SeenUnseenCurve:
    """Sweep the calibration penalty and integrate the resulting curve.

    Args:
        seen_table: scores of seen-class samples over the joint label space.
        unseen_table: scores of unseen-class samples over the same space.
        per_class: use per-class mean accuracy (default) or plain accuracy.

    Returns:
        SeenUnseenCurve with points ordered by penalty and the trapezoidal
        area under the accuracy-vs-accuracy staircase.
    """
    if seen_table.n_samples == 0 or unseen_table.n_samples == 0:
        raise InputError("both seen and unseen sample sets must be non-empty")
    if seen_table.n_classes != unseen_table.n_classes or \
            not np.array_equal(seen_table.seen_mask, unseen_table.seen_mask):
        raise InputError("score tables must share the joint label space")
    if not seen_table.seen_mask.any() or seen_table.seen_mask.all():
        raise InputError("joint label space needs both seen and unseen classes")

    points = []
    for lam in curve_lambdas(seen_table, unseen_table):
        acc_u = _accuracy(gzsl_predict(unseen_table, lam),
                          unseen_table.labels, per_class)
        acc_s = _accuracy(gzsl_predict(seen_table, lam),
                          seen_table.labels, per_class)
        points.append(CurvePoint(float(lam), acc_u, acc_s))
    ausuc = _trapezoid_area([p.acc_unseen for p in points],
                            [p.acc_seen for p in points])
    return SeenUnseenCurve(tuple(points), ausuc)


def _trapezoid_area(xs: Sequence[float], ys: Sequence[float]) -> float:
    area = 0.0
    for i in range(len(xs) - 1):
        area += (xs[i + 1] - xs[i]) * (ys[i] + ys[i + 1]) / 2.0
    return float(area)


def ausuc_dense_grid(seen_table: ScoreTable, unseen_table: ScoreTable,
                     n_points: int = 10001, per_class: bool = True) -> float:
    """Brute-force area via a uniform penalty grid spanning all gaps."""
    gaps = np.concatenate([_seen_unseen_gaps(seen_table),
                           _seen_unseen_gaps(unseen_table)])
    lambdas = np.linspace(float(gaps.min()) - 1.0, float(gaps.max()) + 1.0,
                          n_points)
    xs, ys = [], []
    for lam in lambdas:
        xs.append(_accuracy(gzsl_predict(unseen_table, lam),
                            unseen_table.labels, per_class))
        ys.append(_accuracy(gzsl_predict(seen_table, lam),
                            seen_table.labels, per_class))
    return _trapezoid_area(xs, ys)


def write_curve_csv(curve: SeenUnseenCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "a_unseen", "a_seen"])
        for lam, acc_u, acc_s in curve.to_rows():
            writer.writerow([repr(lam), repr(acc_u), repr(acc_s)])


def write_report_json(path, report: dict) -> None:
    Path(path).write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
