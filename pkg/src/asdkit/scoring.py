"""Chunk-score aggregation and evaluation metrics.

The per-clip anomaly score is the mean of the top half (ceil(M/2)) of the
sorted chunk scores. AUC uses the Mann-Whitney statistic with ties counted
one half; pAUC is the standardized partial area under the empirical ROC up
to false-positive rate p (the DCASE2020 convention: 0.5 at chance, 1.0 at
perfect separation).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


@dataclass
class ClipScore:
    clip_id: str
    machine_type: str
    machine_id: int
    truth: str  # "normal" | "anomalous"
    chunk_scores: list[float]
    aggregated: float


@dataclass(frozen=True)
class MetricRow:
    machine_type: str
    machine_id: int
    auc: float
    pauc: float

    @property
    def aauc(self) -> float:
        return (self.auc + self.pauc) / 2.0


@dataclass(frozen=True)
class TypeRollup:
    machine_type: str
    auc_mean: float
    pauc_mean: float
    aauc_mean: float
    auc_min: float  # mAUC
    pauc_min: float
    aauc_min: float


def aggregate(chunk_scores) -> float:
    """Mean of the top ceil(M/2) scores in descending order."""
    scores = [float(s) for s in chunk_scores]
    if not scores:
        raise ValidationError("cannot aggregate an empty score list")
    k = (len(scores) + 1) // 2
    top = sorted(scores, reverse=True)[:k]
    return sum(top) / k


def _check_two_classes(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("need at least one anomalous and one normal score")
    return n_pos, n_neg


def auc(scores, labels) -> float:
    """Probability an anomalous score exceeds a normal one; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have the same length")
    n_pos, n_neg = _check_two_classes(labels)
    ranks = rankdata(scores, method="average")
    u = float(ranks[labels].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ROC with one point per distinct score threshold, from (0,0) to (1,1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = _check_two_classes(labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tps = np.cumsum(sorted_labels)
    fps = np.cumsum(~sorted_labels)
    # keep only the last index within each tie group
    distinct = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    tpr = np.r_[0.0, tps[distinct] / n_pos]
    fpr = np.r_[0.0, fps[distinct] / n_neg]
    return fpr, tpr


def pauc(scores, labels, p: float = 0.1) -> float:
    """Standardized partial AUC over false-positive rates [0, p].

    Trapezoidal area under the empirical ROC up to p (interpolating at p),
    rescaled so a chance-level classifier gets 0.5 and a perfect one 1.0.
    """
    if not (0 < p <= 1):
        raise ValidationError(f"p must be in (0, 1], got {p}")
    fpr, tpr = roc_points(scores, labels)
    tpr_at_p = float(np.interp(p, fpr, tpr))
    keep = fpr <= p
    # the appended endpoint has zero width when a point sits exactly at p
    fpr_part = np.r_[fpr[keep], p]
    tpr_part = np.r_[tpr[keep], tpr_at_p]
    raw = float(np.trapezoid(tpr_part, fpr_part))
    min_area = 0.5 * p * p
    max_area = p
    return 0.5 * (1.0 + (raw - min_area) / (max_area - min_area))


def metric_row(machine_type: str, machine_id: int, scores, labels, p: float = 0.1) -> MetricRow:
    return MetricRow(
        machine_type=machine_type,
        machine_id=machine_id,
        auc=auc(scores, labels),
        pauc=pauc(scores, labels, p),
    )


def rollup(rows: list[MetricRow]) -> dict[str, TypeRollup]:
    """Per-type arithmetic means plus minima across machine ids.

    The headline numbers are ``aauc_mean`` (average of per-id aAUC) and
    ``auc_min`` (the lowest plain AUC of any machine id of the type).
    """
    if not rows:
        raise ValidationError("need at least one metric row")
    by_type: dict[str, list[MetricRow]] = {}
    for row in rows:
        by_type.setdefault(row.machine_type, []).append(row)
    out = {}
    for mtype in sorted(by_type):
        group = by_type[mtype]
        out[mtype] = TypeRollup(
            machine_type=mtype,
            auc_mean=float(np.mean([r.auc for r in group])),
            pauc_mean=float(np.mean([r.pauc for r in group])),
            aauc_mean=float(np.mean([r.aauc for r in group])),
            auc_min=min(r.auc for r in group),
            pauc_min=min(r.pauc for r in group),
            aauc_min=min(r.aauc for r in group),
        )
    return out


@dataclass
class EvalReport:
    clip_scores: list[ClipScore]
    metrics: list[MetricRow]
    rollups: dict[str, TypeRollup]


def write_scores_csv(path: str | Path, clip_scores: list[ClipScore]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "machine_type", "machine_id", "truth", "score"])
        for cs in sorted(clip_scores, key=lambda c: c.clip_id):
            writer.writerow([cs.clip_id, cs.machine_type, cs.machine_id, cs.truth, repr(cs.aggregated)])


def write_metrics_csv(path: str | Path, rows: list[MetricRow], rollups: dict[str, TypeRollup]) -> None:
    """Per-id rows followed, per type, by a ``mean`` row and a ``min`` row.

    The ``min`` row's auc column is the type's mAUC.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["machine_type", "machine_id", "auc", "pauc", "aauc"])
        for mtype in sorted({r.machine_type for r in rows}):
            group = sorted((r for r in rows if r.machine_type == mtype), key=lambda r: r.machine_id)
            for r in group:
                writer.writerow([r.machine_type, r.machine_id, repr(r.auc), repr(r.pauc), repr(r.aauc)])
            ru = rollups[mtype]
            writer.writerow([mtype, "mean", repr(ru.auc_mean), repr(ru.pauc_mean), repr(ru.aauc_mean)])
            writer.writerow([mtype, "min", repr(ru.auc_min), repr(ru.pauc_min), repr(ru.aauc_min)])
