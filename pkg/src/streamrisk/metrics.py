"""Ranking metrics for imbalanced session classification.

All four metrics sweep thresholds at the distinct score values (tied
scores enter and leave together) plus the trivial reject-all point, so
they agree exactly with exhaustive threshold enumeration. PR-AUC is the
interpolation-free step sum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError


@dataclass(frozen=True)
class ScoredSet:
    """Parallel (session_id, score, label) triples."""

    session_ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.session_ids) == len(scores) == len(labels)):
            raise ValueError("ids, scores, and labels must align")
        if len(scores) == 0:
            raise ValueError("empty score set")
        if np.any((scores < 0) | (scores > 1)) or not np.all(
            np.isfinite(scores)
        ):
            raise ValueError("scores must lie in [0, 1]")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0/1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_triples(
        cls, triples: Sequence[tuple[str, float, int]]
    ) -> "ScoredSet":
        ids, scores, labels = zip(*triples)
        return cls(tuple(ids), np.array(scores), np.array(labels))

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(len(self.labels) - self.labels.sum())


def _sweep(s: ScoredSet) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) after each distinct descending threshold.

    Includes the leading reject-all point (0, 0).
    """
    order = np.argsort(-s.scores, kind="stable")
    sorted_scores = s.scores[order]
    sorted_labels = s.labels[order]
    tp_cum = np.cumsum(sorted_labels)
    fp_cum = np.cumsum(1 - sorted_labels)
    # last index of each tied group = the state once the whole tie entered
    distinct = np.flatnonzero(
        np.diff(np.append(sorted_scores, -np.inf)) != 0.0
    )
    tp = np.concatenate([[0], tp_cum[distinct]])
    fp = np.concatenate([[0], fp_cum[distinct]])
    return tp, fp


def pr_auc(s: ScoredSet) -> float:
    """Area under the precision-recall step curve."""
    if s.n_pos == 0:
        raise UndefinedMetricError("PR-AUC undefined without positives")
    tp, fp = _sweep(s)
    recall = tp / s.n_pos
    predicted = tp + fp
    area = 0.0
    for i in range(1, len(tp)):
        precision = tp[i] / predicted[i]
        area += (recall[i] - recall[i - 1]) * precision
    return float(area)


def f1_best(s: ScoredSet) -> float:
    """Maximum F1 over all thresholds (no fixed operating point)."""
    if s.n_pos == 0:
        raise UndefinedMetricError("F1 undefined without positives")
    tp, fp = _sweep(s)
    best = 0.0
    for i in range(1, len(tp)):
        precision = tp[i] / (tp[i] + fp[i])
        recall = tp[i] / s.n_pos
        if precision + recall > 0:
            best = max(best, 2 * precision * recall / (precision + recall))
    return float(best)


def recall_at_fpr(s: ScoredSet, fpr_cap: float = 0.1) -> float:
    """Best recall among thresholds whose false-positive rate fits the cap."""
    if s.n_pos == 0 or s.n_neg == 0:
        raise UndefinedMetricError("needs at least one of each class")
    tp, fp = _sweep(s)
    feasible = fp / s.n_neg <= fpr_cap
    return float((tp[feasible] / s.n_pos).max())


def fpr_at_recall(s: ScoredSet, recall_floor: float = 0.9) -> float:
    """Lowest false-positive rate among thresholds reaching the recall floor."""
    if s.n_pos == 0 or s.n_neg == 0:
        raise UndefinedMetricError("needs at least one of each class")
    tp, fp = _sweep(s)
    feasible = tp / s.n_pos >= recall_floor
    return float((fp[feasible] / s.n_neg).min())


def compute_all(s: ScoredSet) -> dict[str, float]:
    return {
        "pr_auc": pr_auc(s),
        "f1": f1_best(s),
        "recall_at_0.1fpr": recall_at_fpr(s),
        "fpr_at_0.9recall": fpr_at_recall(s),
    }
