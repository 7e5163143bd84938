"""Evaluation metrics: concordance index and macro-averaged one-vs-rest AUC."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = ["EvalReport", "c_index", "macro_auc"]


def c_index(risks, times, events) -> float:
    """Harrell concordance index over all comparable ordered pairs.

    Pair (i, j) is comparable when patient i has the event and either
    T_i < T_j, or T_i == T_j with both patients having the event (counted in
    both directions).  Concordance means the higher risk got the earlier
    event; tied risks earn half credit.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    n = len(risks)
    if times.shape != (n,) or events.shape != (n,):
        raise ValueError("risks, times and events must be aligned 1-D arrays")
    later = times[None, :] > times[:, None]
    tied_time = times[None, :] == times[:, None]
    both_events = events[:, None] & events[None, :]
    comparable = events[:, None] & (later | (tied_time & both_events))
    np.fill_diagonal(comparable, False)
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise ValueError("no comparable pairs")
    higher = risks[:, None] > risks[None, :]
    tied_risk = risks[:, None] == risks[None, :]
    credit = (comparable & higher).sum() + 0.5 * (comparable & tied_risk).sum()
    return float(credit / n_comparable)


def macro_auc(scores, labels) -> float:
    """Unweighted mean of per-class one-vs-rest AUCs.

    Each class AUC comes from the rank-sum (Mann-Whitney) statistic with
    average ranks, which handles score ties exactly.  Classes missing from
    ``labels`` are skipped with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be (N, C), got shape {scores.shape}")
    n, n_classes = scores.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label outside [0, {n_classes})")
    aucs = []
    skipped = []
    for c in range(n_classes):
        positive = labels == c
        n_pos = int(positive.sum())
        n_neg = n - n_pos
        if n_pos == 0 or n_neg == 0:
            skipped.append(c)
            continue
        ranks = _average_ranks(scores[:, c])
        u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
        aucs.append(u / (n_pos * n_neg))
    if skipped:
        warnings.warn(
            f"macro_auc: skipped classes without both positives and negatives: {skipped}",
            stacklevel=2,
        )
    if not aucs:
        raise ValueError("no class had both positive and negative samples")
    return float(np.mean(aucs))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = np.arange(1, len(values) + 1, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    return ranks


@dataclass
class EvalReport:
    """A metric with its per-fold values and cross-repeat spread."""

    metric: str
    value: float
    per_fold: list[float] = field(default_factory=list)
    mean: float = float("nan")
    sd: float = float("nan")

    @staticmethod
    def from_folds(metric: str, per_fold: list[float]) -> "EvalReport":
        arr = np.asarray(per_fold, dtype=np.float64)
        return EvalReport(
            metric=metric,
            value=float(arr.mean()),
            per_fold=[float(v) for v in per_fold],
            mean=float(arr.mean()),
            sd=float(arr.std(ddof=0)),
        )

    @staticmethod
    def single(metric: str, value: float) -> "EvalReport":
        return EvalReport(metric=metric, value=value, per_fold=[value], mean=value, sd=0.0)

    def to_json(self) -> str:
        return json.dumps(
            {
                "metric": self.metric,
                "value": self.value,
                "per_fold": self.per_fold,
                "mean": self.mean,
                "sd": self.sd,
            },
            indent=2,
            sort_keys=True,
        )

    def to_tsv(self) -> str:
        lines = ["field\tvalue"]
        lines.append(f"metric\t{self.metric}")
        lines.append(f"value\t{self.value!r}")
        lines.append(f"mean\t{self.mean!r}")
        lines.append(f"sd\t{self.sd!r}")
        for i, v in enumerate(self.per_fold):
            lines.append(f"fold{i}\t{v!r}")
        return "\n".join(lines) + "\n"
