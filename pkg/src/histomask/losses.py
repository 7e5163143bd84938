"""Training objectives: patch restoration, Cox partial likelihood, cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc

__all__ = [
    "RestorationTerms",
    "cox_loss",
    "cross_entropy",
    "restoration_loss",
]

DEFAULT_ALPHA = 2.0
DEFAULT_BETA = 1.0
DEFAULT_TAU = 0.1


@dataclass(frozen=True)
class RestorationTerms:
    """Per-component breakdown for logging (plain floats)."""

    l2: float
    contrastive: float
    total: float


def restoration_loss(
    outputs: nc.Tensor,
    targets: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    tau: float = DEFAULT_TAU,
    score_mode: str = "negated",
) -> tuple[nc.Tensor, RestorationTerms]:
    """Restoration objective over a mixed list of k masked patches.

    Per instance i: alpha * ||x_i - y_i|| plus beta times a temperature-tau
    contrastive term that softmaxes a score of y_i against every target x_j
    and penalizes the log-probability of the matching j = i.  The result is
    the mean over the k instances.

    ``score_mode`` picks the pairwise score: "negated" (default) scores by
    the negated distance -||x_j - y_i||, the direction in which both terms
    pull matching pairs together; "literal" scores by +||x_j - y_i||, which
    instead rewards far-apart pairs and is kept selectable for comparison
    runs.
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    if alpha < 0.0 or beta < 0.0:
        raise ValueError("loss weights must be nonnegative")
    if score_mode not in ("negated", "literal"):
        raise ValueError(f"unknown score_mode '{score_mode}'")
    k, d = outputs.shape
    if k < 1:
        raise ValueError("restoration batch is empty")
    x = np.asarray(targets, dtype=np.float64)
    if x.shape != (k, d):
        raise ValueError(f"targets shape {x.shape} != outputs shape {(k, d)}")

    # dist[i, j] = ||x_j - y_i||
    dist = nc.pairwise_euclidean(outputs, x)
    eye = nc.constant(np.eye(k))
    l2_mean = (dist * eye).sum() * nc.constant(1.0 / k)

    sign = -1.0 if score_mode == "negated" else 1.0
    scores = dist * nc.constant(sign / tau)
    row_max = nc.constant(scores.data.max(axis=1, keepdims=True))
    lse = nc.log(nc.exp(scores - row_max).sum(axis=1, keepdims=True)) + row_max
    log_probs = scores - lse
    contrastive_mean = -(log_probs * eye).sum() * nc.constant(1.0 / k)

    total = nc.constant(alpha) * l2_mean + nc.constant(beta) * contrastive_mean
    terms = RestorationTerms(
        l2=float(l2_mean.data),
        contrastive=float(contrastive_mean.data),
        total=float(total.data),
    )
    return total, terms


def cox_loss(
    risks: nc.Tensor,
    times: np.ndarray,
    events: np.ndarray,
) -> nc.Tensor:
    """Negative log Cox partial likelihood, averaged over events.

    Risk sets include ties (every j with T_j >= T_i).  The log-sum-exp over
    each risk set is stabilized by subtracting the risk-set maximum, and
    out-of-set entries are suppressed with a -1e5 additive bias that
    underflows to an exactly-zero exp term.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    n = risks.shape[0]
    if risks.shape != (n,) or times.shape != (n,) or events.shape != (n,):
        raise ValueError("risks, times and events must be aligned 1-D arrays")
    event_idx = np.nonzero(events)[0]
    if len(event_idx) == 0:
        raise ValueError("Cox loss needs at least one event")
    in_risk_set = times[None, :] >= times[event_idx, None]
    suppress = np.where(in_risk_set, 0.0, -1.0e5)
    set_max = np.where(in_risk_set, risks.data[None, :], -np.inf).max(axis=1, keepdims=True)

    shifted = risks.reshape(1, n) + nc.constant(suppress - set_max)
    lse = nc.log(nc.exp(shifted).sum(axis=1)) + nc.constant(set_max[:, 0])
    event_risks = nc.take(risks, event_idx)
    return (lse - event_risks).sum() * nc.constant(1.0 / len(event_idx))


def cross_entropy(logits: nc.Tensor, labels: np.ndarray) -> nc.Tensor:
    """Mean negative log softmax probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label outside [0, {c})")
    row_max = nc.constant(logits.data.max(axis=1, keepdims=True))
    lse = nc.log(nc.exp(logits - row_max).sum(axis=1, keepdims=True)) + row_max
    log_probs = logits - lse
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return -(log_probs * nc.constant(onehot)).sum() * nc.constant(1.0 / n)
