"""Diversity and variance diagnostics.

* branch prediction-similarity matrices (pairwise argmax agreement, with
  a cosine-on-logits variant as a secondary view);
* across-seed summaries of final ensemble metrics;
* the consistency-loss trace of a run, optionally smoothed — with fixed
  perturbations, a persistently larger trace means more diverse branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

__all__ = [
    "prediction_similarity",
    "cosine_similarity",
    "SeedSummary",
    "seed_variance",
    "diversity_trace",
]


def prediction_similarity(branch_predictions) -> np.ndarray:
    """m x m matrix of pairwise label-agreement fractions.

    Entry (i, j) is the fraction of samples where branches i and j
    predict the same label; symmetric with a unit diagonal.
    """
    preds = [np.asarray(p) for p in branch_predictions]
    if len(preds) < 2:
        raise ContractError(f"prediction_similarity: need >= 2 branches, got {len(preds)}")
    length = len(preds[0])
    if any(len(p) != length for p in preds):
        raise ContractError("prediction_similarity: label vectors differ in length")
    m = len(preds)
    sim = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            sim[i, j] = sim[j, i] = float(np.mean(preds[i] == preds[j]))
    return sim


def cosine_similarity(branch_logits) -> np.ndarray:
    """Secondary view: mean per-sample cosine similarity of raw logits."""
    logits = [np.asarray(g, dtype=np.float64) for g in branch_logits]
    if len(logits) < 2:
        raise ContractError(f"cosine_similarity: need >= 2 branches, got {len(logits)}")
    m = len(logits)
    sim = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            a, b = logits[i], logits[j]
            denom = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
            denom = np.where(denom == 0.0, 1.0, denom)
            sim[i, j] = sim[j, i] = float(np.mean((a * b).sum(axis=-1) / denom))
    return sim


@dataclass
class SeedSummary:
    """Dispersion of the final ensemble metric across seeds."""

    seeds: list[int]
    metrics: list[float]
    mean: float
    std: float  # sample standard deviation (n-1 denominator)
    min: float
    max: float


def seed_variance(reports) -> SeedSummary:
    """Summarize runs that differ only in their seed.

    Reports must share an identical configuration echo; anything else is
    an apples-to-oranges comparison and is rejected.
    """
    reports = list(reports)
    if len(reports) < 2:
        raise ContractError(f"seed_variance: need >= 2 reports, got {len(reports)}")
    reference = reports[0].config
    for r in reports[1:]:
        if r.config != reference:
            raise ContractError("seed_variance: reports have differing configs")
    metrics = [r.final_metric for r in reports]
    values = np.asarray(metrics, dtype=np.float64)
    return SeedSummary(
        seeds=[r.seed for r in reports],
        metrics=metrics,
        mean=float(values.mean()),
        std=float(values.std(ddof=1)),
        min=float(values.min()),
        max=float(values.max()),
    )


def diversity_trace(report, smooth_window: int | None = None):
    """(step, consistency_loss) series of a run.

    The trace reflects the raw regularizer value (it is logged before
    the alpha weighting). ``smooth_window`` applies a trailing mean of
    that many steps; 10 is a reasonable default for plots.
    """
    if not report.steps:
        raise ContractError("diversity_trace: report has no logged steps")
    steps = np.array([s.step for s in report.steps])
    values = np.array([s.consistency_loss for s in report.steps])
    if smooth_window is not None:
        if smooth_window < 1:
            raise ContractError(f"diversity_trace: bad window {smooth_window}")
        smoothed = np.empty_like(values)
        for i in range(len(values)):
            smoothed[i] = values[max(0, i + 1 - smooth_window):i + 1].mean()
        values = smoothed
    return steps, values
