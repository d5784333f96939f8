"""Distances between branch predictions and the consistency regularizers.

Two regularizer shapes are provided over a list of branch outputs:

* ``ensemble_consistency`` — mean distance from each branch's prediction
  to the prediction of the weighted logits ensemble;
* ``pairwise_consistency`` — mean distance over all unordered branch
  pairs.

Both are built from tensor operations, so they are differentiable and
their gradients are checked against finite differences in the tests.
The symmetric-KL path works on log-probabilities internally (always
finite); the standalone :func:`symmetric_kl` is the plain numeric metric
with explicit zero-probability handling.

For two branches with equal weights and the squared-Euclidean metric the
pairwise form is exactly 4x the ensemble form: each branch's ensemble
residual is half the pair difference, so each of the two ensemble terms
contributes a quarter of the squared pair distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, SpecError
from .tensor import Tensor, log_softmax, softmax

__all__ = [
    "ConsistencySpec",
    "symmetric_kl",
    "ensemble_distribution",
    "output_distance",
    "ensemble_consistency",
    "pairwise_consistency",
    "consistency_loss",
]

METRICS = ("symmetric_kl", "squared_euclidean")
KINDS = ("none", "ensemble", "pairwise")

#: a numerically-zero softmax output is clamped to this before log ratios
KL_CLAMP = 1e-12


@dataclass(frozen=True)
class ConsistencySpec:
    """Regularizer family, distance metric, and ensemble weighting.

    ``weights`` are the per-branch ensemble weights (None means uniform
    1/m); ``detach_target`` holds the ensemble prediction constant so no
    gradient flows into the target, the usual teacher convention.
    """

    kind: str = "ensemble"
    metric: str = "symmetric_kl"
    weights: tuple[float, ...] | None = None
    detach_target: bool = True

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind: unknown value {self.kind!r}")
        if self.metric not in METRICS:
            problems.append(f"metric: unknown value {self.metric!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0.0):
                problems.append("weights: must be nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                problems.append(f"weights: must sum to 1, got {w.sum()!r}")
        return problems

    def check(self) -> "ConsistencySpec":
        problems = self.validate()
        if problems:
            raise SpecError("; ".join(problems))
        return self


def symmetric_kl(p, q) -> float:
    """0.5 * (KL(p||q) + KL(q||p)) for two discrete distributions.

    Terms where the numerator probability is 0 contribute nothing; a
    zero denominator under a positive numerator is clamped to 1e-12.
    """
    p = np.asarray(getattr(p, "data", p), dtype=np.float64)
    q = np.asarray(getattr(q, "data", q), dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractError(
            f"symmetric_kl: need two equal-length distributions, got {p.shape} and {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < 0.0):
            raise ContractError(f"symmetric_kl: {name} has negative entries")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise ContractError(f"symmetric_kl: {name} sums to {dist.sum()!r}, not 1")

    def one_sided(a: np.ndarray, b: np.ndarray) -> float:
        mask = a > 0.0
        return float(np.sum(a[mask] * np.log(a[mask] / np.maximum(b[mask], KL_CLAMP))))

    return 0.5 * (one_sided(p, q) + one_sided(q, p))


def _weighted_logits(logits_list: list[Tensor], weights) -> Tensor:
    combined = logits_list[0] * float(weights[0])
    for g, w in zip(logits_list[1:], weights[1:]):
        combined = combined + g * float(w)
    return combined


def _resolve_weights(m: int, weights) -> np.ndarray:
    if weights is None:
        return np.full(m, 1.0 / m)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (m,):
        raise ContractError(f"weights: expected {m} entries, got shape {w.shape}")
    if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
        raise SpecError(f"weights: need nonnegative entries summing to 1, got {w.tolist()}")
    return w


def _check_same_shape(logits_list: list[Tensor], op: str) -> None:
    shape = logits_list[0].shape
    for g in logits_list[1:]:
        if g.shape != shape:
            raise ContractError(f"{op}: branch output shapes differ: {shape} vs {g.shape}")


def ensemble_distribution(logits_list: list[Tensor], weights=None) -> Tensor:
    """Softmax of the weighted sum of branch logits."""
    if not logits_list:
        raise ContractError("ensemble_distribution: need at least one branch")
    _check_same_shape(logits_list, "ensemble_distribution")
    w = _resolve_weights(len(logits_list), weights)
    return softmax(_weighted_logits(logits_list, w), axis=-1)


def _rows(t: Tensor) -> float:
    return float(t.shape[0]) if t.ndim == 2 else 1.0


def output_distance(a: Tensor, b: Tensor, metric: str = "symmetric_kl") -> Tensor:
    """Distance between two branch outputs, averaged over batch rows.

    ``symmetric_kl`` treats the inputs as logits of distributions along
    the last axis; ``squared_euclidean`` acts on the raw outputs.
    """
    if a.shape != b.shape:
        raise ContractError(f"output_distance: shapes differ: {a.shape} vs {b.shape}")
    scale = 1.0 / _rows(a)
    if metric == "squared_euclidean":
        diff = a - b
        return (diff * diff).sum() * scale
    if metric == "symmetric_kl":
        pa, la = softmax(a, axis=-1), log_softmax(a, axis=-1)
        pb, lb = softmax(b, axis=-1), log_softmax(b, axis=-1)
        forward = (pa * (la - lb)).sum()
        reverse = (pb * (lb - la)).sum()
        return (forward + reverse) * (0.5 * scale)
    raise SpecError(f"unknown metric {metric!r}")


def ensemble_consistency(logits_list: list[Tensor], weights=None,
                         metric: str = "symmetric_kl",
                         detach_target: bool = True) -> Tensor:
    """Mean distance of each branch's output to the ensemble's.

    The ensemble target is formed from the weighted logits sum; with
    ``detach_target`` it is held constant, so only the branch side of
    each distance carries gradient.
    """
    m = len(logits_list)
    if m == 0:
        raise ContractError("ensemble_consistency: need at least one branch")
    _check_same_shape(logits_list, "ensemble_consistency")
    if m == 1:
        return Tensor(0.0)  # the ensemble is the single branch
    w = _resolve_weights(m, weights)
    source = [g.detach() for g in logits_list] if detach_target else logits_list
    target = _weighted_logits(source, w)
    total = output_distance(logits_list[0], target, metric)
    for g in logits_list[1:]:
        total = total + output_distance(g, target, metric)
    return total * (1.0 / m)


def pairwise_consistency(logits_list: list[Tensor],
                         metric: str = "symmetric_kl") -> Tensor:
    """Mean distance over all unordered pairs of branch outputs."""
    m = len(logits_list)
    if m < 2:
        raise ContractError(f"pairwise_consistency: need at least 2 branches, got {m}")
    _check_same_shape(logits_list, "pairwise_consistency")
    total = None
    for j in range(m):
        for k in range(j + 1, m):
            d = output_distance(logits_list[j], logits_list[k], metric)
            total = d if total is None else total + d
    return total * (2.0 / (m * (m - 1)))


def consistency_loss(logits_list: list[Tensor], spec: ConsistencySpec,
                     task: str = "classification") -> Tensor:
    """Dispatch on the spec's regularizer kind; zero for kind='none'."""
    spec.check()
    metric = spec.metric
    if task == "regression" and metric == "symmetric_kl":
        raise ContractError("symmetric_kl needs distributions; regression outputs "
                            "are scalars — use squared_euclidean")
    if spec.kind == "none":
        return Tensor(0.0)
    if spec.kind == "ensemble":
        return ensemble_consistency(logits_list, weights=spec.weights, metric=metric,
                                    detach_target=spec.detach_target)
    return pairwise_consistency(logits_list, metric=metric)
