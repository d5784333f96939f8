"""Inference-time logits ensembling.

A weight-shared model is predicted with exactly one trunk evaluation —
the heads fan out from the same trunk output — and the branch logits are
averaged with equal weights (gate-weighted averaging can be requested
explicitly for the gated baseline). Perturbations are never applied at
inference; there is no switch for that.

Independent-model ensembles run one full forward per model instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import EnsembleModel
from .tensor import Tensor, no_grad


@dataclass
class EnsemblePrediction:
    """Per-branch logits plus their weighted aggregate.

    ``distribution`` and ``labels`` are filled for classification,
    ``values`` (the raw scalar outputs) for regression.
    """

    branch_logits: list[np.ndarray]
    ensemble_logits: np.ndarray
    distribution: np.ndarray | None
    labels: np.ndarray | None
    values: np.ndarray | None


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _finish(branch_logits: list[np.ndarray], weights, task: str) -> EnsemblePrediction:
    m = len(branch_logits)
    if weights is None:
        weights = np.full(m, 1.0 / m)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (m,):
            raise ContractError(f"weights: expected {m} entries, got {weights.shape}")
    ensemble_logits = sum(w * g for w, g in zip(weights, branch_logits))
    if task == "classification":
        return EnsemblePrediction(
            branch_logits=branch_logits,
            ensemble_logits=ensemble_logits,
            distribution=_stable_softmax(ensemble_logits),
            labels=ensemble_logits.argmax(axis=-1),
            values=None,
        )
    return EnsemblePrediction(
        branch_logits=branch_logits,
        ensemble_logits=ensemble_logits,
        distribution=None,
        labels=None,
        values=ensemble_logits[:, 0],
    )


def predict(model: EnsembleModel, x, weights=None) -> EnsemblePrediction:
    """Unperturbed prediction with a single trunk pass.

    The trunk output is computed once and reused by every head, which is
    what makes an m-branch ensemble barely more expensive than a single
    model at inference.
    """
    with no_grad():
        h = model.trunk_forward(x if isinstance(x, Tensor) else Tensor(x))
        branch_logits = [model.head_forward(j, h).data
                         for j in range(1, model.num_branches + 1)]
    return _finish(branch_logits, weights, model.spec.task)


def predict_multi(models: list[EnsembleModel], x) -> EnsemblePrediction:
    """Average the (already ensembled) logits of independent models."""
    if not models:
        raise ContractError("predict_multi: empty model list")
    task = models[0].spec.task
    per_model = [predict(m, x).ensemble_logits for m in models]
    return _finish(per_model, None, task)
