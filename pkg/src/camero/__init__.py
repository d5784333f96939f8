"""camero: consistency-regularized ensembles of weight-shared, perturbed networks.

A desk-scale toolkit for training a multi-branch network whose bottom
layers are physically shared while each branch sees its own random
perturbation of the hidden representations, with a consistency
regularizer pulling the branch predictions back together. Ships the
collaborative-distillation baselines (vanilla, dml, kdcl, one), an
autograd substrate, synthetic datasets, diagnostics, and a config-driven
experiment CLI.
"""

from .tensor import Tensor, finite_diff_gradient, no_grad
from .model import EnsembleModel, ModelSpec, PerturbationSet
from .perturb import PerturbationSpec
from .consistency import (
    ConsistencySpec,
    ensemble_consistency,
    ensemble_distribution,
    pairwise_consistency,
    symmetric_kl,
)
from .train import TrainConfig, RunReport, run_training
from .ensemble import EnsemblePrediction, predict, predict_multi

__all__ = [
    "Tensor",
    "no_grad",
    "finite_diff_gradient",
    "ModelSpec",
    "EnsembleModel",
    "PerturbationSet",
    "PerturbationSpec",
    "ConsistencySpec",
    "symmetric_kl",
    "ensemble_distribution",
    "ensemble_consistency",
    "pairwise_consistency",
    "TrainConfig",
    "RunReport",
    "run_training",
    "EnsemblePrediction",
    "predict",
    "predict_multi",
]

__version__ = "0.1.0"
