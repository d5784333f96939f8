"""Optimizers and the five training procedures.

``camero`` trains one weight-shared multi-branch model: every branch
sees its own perturbation draw, the task loss is the branch average, and
a consistency regularizer weighted by ``alpha`` pulls the branch
predictions together. One backward pass covers trunk and heads, so the
trunk gradient is the sum of all branch contributions.

The baselines:

* ``vanilla`` — m fully independent networks, each trained on its own
  task loss, no coupling;
* ``dml`` — exactly two independent networks with alternating updates,
  each regularized toward the other's (frozen) prediction;
* ``kdcl`` — m independent networks trained jointly, each regularized
  toward their frozen logits ensemble;
* ``one`` — a weight-shared model with a learnable gate per branch; the
  gated logits ensemble acts as a teacher that both distills into the
  branches and receives its own supervised loss (through which the
  gates get their gradient). All branches share one perturbation draw.

Distillation targets are detached by default (``consistency.detach_target``);
vanilla, dml and kdcl ignore the perturbation spec — per-branch
perturbation is what distinguishes camero.

The logged step records always satisfy total = task + alpha * consistency
exactly, because the graph is assembled in that same order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
import json

import numpy as np

from .consistency import ConsistencySpec, consistency_loss, output_distance
from .data import Dataset
from .ensemble import predict, predict_multi
from .errors import ContractError, DataError, NumericError, SpecError
from .metrics import prediction_similarity
from .model import EnsembleModel, ModelSpec, parameter_counts
from .perturb import PerturbationSpec
from .tensor import Tensor, log_softmax, no_grad, softmax

__all__ = [
    "TrainConfig",
    "StepRecord",
    "EvalRecord",
    "RunReport",
    "SGD",
    "Adam",
    "Adamax",
    "make_optimizer",
    "cross_entropy",
    "squared_error",
    "build_method",
    "run_training",
]

METHODS = ("camero", "vanilla", "dml", "kdcl", "one")
OPTIMIZERS = ("sgd", "adam", "adamax")

# rng stream tags so shuffling and perturbation sampling never collide
_SHUFFLE_STREAM = 1
_STEP_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    method: str = "camero"
    optimizer: str = "adam"
    learning_rate: float = 0.01
    betas: tuple[float, float] | None = None
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    alpha: float = 1.0
    eval_every: int = 50
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    consistency: ConsistencySpec = field(default_factory=ConsistencySpec)

    def validate(self) -> list[str]:
        problems = []
        if self.method not in METHODS:
            problems.append(f"method: unknown value {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"optimizer: unknown value {self.optimizer!r}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate: must be positive, got {self.learning_rate}")
        if self.betas is not None and not (len(self.betas) == 2
                                           and all(0.0 <= b < 1.0 for b in self.betas)):
            problems.append(f"betas: need two values in [0, 1), got {self.betas}")
        if self.epochs < 1:
            problems.append(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            problems.append(f"seed: must be nonnegative, got {self.seed}")
        if self.alpha < 0:
            problems.append(f"alpha: must be nonnegative, got {self.alpha}")
        if self.eval_every < 1:
            problems.append(f"eval_every: must be >= 1, got {self.eval_every}")
        problems += [f"perturbation.{p}" for p in self.perturbation.validate()]
        problems += [f"consistency.{p}" for p in self.consistency.validate()]
        return problems


# -- optimizers ----------------------------------------------------------------

_DEFAULT_BETAS = {"adam": (0.9, 0.98), "adamax": (0.9, 0.999)}
_EPS = 1e-8


def _checked_grad(p: Tensor) -> np.ndarray | None:
    if p.grad is None:
        return None
    if not np.isfinite(p.grad).all():
        raise NumericError("non-finite gradient")
    return p.grad


class SGD:
    def __init__(self, params: list[Tensor], lr: float, betas=None):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            g = _checked_grad(p)
            if g is not None:
                p.data = p.data - self.lr * g


class Adam:
    """Standard Adam with bias correction on both moments."""

    def __init__(self, params: list[Tensor], lr: float, betas=None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas or _DEFAULT_BETAS["adam"]
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = _checked_grad(p)
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + _EPS)


class Adamax:
    """Adam's infinity-norm variant: second moment is a running max.

    Only the first moment needs bias correction; the first step from a
    zero state therefore moves each coordinate by lr * sign(g), up to
    the epsilon guard in the denominator.
    """

    def __init__(self, params: list[Tensor], lr: float, betas=None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas or _DEFAULT_BETAS["adamax"]
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.u = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        for i, p in enumerate(self.params):
            g = _checked_grad(p)
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.u[i] = np.maximum(self.beta2 * self.u[i], np.abs(g))
            p.data = p.data - (self.lr / c1) * self.m[i] / (self.u[i] + _EPS)


def make_optimizer(name: str, params: list[Tensor], lr: float, betas=None):
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr, betas)
    if name == "adamax":
        return Adamax(params, lr, betas)
    raise SpecError(f"unknown optimizer {name!r}")


# -- task losses ---------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels."""
    n, classes = logits.shape
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), np.asarray(labels, dtype=int)] = 1.0
    return (Tensor(-onehot) * log_softmax(logits, axis=-1)).sum() * (1.0 / n)


def squared_error(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared error of (n, 1) predictions against n scalars."""
    n = pred.shape[0]
    diff = pred - Tensor(np.asarray(targets, dtype=np.float64).reshape(n, 1))
    return (diff * diff).sum() * (1.0 / n)


def task_loss(logits: Tensor, targets: np.ndarray, task: str) -> Tensor:
    if task == "classification":
        return cross_entropy(logits, targets)
    return squared_error(logits, targets)


def _mean_losses(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses))


def _branch_metric(logits: np.ndarray, targets: np.ndarray, task: str) -> float:
    if task == "classification":
        return float(np.mean(logits.argmax(axis=-1) == targets))
    return float(np.mean((logits[:, 0] - targets) ** 2))


# -- the five methods ----------------------------------------------------------

class _MethodBase:
    """Shared evaluation plumbing; subclasses implement ``step``."""

    task: str

    def step(self, x: np.ndarray, y: np.ndarray,
             rng: np.random.Generator) -> tuple[float, float, float]:
        raise NotImplementedError

    def _prediction(self, x: np.ndarray):
        raise NotImplementedError

    def evaluate(self, x: np.ndarray, y: np.ndarray):
        """Per-branch and ensemble metrics, plus branch label vectors."""
        pred = self._prediction(x)
        branch = [_branch_metric(g, y, self.task) for g in pred.branch_logits]
        ens = _branch_metric(pred.ensemble_logits, y, self.task)
        labels = [g.argmax(axis=-1) for g in pred.branch_logits] \
            if self.task == "classification" else None
        return branch, ens, labels


class CameroMethod(_MethodBase):
    def __init__(self, spec: ModelSpec, cfg: TrainConfig):
        self.cfg = cfg
        self.task = spec.task
        self.model = EnsembleModel.build(spec, cfg.seed)
        self.opt = make_optimizer(cfg.optimizer, self.model.parameters(),
                                  cfg.learning_rate, cfg.betas)

    def step(self, x, y, rng):
        cfg = self.cfg
        self.model.zero_grad()
        logits, _ = self.model.forward_all(x, cfg.perturbation, rng)
        loss_task = _mean_losses([task_loss(g, y, self.task) for g in logits])
        loss_cons = consistency_loss(logits, cfg.consistency, task=self.task)
        total = loss_task if cfg.alpha == 0 else loss_task + loss_cons * cfg.alpha
        total.backward()
        self.opt.step()
        task_v, cons_v = loss_task.item(), loss_cons.item()
        return task_v, cons_v, task_v + cfg.alpha * cons_v

    def _prediction(self, x):
        return predict(self.model, x)


class _IndependentBase(_MethodBase):
    """m separate single-branch networks (share_depth 0)."""

    def __init__(self, spec: ModelSpec, cfg: TrainConfig):
        self.cfg = cfg
        self.task = spec.task
        single = ModelSpec(layer_dims=spec.layer_dims, num_branches=1,
                           share_depth=0, activation=spec.activation, task=spec.task)
        self.models = [EnsembleModel.build(single, cfg.seed + j)
                       for j in range(1, spec.num_branches + 1)]

    def _zero_all(self):
        for m in self.models:
            m.zero_grad()

    def _prediction(self, x):
        return predict_multi(self.models, x)


class VanillaMethod(_IndependentBase):
    def __init__(self, spec, cfg):
        super().__init__(spec, cfg)
        params = [p for m in self.models for p in m.parameters()]
        self.opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate, cfg.betas)

    def step(self, x, y, rng):
        self._zero_all()
        losses = [task_loss(m.forward_branch(1, x), y, self.task) for m in self.models]
        # each network descends its own unscaled loss; their graphs are disjoint
        combined = losses[0]
        for loss in losses[1:]:
            combined = combined + loss
        combined.backward()
        self.opt.step()
        task_v = float(np.mean([loss.item() for loss in losses]))
        return task_v, 0.0, task_v


class DmlMethod(_IndependentBase):
    """Two networks, alternating updates against each other's frozen output."""

    def __init__(self, spec, cfg):
        if spec.num_branches != 2:
            raise SpecError(f"dml needs exactly 2 models, got {spec.num_branches}")
        super().__init__(spec, cfg)
        self.opts = [make_optimizer(cfg.optimizer, m.parameters(),
                                    cfg.learning_rate, cfg.betas)
                     for m in self.models]

    def _half_step(self, learner, peer, opt, x, y):
        cfg = self.cfg
        learner.zero_grad()
        with no_grad():
            peer_logits = peer.forward_branch(1, x)
        logits = learner.forward_branch(1, x)
        loss = task_loss(logits, y, self.task)
        dist = output_distance(logits, peer_logits, cfg.consistency.metric)
        total = loss if cfg.alpha == 0 else loss + dist * cfg.alpha
        total.backward()
        opt.step()
        return loss.item(), dist.item()

    def step(self, x, y, rng):
        l1, d1 = self._half_step(self.models[0], self.models[1], self.opts[0], x, y)
        # the second model distills from the just-updated first model
        l2, d2 = self._half_step(self.models[1], self.models[0], self.opts[1], x, y)
        task_v, cons_v = 0.5 * (l1 + l2), 0.5 * (d1 + d2)
        return task_v, cons_v, task_v + self.cfg.alpha * cons_v


class KdclMethod(_IndependentBase):
    """Independent networks jointly regularized toward their ensemble."""

    def __init__(self, spec, cfg):
        if spec.num_branches < 2:
            raise SpecError(f"kdcl needs at least 2 models, got {spec.num_branches}")
        super().__init__(spec, cfg)
        params = [p for m in self.models for p in m.parameters()]
        self.opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate, cfg.betas)

    def step(self, x, y, rng):
        cfg = self.cfg
        self._zero_all()
        logits = [m.forward_branch(1, x) for m in self.models]
        loss_task = _mean_losses([task_loss(g, y, self.task) for g in logits])
        loss_cons = consistency_loss(logits, cfg.consistency, task=self.task)
        total = loss_task if cfg.alpha == 0 else loss_task + loss_cons * cfg.alpha
        total.backward()
        self.opt.step()
        task_v, cons_v = loss_task.item(), loss_cons.item()
        return task_v, cons_v, task_v + cfg.alpha * cons_v


class OneMethod(_MethodBase):
    """Weight-shared branches under a gated, self-supervised teacher."""

    def __init__(self, spec: ModelSpec, cfg: TrainConfig):
        self.cfg = cfg
        self.task = spec.task
        self.model = EnsembleModel.build(spec, cfg.seed)
        self.gates = Tensor(np.zeros(spec.num_branches), requires_grad=True)
        self.opt = make_optimizer(cfg.optimizer,
                                  self.model.parameters() + [self.gates],
                                  cfg.learning_rate, cfg.betas)

    def gate_weights(self) -> np.ndarray:
        with no_grad():
            return softmax(self.gates, axis=-1).data

    def _teacher_logits(self, logits: list[Tensor]) -> Tensor:
        w = softmax(self.gates, axis=-1)
        m = len(logits)
        teacher = None
        for j, g in enumerate(logits):
            onehot = np.zeros(m)
            onehot[j] = 1.0
            w_j = (w * Tensor(onehot)).sum()
            term = g * w_j
            teacher = term if teacher is None else teacher + term
        return teacher

    def step(self, x, y, rng):
        cfg = self.cfg
        self.model.zero_grad()
        self.gates.zero_grad()
        # one shared perturbation draw: branch diversity comes from heads only
        logits, _ = self.model.forward_all(x, cfg.perturbation, rng,
                                           shared_perturbation=True)
        loss_branches = _mean_losses([task_loss(g, y, self.task) for g in logits])
        teacher = self._teacher_logits(logits)
        loss_teacher = task_loss(teacher, y, self.task)
        target = teacher.detach()
        dists = [output_distance(g, target, cfg.consistency.metric) for g in logits]
        loss_cons = _mean_losses(dists)
        loss_task = loss_branches + loss_teacher
        total = loss_task if cfg.alpha == 0 else loss_task + loss_cons * cfg.alpha
        total.backward()
        self.opt.step()
        task_v, cons_v = loss_task.item(), loss_cons.item()
        return task_v, cons_v, task_v + cfg.alpha * cons_v

    def _prediction(self, x):
        # evaluation stays an equal-weight logits average; the learned
        # gates are exposed separately via gate_weights()
        return predict(self.model, x)


def build_method(spec: ModelSpec, cfg: TrainConfig) -> _MethodBase:
    classes = {
        "camero": CameroMethod,
        "vanilla": VanillaMethod,
        "dml": DmlMethod,
        "kdcl": KdclMethod,
        "one": OneMethod,
    }
    if cfg.method not in classes:
        raise SpecError(f"unknown method {cfg.method!r}")
    return classes[cfg.method](spec, cfg)


# -- run orchestration -----------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    task_loss: float
    consistency_loss: float
    total_loss: float


@dataclass
class EvalRecord:
    step: int
    branch_metrics: list[float]
    ensemble_metric: float


@dataclass
class RunReport:
    """Everything a single training run produced.

    ``config`` echoes the run's full configuration (minus the seed, kept
    in its own field) so reports can be grouped by identical setup.
    """

    method: str
    seed: int
    metric_name: str
    parameter_count: int
    config: dict
    steps: list[StepRecord]
    evals: list[EvalRecord]
    similarity: list[list[float]] | None
    final_metric: float
    wall_clock_seconds: float

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "metric_name": self.metric_name,
            "parameter_count": self.parameter_count,
            "config": self.config,
            "steps": [[s.step, s.task_loss, s.consistency_loss, s.total_loss]
                      for s in self.steps],
            "evals": [[e.step, e.branch_metrics, e.ensemble_metric]
                      for e in self.evals],
            "similarity": self.similarity,
            "final_metric": self.final_metric,
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            method=d["method"],
            seed=d["seed"],
            metric_name=d["metric_name"],
            parameter_count=d["parameter_count"],
            config=d["config"],
            steps=[StepRecord(*row) for row in d["steps"]],
            evals=[EvalRecord(row[0], list(row[1]), row[2]) for row in d["evals"]],
            similarity=d["similarity"],
            final_metric=d["final_metric"],
            wall_clock_seconds=d["wall_clock_seconds"],
        )


def _config_echo(spec: ModelSpec, cfg: TrainConfig, dataset: Dataset) -> dict:
    train = asdict(cfg)
    train.pop("seed")
    echo = {
        "model": asdict(spec),
        "train": train,
        "dataset": dict(dataset.metadata),
    }
    # normalize tuples to lists so echoes compare equal across json trips
    return json.loads(json.dumps(echo))


def _cross_validate(spec: ModelSpec, cfg: TrainConfig, dataset: Dataset) -> list[str]:
    problems = cfg.validate()
    if cfg.method == "dml" and spec.num_branches != 2:
        problems.append(f"method: dml needs num_branches == 2, got {spec.num_branches}")
    if cfg.method == "kdcl" and spec.num_branches < 2:
        problems.append(f"method: kdcl needs num_branches >= 2, got {spec.num_branches}")
    task = dataset.metadata.get("task")
    if task is not None and task != spec.task:
        problems.append(f"task: model is {spec.task!r} but dataset is {task!r}")
    if spec.task == "classification":
        n_classes = int(np.max(dataset.targets)) + 1 if len(dataset.targets) else 0
        if spec.output_dim < n_classes:
            problems.append(f"layer_dims: output dim {spec.output_dim} < "
                            f"{n_classes} dataset classes")
    if spec.task == "regression" and cfg.consistency.metric == "symmetric_kl":
        problems.append("consistency.metric: regression needs squared_euclidean")
    return problems


def run_training(spec: ModelSpec, cfg: TrainConfig, dataset: Dataset) -> RunReport:
    """Train one configuration once; deterministic given cfg.seed."""
    problems = _cross_validate(spec, cfg, dataset)
    if problems:
        raise SpecError("; ".join(problems))
    if len(dataset.train_idx) == 0:
        raise DataError("dataset has an empty training split")

    x_train = dataset.features[dataset.train_idx]
    y_train = dataset.targets[dataset.train_idx]
    x_dev = dataset.features[dataset.dev_idx]
    y_dev = dataset.targets[dataset.dev_idx]
    if len(x_dev) == 0:  # fall back so evaluation always has data
        x_dev, y_dev = x_train, y_train

    method = build_method(spec, cfg)
    n = len(x_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    steps: list[StepRecord] = []
    evals: list[EvalRecord] = []
    labels = None
    started = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, _SHUFFLE_STREAM, epoch]).permutation(n)
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            step += 1
            step_rng = np.random.default_rng([cfg.seed, _STEP_STREAM, step])
            try:
                task_v, cons_v, total_v = method.step(x_train[batch], y_train[batch],
                                                      step_rng)
            except NumericError as exc:
                raise NumericError(f"aborted at step {step}: {exc}") from exc
            steps.append(StepRecord(step, task_v, cons_v, total_v))
            if step % cfg.eval_every == 0 or step == total_steps:
                branch, ens, labels = method.evaluate(x_dev, y_dev)
                evals.append(EvalRecord(step, branch, ens))

    if labels is not None and len(labels) >= 2:
        similarity = prediction_similarity(labels).tolist()
    elif labels is not None:
        similarity = [[1.0]]
    else:
        similarity = None

    counts = parameter_counts(spec)
    shared = cfg.method in ("camero", "one")
    return RunReport(
        method=cfg.method,
        seed=cfg.seed,
        metric_name="accuracy" if spec.task == "classification" else "mse",
        parameter_count=counts["shared_total"] if shared else counts["independent_total"],
        config=_config_echo(spec, cfg, dataset),
        steps=steps,
        evals=evals,
        similarity=similarity,
        final_metric=evals[-1].ensemble_metric,
        wall_clock_seconds=time.perf_counter() - started,
    )
