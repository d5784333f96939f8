"""Experiment configuration: TOML schema, validation, sweeps.

A config file has the nested sections

    [dataset] [model] [train] [perturbation] [consistency] [sweep] [run]

Parsing normalizes a file into a fully-defaulted nested dict (the
canonical form), validates every key, and builds the typed objects.
Validation is collecting: the caller gets the complete list of offending
keys, not just the first. ``serialize`` emits canonical TOML; parsing a
serialized config and serializing again is byte-stable.

Sweep axes are dotted key paths ("perturbation.p") mapped to value
lists; expansion takes the cartesian product over axes (sorted by name)
crossed with the seed list.
"""

from __future__ import annotations

import itertools
import sys
from dataclasses import dataclass, replace

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .consistency import ConsistencySpec
from .data import (
    Dataset,
    gen_gaussian_mixture,
    gen_linear_regression,
    gen_spirals,
    load_csv,
    load_dataset,
    standardize,
)
from .errors import SpecError
from .model import ModelSpec
from .perturb import PerturbationSpec
from .train import TrainConfig

__all__ = ["ExperimentConfig", "parse_config", "serialize_config", "build_dataset"]

DATASET_KINDS = ("gaussian_mixture", "spirals", "linear_regression", "csv", "cache")

# per-section allowed keys and per-dataset-kind required keys
_SECTION_KEYS = {
    "dataset": {"kind", "n", "d", "classes", "spread", "turns", "noise", "noise_std",
                "label_noise", "path", "target_column", "seed", "split_ratios",
                "standardize", "task"},
    "model": {"layer_dims", "num_branches", "share_depth", "activation", "task"},
    "train": {"method", "optimizer", "learning_rate", "betas", "epochs",
              "batch_size", "alpha", "eval_every"},
    "perturbation": {"family", "p", "eps", "xi", "apply_layers"},
    "consistency": {"kind", "metric", "weights", "detach_target"},
    "run": {"seeds", "out"},
}
_REQUIRED_DATASET_KEYS = {
    "gaussian_mixture": ("n", "d", "classes", "spread"),
    "spirals": ("n", "turns", "noise"),
    "linear_regression": ("n", "d", "noise_std"),
    "csv": ("path", "target_column"),
    "cache": ("path",),
}
_SWEEPABLE_SECTIONS = ("dataset", "model", "train", "perturbation", "consistency")


@dataclass
class ExperimentConfig:
    """A parsed, validated experiment: typed objects plus the canonical dict."""

    raw: dict
    dataset: dict
    model: ModelSpec
    train: TrainConfig
    sweep: dict[str, list]
    seeds: list[int]
    out: str | None

    def train_for_seed(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """New config with dotted-key values replaced; revalidates."""
        raw = {section: dict(body) if isinstance(body, dict) else body
               for section, body in self.raw.items()}
        for dotted, value in overrides.items():
            section, key = dotted.split(".", 1)
            raw.setdefault(section, {})[key] = value
        config, errors = config_from_dict(raw)
        if errors:
            raise SpecError("; ".join(errors))
        return config

    def sweep_points(self) -> list[dict]:
        """Cartesian product of sweep axes, axes sorted by name."""
        if not self.sweep:
            return [{}]
        axes = sorted(self.sweep)
        return [dict(zip(axes, combo))
                for combo in itertools.product(*(self.sweep[a] for a in axes))]


def parse_config(text: str) -> tuple[ExperimentConfig | None, list[str]]:
    """Parse TOML text; returns (config, []) or (None, all problems)."""
    try:
        raw = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        return None, [f"config is not valid TOML: {exc}"]
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> tuple[ExperimentConfig | None, list[str]]:
    errors: list[str] = []
    known_sections = set(_SECTION_KEYS) | {"sweep"}
    for section in raw:
        if section not in known_sections:
            errors.append(f"{section}: unknown section")
    for section, allowed in _SECTION_KEYS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            errors.append(f"{section}: must be a section")
            continue
        for key in body:
            if key not in allowed:
                errors.append(f"{section}.{key}: unknown key")
    if errors:
        return None, errors

    dataset_cfg, dataset_errors = _normalize_dataset(raw.get("dataset", {}))
    errors += dataset_errors

    model_raw = dict(raw.get("model", {}))
    if "task" not in model_raw and not dataset_errors:
        model_raw["task"] = dataset_cfg["task"]
    model = None
    if "layer_dims" not in model_raw:
        errors.append("model.layer_dims: required")
    else:
        try:
            model = ModelSpec(
                layer_dims=tuple(model_raw["layer_dims"]),
                num_branches=int(model_raw.get("num_branches", 1)),
                share_depth=model_raw.get("share_depth"),
                activation=model_raw.get("activation", "tanh"),
                task=model_raw.get("task", "classification"),
            )
        except (SpecError, TypeError, ValueError) as exc:
            errors.append(f"model: {exc}")

    perturbation = _build_perturbation(raw.get("perturbation", {}))
    consistency = _build_consistency(raw.get("consistency", {}))

    train_raw = raw.get("train", {})
    betas = train_raw.get("betas")
    try:
        train = TrainConfig(
            method=train_raw.get("method", "camero"),
            optimizer=train_raw.get("optimizer", "adam"),
            learning_rate=float(train_raw.get("learning_rate", 0.01)),
            betas=tuple(betas) if betas is not None else None,
            epochs=int(train_raw.get("epochs", 10)),
            batch_size=int(train_raw.get("batch_size", 32)),
            seed=0,
            alpha=float(train_raw.get("alpha", 1.0)),
            eval_every=int(train_raw.get("eval_every", 50)),
            perturbation=perturbation,
            consistency=consistency,
        )
    except (TypeError, ValueError) as exc:
        errors.append(f"train: {exc}")
        train = None
    if train is not None:
        for problem in train.validate():
            if problem.startswith(("perturbation.", "consistency.")):
                errors.append(problem)  # those are their own config sections
            else:
                errors.append(f"train.{problem}")

    run_raw = raw.get("run", {})
    seeds = run_raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        errors.append("run.seeds: must be a nonempty list")
        seeds = [0]
    elif not all(isinstance(s, int) and s >= 0 for s in seeds):
        errors.append("run.seeds: must be nonnegative integers")
    out = run_raw.get("out")

    sweep_raw = raw.get("sweep", {})
    sweep: dict[str, list] = {}
    for dotted, values in sweep_raw.items():
        section, _, key = dotted.partition(".")
        if section not in _SWEEPABLE_SECTIONS or key not in _SECTION_KEYS.get(section, ()):
            errors.append(f"sweep.{dotted}: does not name a config key")
            continue
        if not isinstance(values, list) or not values:
            errors.append(f"sweep.{dotted}: must map to a nonempty value list")
            continue
        sweep[dotted] = list(values)

    if errors:
        return None, errors

    config = ExperimentConfig(
        raw=_canonical_raw(dataset_cfg, model, train, sweep, seeds, out),
        dataset=dataset_cfg,
        model=model,
        train=train,
        sweep=sweep,
        seeds=list(seeds),
        out=out,
    )
    return config, []


def _normalize_dataset(body: dict) -> tuple[dict, list[str]]:
    errors = []
    kind = body.get("kind")
    if kind not in DATASET_KINDS:
        errors.append(f"dataset.kind: must be one of {', '.join(DATASET_KINDS)}")
        return {"task": "classification"}, errors
    for key in _REQUIRED_DATASET_KEYS[kind]:
        if key not in body:
            errors.append(f"dataset.{key}: required for kind {kind!r}")
    normalized = dict(body)
    normalized.setdefault("seed", 0)
    normalized.setdefault("split_ratios", [0.7, 0.15, 0.15])
    normalized.setdefault("standardize", False)
    if kind == "linear_regression":
        normalized["task"] = "regression"
    elif kind in ("gaussian_mixture", "spirals"):
        normalized["task"] = "classification"
    else:
        normalized.setdefault("task", body.get("task", "classification"))
    ratios = normalized["split_ratios"]
    if not (isinstance(ratios, list) and len(ratios) == 3):
        errors.append("dataset.split_ratios: must be a list of three ratios")
    return normalized, errors


def _build_perturbation(body: dict) -> PerturbationSpec:
    apply_layers = body.get("apply_layers")
    if isinstance(apply_layers, list):
        apply_layers = tuple(apply_layers)
    return PerturbationSpec(
        family=body.get("family", "none"),
        p=float(body.get("p", 0.1)),
        eps=float(body.get("eps", 1e-5)),
        xi=float(body.get("xi", 1e-6)),
        apply_layers=apply_layers,
    )


def _build_consistency(body: dict) -> ConsistencySpec:
    weights = body.get("weights")
    return ConsistencySpec(
        kind=body.get("kind", "ensemble"),
        metric=body.get("metric", "symmetric_kl"),
        weights=tuple(weights) if weights is not None else None,
        detach_target=bool(body.get("detach_target", True)),
    )


def _canonical_raw(dataset_cfg, model: ModelSpec, train: TrainConfig,
                   sweep, seeds, out) -> dict:
    raw = {
        "dataset": {k: dataset_cfg[k] for k in sorted(dataset_cfg)},
        "model": {
            "layer_dims": list(model.layer_dims),
            "num_branches": model.num_branches,
            "share_depth": model.share_depth,
            "activation": model.activation,
            "task": model.task,
        },
        "train": {
            "method": train.method,
            "optimizer": train.optimizer,
            "learning_rate": train.learning_rate,
            "epochs": train.epochs,
            "batch_size": train.batch_size,
            "alpha": train.alpha,
            "eval_every": train.eval_every,
        },
        "perturbation": {
            "family": train.perturbation.family,
            "p": train.perturbation.p,
            "eps": train.perturbation.eps,
            "xi": train.perturbation.xi,
        },
        "consistency": {
            "kind": train.consistency.kind,
            "metric": train.consistency.metric,
            "detach_target": train.consistency.detach_target,
        },
        "run": {"seeds": list(seeds)},
    }
    if train.betas is not None:
        raw["train"]["betas"] = list(train.betas)
    if train.perturbation.apply_layers is not None:
        layers = train.perturbation.apply_layers
        raw["perturbation"]["apply_layers"] = \
            layers if isinstance(layers, str) else list(layers)
    if train.consistency.weights is not None:
        raw["consistency"]["weights"] = list(train.consistency.weights)
    if sweep:
        raw["sweep"] = {k: list(sweep[k]) for k in sorted(sweep)}
    if out is not None:
        raw["run"]["out"] = out
    return raw


# -- canonical TOML emission -----------------------------------------------------

_SECTION_ORDER = ("dataset", "model", "train", "perturbation", "consistency",
                  "sweep", "run")


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise SpecError(f"cannot serialize config value {value!r}")


def _toml_key(key: str) -> str:
    if key.replace("_", "").replace("-", "").isalnum() and "." not in key:
        return key
    return _toml_value(key)


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical TOML text for a parsed config (stable under re-parsing)."""
    lines = []
    for section in _SECTION_ORDER:
        body = config.raw.get(section)
        if not body:
            continue
        lines.append(f"[{section}]")
        for key in body:
            lines.append(f"{_toml_key(key)} = {_toml_value(body[key])}")
        lines.append("")
    return "\n".join(lines)


# -- dataset construction ----------------------------------------------------------

def build_dataset(dataset_cfg: dict) -> Dataset:
    kind = dataset_cfg["kind"]
    ratios = tuple(dataset_cfg.get("split_ratios", (0.7, 0.15, 0.15)))
    seed = int(dataset_cfg.get("seed", 0))
    if kind == "gaussian_mixture":
        ds = gen_gaussian_mixture(n=int(dataset_cfg["n"]), d=int(dataset_cfg["d"]),
                                  classes=int(dataset_cfg["classes"]),
                                  spread=float(dataset_cfg["spread"]),
                                  seed=seed, split_ratios=ratios)
    elif kind == "spirals":
        ds = gen_spirals(n=int(dataset_cfg["n"]), turns=float(dataset_cfg["turns"]),
                         noise=float(dataset_cfg["noise"]), seed=seed,
                         split_ratios=ratios,
                         label_noise=float(dataset_cfg.get("label_noise", 0.0)))
    elif kind == "linear_regression":
        ds = gen_linear_regression(n=int(dataset_cfg["n"]), d=int(dataset_cfg["d"]),
                                   noise_std=float(dataset_cfg["noise_std"]),
                                   seed=seed, split_ratios=ratios)
    elif kind == "csv":
        ds = load_csv(dataset_cfg["path"], dataset_cfg["target_column"],
                      split_ratios=ratios, seed=seed,
                      task=dataset_cfg.get("task"))
    elif kind == "cache":
        ds = load_dataset(dataset_cfg["path"])
    else:
        raise SpecError(f"unknown dataset kind {kind!r}")
    if dataset_cfg.get("standardize"):
        ds = standardize(ds)
    return ds
