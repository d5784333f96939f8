"""The weight-shared multi-branch network.

One physical copy of the bottom ``share_depth`` layers (the trunk) is
referenced by every branch; each of the ``num_branches`` branches owns
its remaining top layers (its head), independently initialized. A
branch's training-time forward pass recomputes the trunk because each
branch sees its own perturbations of the hidden representations:
additive deltas or multiplicative dropout masks injected after each
hidden layer's activation, plus an optional input-level perturbation.

The additive delta lands after the nonlinearity — the perturbed value is
the representation handed to the next layer. Dropout masks use the same
injection point multiplicatively; a mask is equivalent to the additive
choice delta = (mask - 1) * h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, SpecError
from . import perturb as _perturb
from .perturb import PerturbationSet, PerturbationSpec
from .tensor import Tensor, add_bias

__all__ = [
    "ModelSpec",
    "Layer",
    "EnsembleModel",
    "PerturbationSet",
    "parameter_counts",
    "save_checkpoint",
    "load_checkpoint",
]

_ACTIVATIONS = ("tanh", "relu")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: layer widths, sharing, branching.

    ``layer_dims`` lists the K+1 sizes input -> hidden... -> output, so
    the network has K affine layers. Layers 1..share_depth form the
    shared trunk; the rest belong to each branch's head. ``share_depth``
    defaults to K-1: share everything except the top layer.
    """

    layer_dims: tuple[int, ...]
    num_branches: int = 1
    share_depth: int | None = None
    activation: str = "tanh"
    task: str = "classification"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if self.share_depth is None:
            object.__setattr__(self, "share_depth", self.depth - 1)
        problems = self.validate()
        if problems:
            raise SpecError("; ".join(problems))

    @property
    def depth(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def validate(self) -> list[str]:
        problems = []
        if len(self.layer_dims) < 2:
            problems.append("layer_dims: need at least input and output sizes")
        if any(d <= 0 for d in self.layer_dims):
            problems.append(f"layer_dims: sizes must be positive, got {self.layer_dims}")
        if self.num_branches < 1:
            problems.append(f"num_branches: must be >= 1, got {self.num_branches}")
        if not 0 <= self.share_depth <= self.depth:
            problems.append(
                f"share_depth: must be in [0, {self.depth}], got {self.share_depth}")
        if self.activation not in _ACTIVATIONS:
            problems.append(f"activation: unknown value {self.activation!r}")
        if self.task not in ("classification", "regression"):
            problems.append(f"task: unknown value {self.task!r}")
        elif self.task == "classification" and len(self.layer_dims) >= 2 and self.output_dim < 2:
            problems.append("task: classification needs an output dim >= 2")
        elif self.task == "regression" and len(self.layer_dims) >= 2 and self.output_dim != 1:
            problems.append("task: regression needs an output dim of exactly 1")
        return problems


@dataclass
class Layer:
    W: Tensor
    b: Tensor


def _init_layer(fan_in: int, fan_out: int, rng: np.random.Generator) -> Layer:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    W = Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return Layer(W, b)


class EnsembleModel:
    """Shared trunk plus per-branch heads, with instrumented trunk passes.

    ``trunk_eval_count`` counts trunk evaluations so the inference
    contract (one trunk pass per predict call) is testable.
    """

    def __init__(self, spec: ModelSpec, trunk: list[Layer], heads: list[list[Layer]]):
        self.spec = spec
        self.trunk = trunk
        self.heads = heads
        self.trunk_eval_count = 0

    # -- construction ---------------------------------------------------------

    @classmethod
    def build(cls, spec: ModelSpec, seed: int) -> "EnsembleModel":
        """Initialize the trunk from ``seed`` and head j from ``seed + j``."""
        dims = spec.layer_dims
        trunk_rng = np.random.default_rng(seed)
        trunk = [_init_layer(dims[k - 1], dims[k], trunk_rng)
                 for k in range(1, spec.share_depth + 1)]
        heads = []
        for j in range(1, spec.num_branches + 1):
            head_rng = np.random.default_rng(seed + j)
            heads.append([_init_layer(dims[k - 1], dims[k], head_rng)
                          for k in range(spec.share_depth + 1, spec.depth + 1)])
        return cls(spec, trunk, heads)

    # -- introspection --------------------------------------------------------

    @property
    def num_branches(self) -> int:
        return self.spec.num_branches

    @property
    def depth(self) -> int:
        return self.spec.depth

    def layer_width(self, k: int) -> int:
        """Output width of layer k (1-based)."""
        return self.spec.layer_dims[k]

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.trunk:
            out.extend((layer.W, layer.b))
        for head in self.heads:
            for layer in head:
                out.extend((layer.W, layer.b))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward passes -------------------------------------------------------

    def _activate(self, h: Tensor) -> Tensor:
        return h.tanh() if self.spec.activation == "tanh" else h.relu()

    def _run_layer(self, layer: Layer, h: Tensor, k: int,
                   pset: PerturbationSet | None) -> Tensor:
        h = add_bias(h @ layer.W, layer.b)
        if k < self.depth:
            h = self._activate(h)
            if pset is not None:
                h = pset.apply_layer(h, k)
        return h

    def trunk_forward(self, x, pset: PerturbationSet | None = None) -> Tensor:
        """Run layers 1..share_depth. Counts one trunk evaluation."""
        self.trunk_eval_count += 1
        h = x if isinstance(x, Tensor) else Tensor(x)
        if pset is not None:
            h = pset.apply_input(h)
        for k, layer in enumerate(self.trunk, start=1):
            h = self._run_layer(layer, h, k, pset)
        return h

    def head_forward(self, branch: int, h: Tensor,
                     pset: PerturbationSet | None = None) -> Tensor:
        """Run branch ``branch``'s layers share_depth+1..K on trunk output."""
        self._check_branch(branch)
        for offset, layer in enumerate(self.heads[branch - 1]):
            k = self.spec.share_depth + 1 + offset
            h = self._run_layer(layer, h, k, pset)
        return h

    def forward_branch(self, branch: int, x,
                       pset: PerturbationSet | None = None) -> Tensor:
        """Full perturbed forward pass of one branch; returns logits."""
        h = self.trunk_forward(x, pset)
        return self.head_forward(branch, h, pset)

    def forward_all(self, x, spec: PerturbationSpec, rng: np.random.Generator,
                    shared_perturbation: bool = False,
                    ) -> tuple[list[Tensor], list[PerturbationSet]]:
        """Perturbed forward passes of every branch.

        Each branch draws its own PerturbationSet from an independent
        substream of ``rng`` (the trunk is recomputed per branch because
        the perturbations differ inside it). ``shared_perturbation``
        makes every branch reuse branch 1's draw instead — the
        traditional gated-ensemble setup, where diversity comes only
        from the heads. The sampled sets are returned for reuse in the
        step's loss.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        substream_seeds = rng.integers(0, 2**63, size=self.num_branches)
        psets: list[PerturbationSet] = []
        logits: list[Tensor] = []
        for branch in range(1, self.num_branches + 1):
            if shared_perturbation and psets:
                pset = psets[0]
            else:
                branch_rng = np.random.default_rng(int(substream_seeds[branch - 1]))
                pset = _perturb.sample_perturbation_set(self, x, spec, branch, branch_rng)
            psets.append(pset)
            logits.append(self.forward_branch(branch, x, pset))
        return logits, psets

    def _check_branch(self, branch: int) -> None:
        if not 1 <= branch <= self.num_branches:
            raise ContractError(
                f"branch index {branch} outside 1..{self.num_branches}")


def parameter_counts(spec: ModelSpec) -> dict[str, int]:
    """Parameter bookkeeping for reports.

    ``shared_total`` is the weight-shared model (one trunk + m heads);
    ``independent_total`` is what m separate full networks would cost.
    """
    dims = spec.layer_dims

    def layer_size(k: int) -> int:
        return dims[k - 1] * dims[k] + dims[k]

    trunk = sum(layer_size(k) for k in range(1, spec.share_depth + 1))
    per_head = sum(layer_size(k) for k in range(spec.share_depth + 1, spec.depth + 1))
    single = sum(layer_size(k) for k in range(1, spec.depth + 1))
    return {
        "trunk": trunk,
        "per_head": per_head,
        "shared_total": trunk + spec.num_branches * per_head,
        "single_model": single,
        "independent_total": spec.num_branches * single,
    }


# -- checkpoint format --------------------------------------------------------
#
# Line-oriented UTF-8 text, version-tagged:
#
#   camero-checkpoint 1
#   spec layer_dims 2,16,16,2
#   spec activation tanh
#   spec share_depth 2
#   spec num_branches 4
#   spec task classification
#   param trunk.layer1.W 2,16
#   <row-major float64 values, one line, space-separated, repr precision>
#   param trunk.layer1.b 16
#   ...
#   param head1.layer3.W 16,2
#
# Trunk layers are numbered 1..share_depth, head layers continue to K;
# heads are numbered 1..m.


def _named_parameters(model: EnsembleModel) -> list[tuple[str, Tensor]]:
    named = []
    for k, layer in enumerate(model.trunk, start=1):
        named.append((f"trunk.layer{k}.W", layer.W))
        named.append((f"trunk.layer{k}.b", layer.b))
    for j, head in enumerate(model.heads, start=1):
        for offset, layer in enumerate(head):
            k = model.spec.share_depth + 1 + offset
            named.append((f"head{j}.layer{k}.W", layer.W))
            named.append((f"head{j}.layer{k}.b", layer.b))
    return named


def save_checkpoint(model: EnsembleModel, path) -> None:
    lines = [f"camero-checkpoint {CHECKPOINT_VERSION}"]
    spec = model.spec
    lines.append("spec layer_dims " + ",".join(str(d) for d in spec.layer_dims))
    lines.append(f"spec activation {spec.activation}")
    lines.append(f"spec share_depth {spec.share_depth}")
    lines.append(f"spec num_branches {spec.num_branches}")
    lines.append(f"spec task {spec.task}")
    for name, p in _named_parameters(model):
        shape = ",".join(str(d) for d in p.shape)
        lines.append(f"param {name} {shape}")
        lines.append(" ".join(repr(float(v)) for v in p.data.reshape(-1)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> EnsembleModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("camero-checkpoint "):
        raise ContractError(f"{path}: not a checkpoint file")
    version = lines[0].split()[-1]
    if version != str(CHECKPOINT_VERSION):
        raise ContractError(f"{path}: unsupported checkpoint version {version}")

    fields: dict[str, str] = {}
    values: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("spec "):
            _, key, value = line.split(" ", 2)
            fields[key] = value
            i += 1
        elif line.startswith("param "):
            _, name, shape_text = line.split(" ")
            shape = tuple(int(d) for d in shape_text.split(","))
            data = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
            values[name] = data.reshape(shape)
            i += 2
        else:
            i += 1

    spec = ModelSpec(
        layer_dims=tuple(int(d) for d in fields["layer_dims"].split(",")),
        num_branches=int(fields["num_branches"]),
        share_depth=int(fields["share_depth"]),
        activation=fields["activation"],
        task=fields["task"],
    )
    model = EnsembleModel.build(spec, seed=0)
    for name, p in _named_parameters(model):
        if name not in values:
            raise ContractError(f"{path}: missing parameter {name}")
        if values[name].shape != p.shape:
            raise ContractError(f"{path}: {name} has shape {values[name].shape}, "
                                f"expected {p.shape}")
        p.data = values[name]
    return model
