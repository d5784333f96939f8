"""Per-branch perturbation sampling.

Four families are supported, all sampled fresh per branch per training
step from a branch-specific random substream:

* ``neuron_dropout`` — multiplicative masks with entries 0 or 1/(1-p)
  (inverted scaling, so the mask is expectation-preserving and inference
  needs no rescaling), applied to post-activation hidden layers;
* ``gaussian_noise`` — an additive draw rescaled to a fixed L2 norm,
  applied to the input features by default;
* ``virtual_adversarial`` — one power-iteration step toward the input
  direction that most changes the model's own output distribution,
  rescaled to a fixed L2 norm;
* ``input_dropout`` — zeroes input features without rescaling, the way a
  dropped token is simply absent.

Samplers are pure functions of their inputs and rng; distinct substreams
may run concurrently. The one exception is ``virtual_adversarial``,
which temporarily freezes the model's parameters while it differentiates
through a forward pass, so it must not run concurrently with other
graph-building work on the same model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, SpecError
from .tensor import Tensor, log_softmax, no_grad, softmax

FAMILIES = ("none", "neuron_dropout", "gaussian_noise", "virtual_adversarial",
            "input_dropout")

#: families whose delta attaches to the input rather than hidden layers
_INPUT_LEVEL = ("gaussian_noise", "virtual_adversarial", "input_dropout")

ADDITIVE = "add"
MULTIPLICATIVE = "mul"


@dataclass(frozen=True)
class PerturbationSpec:
    """Which family to sample from, and how strong.

    ``apply_layers`` selects the hidden layers (1-based, up to K-1) that
    receive the perturbation; ``None`` means the family default — every
    hidden layer for neuron dropout, the input for the other families —
    and ``"input_only"`` forces input-level application.
    """

    family: str = "none"
    p: float = 0.1
    eps: float = 1e-5
    xi: float = 1e-6
    apply_layers: tuple[int, ...] | str | None = None

    def validate(self) -> list[str]:
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"family: unknown value {self.family!r}")
        if not 0.0 <= self.p < 1.0:
            problems.append(f"p: dropout ratio must be in [0, 1), got {self.p}")
        if self.eps < 0.0:
            problems.append(f"eps: norm bound must be nonnegative, got {self.eps}")
        if self.xi <= 0.0:
            problems.append(f"xi: probe scale must be positive, got {self.xi}")
        if self.family == "virtual_adversarial" and self.eps <= 0.0:
            problems.append("eps: virtual_adversarial needs a positive norm bound")
        if self.family == "input_dropout" and self.apply_layers not in (None, "input_only"):
            problems.append("apply_layers: input_dropout is input-only")
        if self.family == "neuron_dropout" and self.apply_layers == "input_only":
            problems.append("apply_layers: neuron_dropout applies to hidden layers; "
                            "use input_dropout for the input")
        if isinstance(self.apply_layers, tuple) and any(k < 1 for k in self.apply_layers):
            problems.append("apply_layers: layer indices are 1-based")
        return problems

    def check(self) -> "PerturbationSpec":
        problems = self.validate()
        if problems:
            raise SpecError("; ".join(problems))
        return self


@dataclass
class PerturbationSet:
    """The concrete perturbations one branch sees during one step.

    ``layers`` maps a hidden-layer index k (1-based, k < K) to either an
    additive delta or a multiplicative mask matching that layer's output
    shape; ``input_delta`` optionally perturbs the input itself.
    """

    layers: dict[int, tuple[str, Tensor]] = field(default_factory=dict)
    input_delta: tuple[str, Tensor] | None = None

    def apply_input(self, x: Tensor) -> Tensor:
        if self.input_delta is None:
            return x
        return _apply(x, self.input_delta, where="input")

    def apply_layer(self, h: Tensor, k: int) -> Tensor:
        entry = self.layers.get(k)
        if entry is None:
            return h
        return _apply(h, entry, where=f"layer {k}")


def _apply(h: Tensor, entry: tuple[str, Tensor], where: str) -> Tensor:
    kind, delta = entry
    if delta.shape != h.shape:
        raise ShapeError(
            f"perturbation at {where}: delta shape {delta.shape} does not "
            f"match output shape {h.shape}")
    return h + delta if kind == ADDITIVE else h * delta


def sample_dropout_mask(shape, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout mask: entries are 0 w.p. p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise SpecError(f"dropout ratio must be in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return Tensor(keep * (1.0 / (1.0 - p)))


def sample_gaussian(shape, eps: float, rng: np.random.Generator) -> Tensor:
    """Standard-normal draw rescaled so its total L2 norm is exactly eps."""
    if eps < 0.0:
        raise SpecError(f"norm bound must be nonnegative, got {eps}")
    if eps == 0.0:
        return Tensor(np.zeros(shape))
    d = rng.standard_normal(shape)
    return Tensor(d * (eps / np.linalg.norm(d)))


def input_dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Zero input features independently with probability p, no rescaling."""
    mask = sample_input_dropout_mask(np.shape(getattr(x, "data", x)), p, rng)
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x * mask


def sample_input_dropout_mask(shape, p: float, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise SpecError(f"dropout ratio must be in [0, 1), got {p}")
    return Tensor((rng.random(shape) >= p).astype(np.float64))


def virtual_adversarial(model, branch: int, x: Tensor, eps: float, xi: float,
                        rng: np.random.Generator) -> Tensor:
    """One-step power iteration for the adversarial input direction.

    Probes with a random direction of norm xi, differentiates the KL
    divergence between the branch's unperturbed output distribution
    (held constant) and its output at the probed input, and rescales the
    resulting gradient to norm eps. A vanishing gradient (flat landscape)
    falls back to the scaled probe direction.
    """
    if eps <= 0.0 or xi <= 0.0:
        raise SpecError(f"virtual_adversarial needs eps > 0 and xi > 0, got {eps}, {xi}")
    x = x if isinstance(x, Tensor) else Tensor(x)

    probe = rng.standard_normal(x.shape)
    probe = probe * (xi / np.linalg.norm(probe))

    with no_grad():
        clean = softmax(model.forward_branch(branch, x), axis=-1).data

    params = model.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        delta = Tensor(probe, requires_grad=True)
        perturbed_logits = model.forward_branch(branch, x + delta)
        # KL(clean || perturbed): only the cross term carries gradient
        loss = (Tensor(-clean) * log_softmax(perturbed_logits, axis=-1)).sum()
        loss.backward()
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag

    g = delta.grad
    if g is None or not np.isfinite(g).all():
        raise NumericError("virtual_adversarial: non-finite gradient")
    norm = np.linalg.norm(g)
    if norm < 1e-12:
        return Tensor(probe * (eps / np.linalg.norm(probe)))
    return Tensor(g * (eps / norm))


def sample_perturbation_set(model, x: Tensor, spec: PerturbationSpec,
                            branch: int, rng: np.random.Generator) -> PerturbationSet:
    """Draw one branch's PerturbationSet for one step.

    ``model`` supplies the hidden-layer widths (and, for the adversarial
    family, a differentiable forward); ``rng`` must be the branch's own
    substream.
    """
    spec.check()
    if spec.family == "none":
        return PerturbationSet()

    batch = x.shape[0]
    if spec.family == "input_dropout":
        return PerturbationSet(
            input_delta=(MULTIPLICATIVE, sample_input_dropout_mask(x.shape, spec.p, rng)))
    if spec.family == "virtual_adversarial":
        return PerturbationSet(
            input_delta=(ADDITIVE, virtual_adversarial(model, branch, x, spec.eps, spec.xi, rng)))

    layers = _hidden_layers(model, spec)
    if spec.family == "gaussian_noise":
        if layers is None:  # family default: perturb the input
            return PerturbationSet(
                input_delta=(ADDITIVE, sample_gaussian(x.shape, spec.eps, rng)))
        deltas = {k: (ADDITIVE, sample_gaussian((batch, model.layer_width(k)), spec.eps, rng))
                  for k in layers}
        return PerturbationSet(layers=deltas)

    # neuron_dropout: every hidden layer unless narrowed in the spec
    if layers is None:
        layers = tuple(range(1, model.depth))
    masks = {k: (MULTIPLICATIVE, sample_dropout_mask((batch, model.layer_width(k)), spec.p, rng))
             for k in layers}
    return PerturbationSet(layers=masks)


def _hidden_layers(model, spec: PerturbationSpec) -> tuple[int, ...] | None:
    """Resolve apply_layers to hidden-layer indices, or None for 'input'."""
    if spec.apply_layers is None or spec.apply_layers == "input_only":
        return None
    bad = [k for k in spec.apply_layers if not 1 <= k <= model.depth - 1]
    if bad:
        raise SpecError(f"apply_layers: {bad} outside the hidden range 1..{model.depth - 1}")
    return tuple(spec.apply_layers)
