"""Dense layers, losses, initialization and momentum SGD with polynomial lr decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, TrainingDivergenceError

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
_TINY = np.finfo(np.float64).tiny


class DenseLayer:
    """y = act(x @ W + b) with W of shape (in, out)."""

    def __init__(self, weight: Tensor, bias: Tensor, activation: str = "none"):
        if activation not in ("relu", "none"):
            raise ContractError(f"unknown activation {activation!r}")
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ContractError(f"inconsistent layer shapes: weight {weight.shape}, bias {bias.shape}")
        self.weight = weight
        self.bias = bias
        self.activation = activation
        weight.requires_grad = True
        bias.requires_grad = True

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.add_bias(ad.matmul(x, self.weight), self.bias)
        return ad.relu(y) if self.activation == "relu" else y

    def __repr__(self) -> str:
        return f"DenseLayer({self.in_dim}->{self.out_dim}, {self.activation})"


class MLP:
    """A stack of dense layers."""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ContractError(f"layer chain broken: {a} feeds {b}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.weight"] = layer.weight
            out[f"{prefix}{i}.bias"] = layer.bias
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def init_params(dims: Sequence[int], seed, activations: Sequence[str] | None = None) -> list[DenseLayer]:
    """Layers for ``dims[0] -> dims[1] -> ... -> dims[-1]``.

    Weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.  ``seed``
    may be an int or a ``numpy.random.Generator``.  By default hidden layers
    use relu and the last layer is linear.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ContractError(f"need at least input and output dims, got {dims}")
    n_layers = len(dims) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["none"]
    if len(activations) != n_layers:
        raise ContractError(f"{n_layers} layers but {len(activations)} activations")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(DenseLayer(Tensor(w), Tensor(np.zeros(fan_out)), act))
    return layers


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true labels."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    # floor only guards exact underflow to 0; it never binds for sane inputs
    picked = ad.clip(ad.pick(probs, labels), _TINY, 1.0)
    return ad.neg(ad.mean(ad.log(picked)))


def binary_adversarial_loss(domain_probs: Tensor, is_source) -> Tensor:
    """-mean log D over source rows  +  -mean log(1 - D) over target rows."""
    is_source = np.asarray(is_source, dtype=bool)
    if domain_probs.ndim != 2 or domain_probs.shape[1] != 1 or is_source.shape != (domain_probs.shape[0],):
        raise ContractError(
            f"need an n x 1 probability column and n domain flags, got {domain_probs.shape} and {is_source.shape}"
        )
    v = domain_probs.values
    if np.any((v < PROB_CLAMP) | (v > 1.0 - PROB_CLAMP)):
        log.debug("clamping %d domain probabilities to [%g, 1-%g]", int(np.sum((v < PROB_CLAMP) | (v > 1 - PROB_CLAMP))), PROB_CLAMP, PROB_CLAMP)
    p = ad.clip(domain_probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    src = np.flatnonzero(is_source)
    tgt = np.flatnonzero(~is_source)
    terms = []
    if src.size:
        terms.append(ad.neg(ad.mean(ad.log(ad.take_rows(p, src)))))
    if tgt.size:
        terms.append(ad.neg(ad.mean(ad.log(ad.sub(1.0, ad.take_rows(p, tgt))))))
    if not terms:
        raise ContractError("empty batch")
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def lr_at(p: float, lr0: float, alpha: float, beta: float) -> float:
    """Annealed learning rate lr0 * (1 + alpha * p) ** -beta for progress p in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"progress must lie in [0, 1], got {p}")
    if lr0 <= 0 or alpha < 0 or beta < 0:
        raise ContractError(f"need lr0 > 0, alpha >= 0, beta >= 0 (got {lr0}, {alpha}, {beta})")
    return lr0 * (1.0 + alpha * p) ** (-beta)


@dataclass
class SgdState:
    lr0: float
    alpha: float = 10.0
    beta: float = 0.75
    momentum: float = 0.9
    progress: float = 0.0
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return lr_at(self.progress, self.lr0, self.alpha, self.beta)

    def set_progress(self, p: float) -> None:
        if p < self.progress:
            raise ContractError(f"progress must not decrease ({self.progress} -> {p})")
        if p > 1.0:
            raise ContractError(f"progress must not exceed 1, got {p}")
        self.progress = float(p)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: SgdState,
    lr_mults: dict[str, float] | None = None,
) -> None:
    """One in-place momentum step: v <- m v + g; theta <- theta - lr * mult * v.

    A missing (``None``) gradient is treated as zero.
    """
    lr = state.lr
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}", {"parameter": name})
    for name, theta in params.items():
        g = grads.get(name)
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = state.momentum * v + (0.0 if g is None else g)
        state.velocities[name] = v
        mult = 1.0 if lr_mults is None else lr_mults.get(name, 1.0)
        theta -= lr * mult * v


class SGD:
    """Momentum SGD over named parameter groups, each with an lr multiplier."""

    def __init__(self, groups: dict[str, tuple[dict[str, Tensor], float]], state: SgdState):
        self.params: dict[str, Tensor] = {}
        self.mults: dict[str, float] = {}
        for group, (named, mult) in groups.items():
            for name, t in named.items():
                key = f"{group}.{name}"
                self.params[key] = t
                self.mults[key] = mult
        self.state = state

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self) -> None:
        sgd_step(
            {k: t.values for k, t in self.params.items()},
            {k: t.grad for k, t in self.params.items()},
            self.state,
            self.mults,
        )

    def parameters(self) -> Iterable[Tensor]:
        return self.params.values()
