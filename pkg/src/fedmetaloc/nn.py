"""Dense-network substrate: layers, forward/backward passes, MSE loss, SGD and Adam.

Everything here is functional with respect to parameters: optimizers return new
parameter dictionaries instead of mutating their inputs, so concurrent client
simulations can share nothing but immutable snapshots.

Parameter dictionaries map ``"layer{i}.weights"`` / ``"layer{i}.biases"`` to
float64 arrays; gradients mirror those keys exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError

RELU = "relu"
IDENTITY = "identity"
_ACTIVATIONS = (RELU, IDENTITY)

ParamDict = dict[str, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class DenseLayer:
    """One fully connected layer ``y = act(W x + b)`` with weights stored [out, in]."""

    weights: np.ndarray
    biases: np.ndarray
    activation: str = IDENTITY

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ConfigError(f"layer weights must be 2-D, got shape {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise ConfigError(
                f"bias shape {self.biases.shape} does not match {self.weights.shape[0]} outputs"
            )
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]


def he_uniform_layer(
    in_size: int,
    out_size: int,
    rng: np.random.Generator,
    activation: str = IDENTITY,
) -> DenseLayer:
    """He-style fan-in uniform initialization; biases start at zero."""
    if in_size < 1 or out_size < 1:
        raise ConfigError(f"layer sizes must be >= 1, got {in_size} -> {out_size}")
    limit = math.sqrt(6.0 / in_size)
    weights = rng.uniform(-limit, limit, size=(out_size, in_size))
    return DenseLayer(weights=weights, biases=np.zeros(out_size), activation=activation)


def build_stack(
    sizes: Sequence[int],
    seed: int | np.random.SeedSequence,
    hidden_activation: str = RELU,
    output_activation: str = IDENTITY,
) -> list[DenseLayer]:
    """Build a feed-forward stack ``sizes[0] -> ... -> sizes[-1]``.

    Each layer draws from its own child of the seed sequence, so adding or
    removing layers never perturbs the others' initial weights.
    """
    if len(sizes) < 2:
        raise ConfigError("a stack needs at least an input and an output size")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(len(sizes) - 1)
    layers = []
    for i, child in enumerate(children):
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(he_uniform_layer(sizes[i], sizes[i + 1], np.random.default_rng(child), act))
    return layers


def export_params(layers: Sequence[DenseLayer]) -> ParamDict:
    """Copy the stack's parameters into a fresh dictionary."""
    out: ParamDict = {}
    for i, layer in enumerate(layers):
        out[f"layer{i}.weights"] = layer.weights.copy()
        out[f"layer{i}.biases"] = layer.biases.copy()
    return out


def assign_params(layers: Sequence[DenseLayer], params: ParamDict) -> None:
    """Copy ``params`` into the stack, validating every shape."""
    expected = {f"layer{i}.{role}" for i in range(len(layers)) for role in ("weights", "biases")}
    if set(params) != expected:
        raise ConfigError(f"parameter keys {sorted(params)} do not match stack of {len(layers)} layers")
    for i, layer in enumerate(layers):
        w = np.asarray(params[f"layer{i}.weights"], dtype=np.float64)
        b = np.asarray(params[f"layer{i}.biases"], dtype=np.float64)
        if w.shape != layer.weights.shape or b.shape != layer.biases.shape:
            raise ConfigError(
                f"layer {i} expects weights {layer.weights.shape} and biases {layer.biases.shape}, "
                f"got {w.shape} and {b.shape}"
            )
        layer.weights = w.copy()
        layer.biases = b.copy()


@dataclass
class GradientBundle:
    """Per-parameter gradients keyed like the ParamDict they differentiate."""

    grads: ParamDict
    sample_count: int = 1

    def norm(self) -> float:
        """Euclidean norm over all entries, treated as one flat vector."""
        total = 0.0
        for v in self.grads.values():
            total += float(np.sum(v * v))
        return math.sqrt(total)


@dataclass
class ForwardCache:
    """Activation trace from one forward pass, consumed by :func:`backward`."""

    layers: Sequence[DenseLayer]
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def _promote(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ConfigError(f"inputs must be 1-D or 2-D, got shape {x.shape}")


def forward(layers: Sequence[DenseLayer], x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the stack on a sample (1-D) or batch (2-D, rows are samples)."""
    a, squeeze = _promote(x)
    if a.shape[1] != layers[0].in_size:
        raise ConfigError(f"input width {a.shape[1]} does not match layer input size {layers[0].in_size}")
    cache = ForwardCache(layers=layers, squeeze=squeeze)
    for layer in layers:
        if a.shape[1] != layer.in_size:
            raise ConfigError(
                f"stack mismatch: activation width {a.shape[1]} feeding layer of input size {layer.in_size}"
            )
        cache.inputs.append(a)
        z = a @ layer.weights.T + layer.biases
        cache.preacts.append(z)
        a = np.maximum(z, 0.0) if layer.activation == RELU else z
    y = a[0] if squeeze else a
    return y, cache


def backward(cache: ForwardCache, upstream_grad: np.ndarray) -> tuple[GradientBundle, np.ndarray]:
    """Backpropagate ``dL/dy`` through the cached pass.

    Returns gradients for every weight and bias plus the gradient with respect
    to the stack input, which lets callers chain several stacks together.
    """
    da = np.asarray(upstream_grad, dtype=np.float64)
    if cache.squeeze and da.ndim == 1:
        da = da[None, :]
    last = cache.layers[-1]
    batch = cache.inputs[0].shape[0]
    if da.shape != (batch, last.out_size):
        raise RuntimeError(
            f"upstream gradient shape {da.shape} does not match cached pass "
            f"({batch} samples, {last.out_size} outputs); stale cache?"
        )
    grads: ParamDict = {}
    for i in range(len(cache.layers) - 1, -1, -1):
        layer = cache.layers[i]
        z = cache.preacts[i]
        dz = da * (z > 0.0) if layer.activation == RELU else da
        grads[f"layer{i}.weights"] = dz.T @ cache.inputs[i]
        grads[f"layer{i}.biases"] = dz.sum(axis=0)
        da = dz @ layer.weights
    dx = da[0] if cache.squeeze else da
    return GradientBundle(grads=grads, sample_count=batch), dx


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all components; gradient is ``2 (pred - target) / size``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


def _grad_dict(grads: GradientBundle | ParamDict) -> ParamDict:
    return grads.grads if isinstance(grads, GradientBundle) else grads


def _check_shapes(params: ParamDict, grads: ParamDict) -> None:
    if set(params) != set(grads):
        raise ConfigError(f"gradient keys {sorted(grads)} do not match parameter keys {sorted(params)}")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ConfigError(f"shape mismatch at {k}: {params[k].shape} vs {grads[k].shape}")


def sgd_step(params: ParamDict, grads: GradientBundle | ParamDict, mu: float) -> ParamDict:
    """Plain gradient step ``p' = p - mu * g``."""
    if mu <= 0:
        raise ConfigError(f"learning rate must be > 0, got {mu}")
    g = _grad_dict(grads)
    _check_shapes(params, g)
    return {k: params[k] - mu * g[k] for k in params}


@dataclass
class AdamState:
    """First/second moment estimates plus the bias-correction step counter."""

    first_moment: ParamDict
    second_moment: ParamDict
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_adam_state(params: ParamDict) -> AdamState:
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return AdamState(
        first_moment=zeros,
        second_moment={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(
    params: ParamDict,
    grads: GradientBundle | ParamDict,
    state: AdamState,
    mu: float,
) -> tuple[ParamDict, AdamState]:
    """Bias-corrected Adam update; returns new parameters and advanced state."""
    if mu <= 0:
        raise ConfigError(f"learning rate must be > 0, got {mu}")
    g = _grad_dict(grads)
    _check_shapes(params, g)
    t = state.step_count + 1
    m = {k: state.beta1 * state.first_moment[k] + (1 - state.beta1) * g[k] for k in params}
    v = {k: state.beta2 * state.second_moment[k] + (1 - state.beta2) * g[k] * g[k] for k in params}
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    new = {k: params[k] - mu * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + state.eps) for k in params}
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)
