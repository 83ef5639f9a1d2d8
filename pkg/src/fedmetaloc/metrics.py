"""Evaluation metrics, the KNN baseline, and empirical convergence probes.

Adaptation speed comes in two flavors:

* accuracy-based: ``1 / (b * n_A)`` where ``n_A`` is the earliest gradient
  step whose query mean distance error reaches the target ``A`` (higher is
  better; 0 when the target is never reached),
* step-based: ``MDE(n*) / b`` at a fixed step budget ``n*`` (lower is better).

The probes near the bottom study plain-SGD fine-tuning trajectories: steps to
reach a squared-gradient-norm threshold, and how far an actual trajectory
drifts from its first-order linearization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .data import LocalizationTask
from .errors import ConfigError, DataError
from .model import PART_NAMES, ClientModel, ModelConfig


def mde(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean Euclidean distance between predicted and true coordinates."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ConfigError(f"coordinate arrays must share a 2-D shape, got {pred.shape} vs {truth.shape}")
    if pred.shape[0] == 0:
        raise ConfigError("cannot average over zero points")
    return float(np.mean(np.linalg.norm(pred - truth, axis=1)))


def _mde_series(trace) -> list[float]:
    if hasattr(trace, "query_mdes"):
        return list(trace.query_mdes())
    return [float(v) for v in trace]


def steps_to_accuracy(trace, target: float) -> int | None:
    """Earliest step whose query MDE is <= target, or None if never reached."""
    for step, value in enumerate(_mde_series(trace), start=1):
        if value <= target:
            return step
    return None


def accuracy_speed_from_steps(n: int, batch_size: int) -> float:
    """Accuracy-based adaptation speed for a known step count: ``1 / (b * n)``."""
    if n < 1 or batch_size < 1:
        raise ConfigError(f"step count and batch size must be >= 1, got n={n}, b={batch_size}")
    return 1.0 / (batch_size * n)


def step_speed_from_mde(mde_value: float, batch_size: int) -> float:
    """Step-based adaptation speed for a known accuracy: ``MDE / b``."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    return mde_value / batch_size


def adaptation_speed_accuracy(
    traces, target: float, batch_size: int
) -> tuple[float, list[int | None]]:
    """Mean accuracy-based speed over one or more traces.

    Traces that never reach the target contribute 0 and surface as ``None`` in
    the returned per-trace step list.
    """
    if hasattr(traces, "query_mdes") or (traces and isinstance(traces[0], (int, float))):
        traces = [traces]
    if not traces:
        raise ConfigError("need at least one trace")
    steps: list[int | None] = []
    speeds = []
    for trace in traces:
        series = _mde_series(trace)
        if not series:
            raise ConfigError("empty adaptation trace")
        n = steps_to_accuracy(series, target)
        steps.append(n)
        speeds.append(0.0 if n is None else accuracy_speed_from_steps(n, batch_size))
    return float(np.mean(speeds)), steps


def adaptation_speed_steps(trace, n_star: int, batch_size: int) -> float:
    """Step-based speed: query MDE at step ``n*`` divided by the batch size."""
    series = _mde_series(trace)
    if len(series) < n_star:
        raise ConfigError(f"trace has {len(series)} steps, cannot evaluate step {n_star}")
    if n_star < 1:
        raise ConfigError(f"step checkpoint must be >= 1, got {n_star}")
    return step_speed_from_mde(series[n_star - 1], batch_size)


def improvement_percent(mi_value: float, ri_value: float, kind: str) -> float:
    """Relative improvement of meta init over random init, in percent.

    ``kind='steps'`` compares step counts to a target accuracy;
    ``kind='accuracy'`` compares MDEs at a fixed step budget. Both reduce to
    ``100 * (ri - mi) / ri``; the flag documents which quantity is fed in.
    """
    if kind not in ("steps", "accuracy"):
        raise ConfigError(f"kind must be 'steps' or 'accuracy', got {kind!r}")
    if ri_value <= 0:
        raise ConfigError(f"baseline value must be > 0, got {ri_value}")
    return 100.0 * (ri_value - mi_value) / ri_value


def cdf_curve(errors: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF points: sorted errors with cumulative fraction i/N."""
    if len(errors) == 0:
        raise ConfigError("cannot build a CDF from zero errors")
    ordered = sorted(float(e) for e in errors)
    n = len(ordered)
    return [(e, (i + 1) / n) for i, e in enumerate(ordered)]


def knn_baseline(task: LocalizationTask, k: int) -> tuple[np.ndarray, float]:
    """K-nearest-neighbors regression over preprocessed fingerprints.

    Each query point averages the coordinates of its k nearest support points
    (Euclidean distance in RSSI space); exact distance ties break toward the
    lower support index.
    """
    n_support = task.support.n_samples
    if k < 1 or k > n_support:
        raise DataError(f"k={k} not usable with {n_support} support points")
    sup = task.support.rssi
    sup_coords = task.support.coords
    preds = np.empty_like(task.query.coords)
    for i, q in enumerate(task.query.rssi):
        d2 = np.sum((sup - q) ** 2, axis=1)
        nearest = np.argsort(d2, kind="stable")[:k]
        preds[i] = sup_coords[nearest].mean(axis=0)
    return preds, mde(preds, task.query.coords)


# ---------------------------------------------------------------------------
# convergence probes (plain-SGD mode)
# ---------------------------------------------------------------------------


def flatten_parts(model: ClientModel, parts: Sequence[str]) -> np.ndarray:
    chunks = []
    for part in parts:
        params = model.part_params(part)
        for key in sorted(params):
            chunks.append(params[key].ravel())
    return np.concatenate(chunks)


def flatten_grads(grads: Mapping[str, nn.GradientBundle], parts: Sequence[str]) -> np.ndarray:
    chunks = []
    for part in parts:
        g = grads[part].grads
        for key in sorted(g):
            chunks.append(g[key].ravel())
    return np.concatenate(chunks)


def theta_grad_sq_norm(model: ClientModel, x: np.ndarray, y: np.ndarray) -> float:
    """Squared gradient norm of the query loss with respect to the shared part."""
    _, grads = model.composite_loss(x, y)
    return grads["meta"].norm() ** 2


def epsilon_accuracy_steps(
    task: LocalizationTask,
    config: ModelConfig,
    theta_init: nn.ParamDict | None,
    epsilon: float,
    max_steps: int,
    mu: float,
    seed: int = 0,
    adapt_parts: Sequence[str] | None = None,
    part_overrides: Mapping[str, nn.ParamDict] | None = None,
) -> tuple[int | None, list[float]]:
    """Full-batch SGD fine-tuning until the query gradient norm drops below epsilon.

    Tracks ``||grad_theta L(query)||^2`` after every step and returns the first
    step where it falls below ``epsilon`` (None when ``max_steps`` is exhausted),
    together with the full squared-norm trace. ``part_overrides`` lets callers
    pin specific parts (e.g. an identity encoder for an exactly-linear probe).
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    root = np.random.SeedSequence(seed)
    alpha_seed, beta_seed, theta_seed, dec_seed = root.spawn(4)
    model = ClientModel.build(
        config,
        m=task.m,
        part_seeds={"encoder": alpha_seed, "decoder": dec_seed, "meta": theta_seed, "mapper": beta_seed},
    )
    if theta_init is not None:
        model.set_part_params("meta", {k: v.copy() for k, v in theta_init.items()})
    for part, params in (part_overrides or {}).items():
        model.set_part_params(part, params)
    xs, ys = task.support.rssi, task.normalize_coords(task.support.coords)
    xq, yq = task.query.rssi, task.normalize_coords(task.query.coords)
    rates = {part: mu for part in PART_NAMES}
    trace: list[float] = []
    reached: int | None = None
    for step in range(1, max_steps + 1):
        model.train_step(xs, ys, rates=rates, parts=adapt_parts, optimizer="sgd")
        sq = theta_grad_sq_norm(model, xq, yq)
        trace.append(sq)
        if reached is None and sq < epsilon:
            reached = step
            break
    return reached, trace


def linearization_probe(
    task: LocalizationTask,
    config: ModelConfig,
    mu_list: Sequence[float],
    n_steps: int,
    seed: int = 0,
    parts: Sequence[str] | None = None,
    part_overrides: Mapping[str, nn.ParamDict] | None = None,
) -> dict[float, float]:
    """Drift of the actual SGD trajectory from its first-order linearization.

    For each learning rate, runs ``n_steps`` full-batch SGD steps from the
    same seeded start and reports

        ``|| Omega_n - (Omega_0 - mu * n * grad L(Omega_0)) || / || Omega_0 ||``

    over the trained parts (all four by default). One step is exact by
    construction, and the residual shrinks with mu.
    """
    if n_steps < 1:
        raise ConfigError(f"need at least one step, got {n_steps}")
    parts = tuple(parts) if parts is not None else PART_NAMES
    xs_task = task.support
    xs, ys = xs_task.rssi, task.normalize_coords(xs_task.coords)
    residuals: dict[float, float] = {}
    for mu in mu_list:
        model = ClientModel.build(config, m=task.m, seed=seed)
        for part, params in (part_overrides or {}).items():
            model.set_part_params(part, params)
        omega0 = flatten_parts(model, parts)
        _, grads0 = model.composite_loss(xs, ys)
        g0 = flatten_grads(grads0, parts)
        rates = {part: mu for part in PART_NAMES}
        for _ in range(n_steps):
            model.train_step(xs, ys, rates=rates, parts=parts, optimizer="sgd")
        omega_n = flatten_parts(model, parts)
        linearized = omega0 - (mu * n_steps) * g0
        residuals[mu] = float(np.linalg.norm(omega_n - linearized) / np.linalg.norm(omega0))
    return residuals


def estimate_smoothness(
    model_states: Sequence[np.ndarray], grad_states: Sequence[np.ndarray]
) -> float:
    """Largest observed ratio ||grad_i - grad_j|| / ||Omega_i - Omega_j|| over consecutive pairs."""
    if len(model_states) < 2:
        raise ConfigError("need at least two states to estimate smoothness")
    best = 0.0
    for a, b, ga, gb in zip(model_states, model_states[1:], grad_states, grad_states[1:]):
        denom = float(np.linalg.norm(a - b))
        if denom > 0:
            best = max(best, float(np.linalg.norm(ga - gb)) / denom)
    return best


@dataclass
class TheoryProbeReport:
    """Empirical convergence probe results for one task."""

    epsilon: float
    mu: float
    steps_random_init: int | None
    steps_meta_init: int | None
    grad_sq_trace_random_init: list[float]
    grad_sq_trace_meta_init: list[float]
    linearization_residuals: dict[float, float]
    zeta_hat: float
    delta1_hat: float
    step_bound_sq_random_init: float | None = None
    step_bound_sq_meta_init: float | None = None

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "mu": self.mu,
            "steps_random_init": self.steps_random_init,
            "steps_meta_init": self.steps_meta_init,
            "grad_sq_trace_random_init": self.grad_sq_trace_random_init,
            "grad_sq_trace_meta_init": self.grad_sq_trace_meta_init,
            "linearization_residuals": {repr(k): v for k, v in self.linearization_residuals.items()},
            "zeta_hat": self.zeta_hat,
            "delta1_hat": self.delta1_hat,
            "step_bound_sq_random_init": self.step_bound_sq_random_init,
            "step_bound_sq_meta_init": self.step_bound_sq_meta_init,
        }


def evaluate_step_bound(
    epsilon: float,
    mu: float,
    delta1_hat: float,
    grad_norm_init: float,
    grad_norm_final: float,
) -> float | None:
    """Predicted upper bound on squared steps-to-epsilon, from estimated constants.

    Reported for inspection only; the constants are empirical estimates, so the
    bound is never asserted as a hard test.
    """
    if delta1_hat <= 0 or mu <= 0 or grad_norm_init <= 0:
        return None
    cross = grad_norm_init * grad_norm_final
    return (1.0 / (delta1_hat * mu) ** 2) * ((epsilon - 2.0 * cross) / grad_norm_init**2 + 1.0)
