"""Shared test oracles and fixtures: naive reference implementations kept
deliberately independent of the vectorized code paths they check."""

from __future__ import annotations

import numpy as np

from fedmetaloc import nn
from fedmetaloc.data import (
    FingerprintDataset,
    LocalizationTask,
    SyntheticEnvSpec,
    make_task,
    synth_environment,
)
from fedmetaloc.model import ModelConfig
from fedmetaloc.preprocess import PreprocessConfig, preprocess_dataset


def naive_stack_forward(layers, x) -> np.ndarray:
    """Plain-Python matrix multiply, one scalar at a time."""
    out = [float(v) for v in x]
    for layer in layers:
        w, b = layer.weights, layer.biases
        nxt = []
        for o in range(w.shape[0]):
            acc = float(b[o])
            for i in range(w.shape[1]):
                acc += float(w[o, i]) * out[i]
            nxt.append(max(acc, 0.0) if layer.activation == "relu" else acc)
        out = nxt
    return np.array(out)


def central_difference(f, arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of the scalar ``f()`` w.r.t. live arrays."""
    grads: dict[str, np.ndarray] = {}
    for key, arr in arrays.items():
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = f()
            flat[idx] = orig - h
            f_minus = f()
            flat[idx] = orig
            gf[idx] = (f_plus - f_minus) / (2.0 * h)
        grads[key] = g
    return grads


def rel_err(actual: np.ndarray, reference: np.ndarray) -> float:
    diff = np.linalg.norm(np.ravel(actual) - np.ravel(reference))
    return diff / max(np.linalg.norm(np.ravel(reference)), 1e-12)


def randomize_biases(model, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move biases off their zero init so no ReLU sits exactly on its kink.

    Central differences are ill-defined at a kink; gradient checks must run at
    a generic parameter point.
    """
    for layers in model.parts.values():
        for layer in layers:
            layer.biases = layer.biases + rng.normal(scale=scale, size=layer.biases.shape)


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        d=4,
        n=3,
        p=2,
        encoder_hidden=(5,),
        decoder_hidden=(5,),
        meta_hidden=(6,),
        mapper_hidden=(4,),
        lambda_recon=0.1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def synth_task(
    num_aps: int = 6,
    samples: int = 60,
    seed: int = 0,
    noise_sigma: float = 2.0,
    area: tuple[float, float] = (40.0, 25.0),
    ratio: float = 0.7,
    split_seed: int = 1,
    task_id: str | None = None,
):
    spec = SyntheticEnvSpec(
        num_aps=num_aps, samples=samples, seed=seed, noise_sigma=noise_sigma, area=area
    )
    processed, _ = preprocess_dataset(synth_environment(spec), PreprocessConfig())
    return make_task(task_id or f"T{seed}", processed, ratio, split_seed)


def identity_part(size: int) -> dict:
    return {"layer0.weights": np.eye(size), "layer0.biases": np.zeros(size)}


def linear_probe_setup(
    m: int = 3,
    out: int = 2,
    n_support: int = 12,
    n_query: int = 8,
    seed: int = 0,
    label_noise: float = 0.0,
):
    """Task + config where the composite model is exactly linear in the shared part.

    Identity encoder/mapper and unit label scaling make the prediction
    ``x @ W.T + b`` over the shared part's single layer, so least-squares
    closed forms apply. Labels follow one shared linear ground truth (plus
    optional noise), so support and query losses share their minimizer.
    """
    rng = np.random.default_rng(seed)
    truth_w = rng.normal(size=(out, m))
    truth_b = rng.normal(size=out)

    def split(n: int) -> FingerprintDataset:
        x = rng.uniform(0.0, 1.0, size=(n, m))
        y = x @ truth_w.T + truth_b
        if label_noise > 0:
            y = y + rng.normal(scale=label_noise, size=y.shape)
        return FingerprintDataset(rssi=x, coords=y, ap_names=[f"AP{i}" for i in range(m)])

    task = LocalizationTask("LIN", split(n_support), split(n_query), np.zeros(out), np.ones(out))
    cfg = ModelConfig(
        d=m,
        n=out,
        p=out,
        encoder_hidden=(),
        decoder_hidden=(),
        meta_hidden=(),
        mapper_hidden=(),
        lambda_recon=0.0,
        optimizer="sgd",
    )
    overrides = {"encoder": identity_part(m), "mapper": identity_part(out)}
    theta0 = nn.export_params(nn.build_stack([m, out], seed=seed + 1))
    return task, cfg, overrides, theta0


def augmented_least_squares(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic-form matrices of the mean-MSE objective for ``x @ W.T + b``.

    Returns ``H`` and ``C`` with gradient ``H @ Wt - C`` over augmented
    parameters ``Wt = [[W.T], [b]]`` (columns are outputs).
    """
    n, p = y.shape
    xt = np.hstack([x, np.ones((n, 1))])
    return 2.0 * xt.T @ xt / (n * p), 2.0 * xt.T @ y / (n * p)


def augmented_theta(theta: dict) -> np.ndarray:
    return np.vstack([theta["layer0.weights"].T, theta["layer0.biases"][None, :]])


def linear_sgd_closed_form(h_s, c_s, wt0, mu: float, step: int) -> np.ndarray:
    """Parameters after ``step`` full-batch gradient steps, via eigendecomposition."""
    w_star = np.linalg.solve(h_s, c_s)
    evals, q = np.linalg.eigh(h_s)
    d0 = q.T @ (wt0 - w_star)
    return w_star + q @ (((1.0 - mu * evals) ** step)[:, None] * d0)
