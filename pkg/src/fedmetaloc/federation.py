"""Round-synchronous federated meta-training and few-shot meta-testing.

Each communication round broadcasts the shared feature parameters, lets every
client take its local optimizer steps on its support set (encoder and mapper
resume from the previous round, the shared part restarts from the broadcast),
then aggregates the clients' query-set gradients:

    theta <- theta - eta * sum_k rho_k * grad_k

Aggregation always sums in ascending client-id order, so client scheduling can
never change the result. Contribution factors rho_k are proportional to query
set sizes and renormalized whenever the cohort changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .data import LocalizationTask
from .errors import ConfigError, DataError
from .metrics import mde
from .model import ClientModel, ModelConfig


@dataclass
class MetaModel:
    """Server-held shared feature parameters plus the round counter."""

    params: nn.ParamDict
    config: ModelConfig
    eta: float
    round: int = 0

    def broadcast(self) -> nn.ParamDict:
        """Immutable snapshot for clients: always a fresh copy."""
        return {k: v.copy() for k, v in self.params.items()}


@dataclass
class ClientState:
    client_id: str
    task: LocalizationTask
    model: ClientModel
    local_steps: int
    batch_size: int
    batch_rng: np.random.Generator | None = None
    rho: float = 0.0
    _order: np.ndarray | None = None
    _cursor: int = 0

    def next_batch(self) -> np.ndarray:
        """Next mini-batch indices from a private shuffled-epoch stream."""
        n = self.task.support.n_samples
        if self.batch_size >= n:
            return np.arange(n)
        if self._order is None or self._cursor + self.batch_size > n:
            self._order = self.batch_rng.permutation(n)
            self._cursor = 0
        batch = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return batch


@dataclass
class ClientUpdate:
    client_id: str
    grad_theta: nn.GradientBundle
    query_loss: float
    theta_local: nn.ParamDict | None = None  # locally updated shared params


@dataclass
class TraceStep:
    step: int
    support_loss: float
    query_mde: float


@dataclass
class AdaptationTrace:
    """Per-gradient-step learning curve of one fine-tuning run."""

    task_id: str
    init_mode: str  # "MI" or "RI"
    seed: int
    steps: list[TraceStep] = field(default_factory=list)

    def mde_at(self, step: int) -> float:
        if not 1 <= step <= len(self.steps):
            raise ConfigError(f"trace has {len(self.steps)} steps, asked for step {step}")
        return self.steps[step - 1].query_mde

    def query_mdes(self) -> list[float]:
        return [s.query_mde for s in self.steps]


@dataclass
class RoundReport:
    round: int
    mean_query_loss: float
    client_losses: dict[str, float]


def contribution_factors(query_sizes: Sequence[int]) -> np.ndarray:
    """Weights proportional to query sizes, summing to one."""
    sizes = np.asarray(query_sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ConfigError("cannot weight an empty cohort")
    if (sizes <= 0).any():
        raise ConfigError("every client needs a nonempty query set")
    return sizes / sizes.sum()


def _recompute_contributions(clients: Sequence[ClientState]) -> None:
    weights = contribution_factors([c.task.query.n_samples for c in clients])
    for client, w in zip(clients, weights):
        client.rho = float(w)


def server_init(
    tasks: Sequence[LocalizationTask],
    config: ModelConfig,
    eta: float,
    seed: int,
    local_steps: int = 5,
    batch_size: int = 32,
) -> tuple[MetaModel, list[ClientState]]:
    """Seed the shared part, then assemble every client as (alpha_k, theta^0, beta_k)."""
    if not tasks:
        raise ConfigError("need at least one training task")
    if eta <= 0:
        raise ConfigError(f"outer learning rate must be > 0, got {eta}")
    root = np.random.SeedSequence(seed)
    theta_seed, clients_seed = root.spawn(2)
    theta_layers = nn.build_stack(config.part_sizes("meta"), theta_seed)
    meta = MetaModel(params=nn.export_params(theta_layers), config=config, eta=eta)

    clients: list[ClientState] = []
    ordered = sorted(tasks, key=lambda t: t.task_id)
    client_seeds = clients_seed.spawn(len(ordered))
    for task, child in zip(ordered, client_seeds):
        model_seed, batch_seed = child.spawn(2)
        model = ClientModel.build(config, m=task.m, seed=model_seed)
        model.set_part_params("meta", meta.broadcast())
        state = ClientState(
            client_id=task.task_id,
            task=task,
            model=model,
            local_steps=local_steps,
            batch_size=batch_size,
            batch_rng=np.random.default_rng(batch_seed),
        )
        clients.append(state)
    _recompute_contributions(clients)
    return meta, clients


def client_local_train(
    state: ClientState, theta_broadcast: nn.ParamDict, local_steps: int | None = None
) -> ClientUpdate:
    """Local phase of one round: adopt the broadcast, train, evaluate on the query set."""
    task = state.task
    if task.support.n_samples == 0 or task.query.n_samples == 0:
        raise DataError(f"client {state.client_id}: empty support or query set")
    steps = state.local_steps if local_steps is None else local_steps
    state.model.set_part_params("meta", theta_broadcast)
    # the broadcast invalidates any optimizer moments accumulated for the
    # previous round's shared parameters; encoder/mapper states persist
    state.model.opt_states["meta"] = None
    xs, ys = task.support.rssi, task.normalize_coords(task.support.coords)
    for _ in range(steps):
        batch = state.next_batch()
        state.model.train_step(xs[batch], ys[batch])
    query_loss, grads = state.model.composite_loss(
        task.query.rssi, task.normalize_coords(task.query.coords)
    )
    return ClientUpdate(
        state.client_id, grads["meta"], query_loss, theta_local=state.model.part_params("meta")
    )


def server_aggregate(
    meta: MetaModel,
    updates: Sequence[ClientUpdate],
    rho: Mapping[str, float],
    aggregation: str = "gradient",
) -> MetaModel:
    """One outer update; summation always runs in ascending client-id order.

    ``aggregation="gradient"`` (default) applies the weighted query-gradient
    step ``theta - eta * sum_k rho_k grad_k``. ``aggregation="average"``
    instead keeps the contribution-weighted average of the locally updated
    shared parameters, which accumulates the clients' local optimizer progress
    round over round; useful at small round budgets where the gradient step
    alone barely moves the shared part.
    """
    if not updates:
        raise ConfigError("cannot aggregate an empty round")
    if aggregation not in ("gradient", "average"):
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    acc = {k: np.zeros_like(v) for k, v in meta.params.items()}
    for update in sorted(updates, key=lambda u: u.client_id):
        g = update.grad_theta.grads if aggregation == "gradient" else update.theta_local
        if g is None:
            raise ConfigError(f"client {update.client_id} sent no local parameters")
        if set(g) != set(acc):
            raise ConfigError(f"client {update.client_id} sent mismatched gradient keys")
        for k in acc:
            if g[k].shape != acc[k].shape:
                raise ConfigError(
                    f"client {update.client_id} gradient {k} has shape {g[k].shape}, "
                    f"server expects {acc[k].shape}"
                )
            acc[k] += rho[update.client_id] * g[k]
    if aggregation == "gradient":
        new_params = {k: meta.params[k] - meta.eta * acc[k] for k in meta.params}
    else:
        new_params = acc
    return MetaModel(params=new_params, config=meta.config, eta=meta.eta, round=meta.round + 1)


def meta_train(
    meta: MetaModel,
    clients: Sequence[ClientState],
    rounds: int,
    execution_order: Sequence[str] | None = None,
    on_round: Callable[[RoundReport, MetaModel], None] | None = None,
    early_stop_tol: float = 1e-5,
    early_stop_patience: int = 20,
    aggregation: str = "gradient",
) -> tuple[MetaModel, list[RoundReport]]:
    """Run up to ``rounds`` communication rounds, stopping early on loss plateau.

    ``execution_order`` only changes the order clients are *run* in; gradients
    are always aggregated in client-id order, so the result is identical for
    any permutation.
    """
    by_id = {c.client_id: c for c in clients}
    if execution_order is None:
        execution_order = sorted(by_id)
    if sorted(execution_order) != sorted(by_id):
        raise ConfigError("execution order must name every client exactly once")
    _recompute_contributions(list(clients))
    rho = {c.client_id: c.rho for c in clients}

    reports: list[RoundReport] = []
    flat_rounds = 0
    prev_loss: float | None = None
    for _ in range(rounds):
        broadcast = meta.broadcast()
        updates = [client_local_train(by_id[cid], broadcast) for cid in execution_order]
        meta = server_aggregate(meta, updates, rho, aggregation=aggregation)
        losses = {u.client_id: u.query_loss for u in updates}
        mean_loss = float(np.mean(list(losses.values())))
        report = RoundReport(round=meta.round, mean_query_loss=mean_loss, client_losses=losses)
        reports.append(report)
        if on_round is not None:
            on_round(report, meta)
        if prev_loss is not None:
            rel_change = abs(mean_loss - prev_loss) / max(abs(prev_loss), 1e-12)
            flat_rounds = flat_rounds + 1 if rel_change < early_stop_tol else 0
            if flat_rounds >= early_stop_patience:
                break
        prev_loss = mean_loss
    return meta, reports


def meta_test(
    task: LocalizationTask,
    config: ModelConfig,
    theta_init: nn.ParamDict | None,
    steps: int,
    seed: int,
    batch_size: int = 32,
    rates: Mapping[str, float] | None = None,
    optimizer: str | None = None,
    adapt_parts: Sequence[str] | None = None,
) -> tuple[ClientModel, AdaptationTrace, np.ndarray]:
    """Few-shot adaptation on a new task, recording the query learning curve.

    ``theta_init=None`` is random initialization (RI); passing trained
    parameters is meta initialization (MI). The encoder/mapper seed streams do
    not depend on the mode, so RI/MI runs with the same seed are paired. By
    default every part is fine-tuned.

    Returns the adapted model, the per-step trace, and the final per-sample
    query distance errors (native units).
    """
    task.support.validate_model_ready()
    task.query.validate_model_ready()
    root = np.random.SeedSequence(seed)
    alpha_seed, beta_seed, theta_seed, dec_seed, batch_seed = root.spawn(5)
    model = ClientModel.build(
        config,
        m=task.m,
        part_seeds={"encoder": alpha_seed, "decoder": dec_seed, "meta": theta_seed, "mapper": beta_seed},
    )
    mode = "RI" if theta_init is None else "MI"
    if theta_init is not None:
        model.set_part_params("meta", {k: v.copy() for k, v in theta_init.items()})

    trace = AdaptationTrace(task_id=task.task_id, init_mode=mode, seed=seed)
    xs, ys = task.support.rssi, task.normalize_coords(task.support.coords)
    xq = task.query.rssi
    yq_true = task.query.coords
    sampler = ClientState(
        client_id=task.task_id,
        task=task,
        model=model,
        local_steps=steps,
        batch_size=batch_size,
        batch_rng=np.random.default_rng(batch_seed),
    )
    for step in range(1, steps + 1):
        batch = sampler.next_batch()
        model.train_step(xs[batch], ys[batch], rates=rates, parts=adapt_parts, optimizer=optimizer)
        pred = task.denormalize_coords(model.full_forward(xq))
        trace.steps.append(
            TraceStep(step=step, support_loss=model.loss_value(xs, ys), query_mde=mde(pred, yq_true))
        )
    final_pred = task.denormalize_coords(model.full_forward(xq))
    per_sample = np.linalg.norm(final_pred - yq_true, axis=1)
    return model, trace, per_sample
