"""Bi-level meta-training.

Inner level: task heads are fitted on each support set (closed-form ridge, or
a few gradient steps in the MAML ablations). Outer level: one Adam step on
all shared parameters per epoch, from query-set losses averaged over tasks.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import dag_sampler as dags
from . import intervention as intv
from . import likelihood as lik
from . import losses
from .scm import ObservedTask, TaskDataset

MODES = ("analytical", "intv-maml", "full-maml")
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during training."""


class AdaptationDivergedError(TrainingError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    temp_start: float = 1.0
    temp_end: float = 0.2
    temperature_m: float = 0.5
    ridge_lambda: float = 0.1
    hidden: int = 64
    embed_dim: int = 32
    feature_dim: int = 32
    ablation_mode: str = "analytical"
    maml_inner_steps: int = 10
    maml_inner_lr: float = 0.01
    standardize: bool = True
    graph_mc_samples: int = 16
    straight_through: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, Mapping):
            self.weights = losses.LossWeights(**self.weights)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.ablation_mode not in MODES:
            raise ValueError(f"ablation_mode must be one of {MODES}")
        if self.maml_inner_steps < 0 or not self.maml_inner_lr > 0:
            raise ValueError("maml_inner_steps must be >= 0 and maml_inner_lr > 0")
        if not (self.temp_start > 0 and self.temp_end > 0 and self.temperature_m > 0):
            raise ValueError("temperatures must be positive")
        if not self.ridge_lambda > 0:
            raise ValueError("ridge_lambda must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.mean

    def transform_task(self, task):
        return replace(task, support=self.transform(task.support), query=self.transform(task.query))


def fit_standardizer(tasks: Sequence[TaskDataset | ObservedTask]) -> Standardizer:
    """Per-variable mean and scale pooled over support and query rows."""
    rows = np.vstack([np.vstack([t.support, t.query]) for t in tasks])
    if rows.shape[0] < 2:
        raise ValueError("standardize needs at least two pooled rows")
    mean = rows.mean(axis=0)
    scale = rows.std(axis=0)
    flat = scale <= 1e-12
    if np.any(flat):
        warnings.warn(
            f"zero-variance variables {np.flatnonzero(flat).tolist()}; using scale 1",
            RuntimeWarning,
            stacklevel=2,
        )
        scale = np.where(flat, 1.0, scale)
    return Standardizer(mean, scale)


def standardize(tasks: Sequence[TaskDataset]) -> tuple[list[TaskDataset], Standardizer]:
    """Z-score every variable; returns the rescaled tasks and the scaler."""
    scaler = fit_standardizer(tasks)
    return [scaler.transform_task(t) for t in tasks], scaler


@dataclass
class ModelState:
    d: int
    config: TrainConfig
    shared: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    scaler: Standardizer | None = None

    @property
    def rng_seed(self) -> int:
        return self.config.seed

    def temperatures(self, epoch: int | None = None) -> tuple[float, float]:
        e = self.epoch if epoch is None else epoch
        tau = dags.anneal(e, self.config.epochs, self.config.temp_start, self.config.temp_end)
        return tau, tau

    def dag_params(self) -> dags.DagPosteriorParams:
        tau_u, tau_pi = self.temperatures()
        return dags.DagPosteriorParams(
            self.shared["dag.edge_logits"], self.shared["dag.order_scores"], tau_u, tau_pi
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.shared.items()}


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


def init_state(d: int, config: TrainConfig) -> ModelState:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7919]))
    shared = {
        "dag.edge_logits": np.zeros((d, d)),
        "dag.order_scores": np.zeros(d),
    }
    shared.update(intv.init_predictor(rng, d, config.embed_dim, config.hidden))
    spec = lik.MechanismSpec(d, config.hidden, config.feature_dim, config.ridge_lambda)
    shared.update(lik.init_mechanisms(rng, spec, with_heads=config.ablation_mode != "analytical"))
    return ModelState(
        d=d,
        config=config,
        shared=shared,
        adam_m={k: np.zeros_like(v) for k, v in shared.items()},
        adam_v={k: np.zeros_like(v) for k, v in shared.items()},
    )


# ----------------------------------------------------------------- forward


@dataclass
class TaskResult:
    task_id: int
    dag: dags.DagSample
    sample: intv.InterventionSample
    heads: list
    ridge: lik.RidgeFit | None
    components: dict[str, ad.DiffValue] | None

    @property
    def total(self) -> ad.DiffValue | None:
        return self.components["total"] if self.components else None


def forward_task(
    tape: ad.Tape,
    P: Mapping[str, ad.DiffValue],
    task: ObservedTask,
    config: TrainConfig,
    temps: tuple[float, float],
    noise: dags.DagNoise | None = None,
    straight_through: bool | None = None,
) -> TaskResult:
    """Sample a graph and targets, adapt the heads, and score the query set.

    Heads are fitted by ridge regression unless ``P`` carries ``int.heads``
    (the MAML modes, where the caller has already adapted them). With
    ``straight_through=False`` every mask is the soft relaxation, which makes
    the whole pass smooth for finite-difference checks.
    """
    st = config.straight_through if straight_through is None else straight_through
    support = np.asarray(task.support, dtype=np.float64)
    support = support[intv.canonical_order(support)]
    query = np.asarray(task.query, dtype=np.float64)
    n_s, d = support.shape
    if noise is None:
        noise = dags.draw_noise(d, tape.rng)
    dag_params = dags.DagPosteriorParams(P["dag.edge_logits"], P["dag.order_scores"], *temps)
    dag = dags.sample_adjacency(dag_params, noise=noise)
    adj = dag.adjacency(st)

    x_all = np.vstack([support, query]) if query.shape[0] else support
    blocks = lik.trunk_blocks(P, x_all, adj)
    if lik.HEADS in P:
        ridge = None
        heads = lik.head_vectors(P[lik.HEADS])
    else:
        ridge = lik.ridge_adapt(support, adj, P, config.ridge_lambda, blocks=blocks)
        heads = ridge.weights
    x_obs = lik.observational(P, x_all, adj)
    x_int = lik.interventional(blocks, heads)

    n_all = x_all.shape[0]
    if n_all > n_s:
        obs_s, int_s = x_obs[:n_s], x_int[:n_s]
    else:
        obs_s, int_s = x_obs, x_int
    C = intv.feature_matrix(support, obs_s, int_s)
    F = intv.pool(C, P)
    sample = intv.predict_targets(F, P, config.temperature_m, rng=tape.rng)

    components = None
    if query.shape[0]:
        m = sample.mask(st)
        pred = lik.switch(x_obs[n_s:], x_int[n_s:], m)
        residual = query - pred
        components = {
            "recon": losses.recon_loss(query, pred),
            "intv": losses.intv_sparsity(sample.logits),
        }
        if query.shape[0] >= 4:
            components["hsic"] = losses.hsic_residual(residual, config.weights, rng=tape.rng)
        else:
            components["hsic"] = ad.scale(components["recon"], 0.0)
        components["total"] = losses.total_loss([components], None, config.weights)
    return TaskResult(task.task_id, dag, sample, heads, ridge, components)


def graph_loss(
    tape: ad.Tape, P: Mapping[str, ad.DiffValue], config: TrainConfig, temps: tuple[float, float]
) -> ad.DiffValue:
    """KL sparsity on Monte-Carlo edge probabilities from soft ``U`` samples."""
    params = dags.DagPosteriorParams(P["dag.edge_logits"], P["dag.order_scores"], *temps)
    acc = None
    for _ in range(config.graph_mc_samples):
        _, u_soft = dags.sample_upper(params, rng=tape.rng)
        acc = u_soft if acc is None else acc + u_soft
    probs = ad.scale(acc, 1.0 / config.graph_mc_samples)
    return losses.graph_sparsity(probs, config.weights.graph_prior_p)


# ------------------------------------------------------------------- MAML


def adapted_names(shared: Mapping[str, np.ndarray], mode: str) -> list[str]:
    if mode == "intv-maml":
        return lik.interventional_param_names(shared)
    if mode == "full-maml":
        return lik.likelihood_param_names(shared)
    raise ValueError(f"mode {mode!r} has no gradient-based adaptation")


def support_mse(P: Mapping[str, ad.DiffValue], support: np.ndarray, adj, mode: str) -> ad.DiffValue:
    """Inner-loop objective: head fit on the support (plus observational fit in full-maml)."""
    blocks = lik.trunk_blocks(P, support, adj)
    loss = ad.mean(ad.square(support - lik.interventional(blocks, P[lik.HEADS])))
    if mode == "full-maml":
        loss = loss + ad.mean(ad.square(support - lik.observational(P, support, adj)))
    return loss


def inner_gradient_descent(
    values: Mapping[str, np.ndarray],
    names: Iterable[str],
    loss_fn: Callable[[ad.Tape, Mapping[str, ad.DiffValue]], ad.DiffValue],
    steps: int,
    lr: float,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Plain gradient descent on ``names``; everything else stays constant.

    Returns the updated arrays for ``names`` and the loss before each step
    plus the final loss.
    """
    names = list(names)
    current = {k: np.array(values[k], dtype=np.float64) for k in names}
    history = []
    for _ in range(steps):
        tape = ad.Tape()
        P = {k: tape.const(v) for k, v in values.items() if k not in current}
        P.update({k: tape.param(v, name=k) for k, v in current.items()})
        loss = loss_fn(tape, P)
        history.append(float(loss.data))
        grads = tape.backward(loss)
        current = {k: v - lr * grads.get(k, 0.0) for k, v in current.items()}
    if steps:
        tape = ad.Tape()
        P = {k: tape.const(v) for k, v in {**values, **current}.items()}
        history.append(float(loss_fn(tape, P).data))
    return current, history


def maml_adapt(
    shared: Mapping[str, np.ndarray], support: np.ndarray, adjacency: np.ndarray, config: TrainConfig
) -> dict[str, np.ndarray]:
    """Gradient-based adaptation of the likelihood parameters on one support set.

    ``intv-maml`` updates the interventional trunk and heads; ``full-maml``
    updates every likelihood parameter. Raises
    :class:`AdaptationDivergedError` when the support loss grows tenfold.
    """
    mode = config.ablation_mode
    names = adapted_names(shared, mode)
    support = np.asarray(support, dtype=np.float64)
    adjacency = np.asarray(adjacency, dtype=np.float64)

    def loss_fn(tape, P):
        return support_mse(P, support, tape.const(adjacency), mode)

    adapted, history = inner_gradient_descent(
        shared, names, loss_fn, config.maml_inner_steps, config.maml_inner_lr
    )
    if history and history[-1] > 10.0 * history[0]:
        raise AdaptationDivergedError(
            f"inner loop diverged (support loss {history[0]:.4g} -> {history[-1]:.4g}); "
            f"lower maml_inner_lr (currently {config.maml_inner_lr})"
        )
    return adapted


# --------------------------------------------------------------- training


def task_seed(seed: int, epoch: int, task_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, task_id, 1])


def _leaves(tape: ad.Tape, values: Mapping[str, np.ndarray]) -> dict[str, ad.DiffValue]:
    return {k: tape.param(v, name=k) for k, v in values.items()}


def run_task(
    state: ModelState,
    task: ObservedTask,
    seed,
    epoch: int | None = None,
    with_grad: bool = True,
) -> tuple[TaskResult, Mapping[str, np.ndarray] | None]:
    """One task's forward (and backward) pass on a fresh tape seeded with ``seed``."""
    config = state.config
    tape = ad.Tape(seed)
    d = state.d
    if task.support.shape[1] != d:
        raise ValueError(f"task {task.task_id} has d={task.support.shape[1]}, model has d={d}")
    noise = dags.draw_noise(d, tape.rng)
    values = state.shared
    if config.ablation_mode != "analytical":
        support = np.asarray(task.support, dtype=np.float64)
        support = support[intv.canonical_order(support)]
        a_hard = dags.hard_adjacency(values["dag.edge_logits"], values["dag.order_scores"], noise)
        values = {**values, **maml_adapt(values, support, a_hard, config)}
    P = _leaves(tape, values)
    result = forward_task(tape, P, task, config, state.temperatures(epoch), noise=noise)
    grads = None
    if with_grad and result.components is not None:
        grads = tape.backward(result.total)
    return result, grads


def _adam_step(state: ModelState, grads: Mapping[str, np.ndarray]) -> None:
    cfg = state.config
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.adam_m[name] = b1 * state.adam_m[name] + (1.0 - b1) * g
        v = state.adam_v[name] = b2 * state.adam_v[name] + (1.0 - b2) * g * g
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        state.shared[name] = state.shared[name] - update


def train_epoch(
    state: ModelState, tasks: Sequence[ObservedTask | TaskDataset]
) -> tuple[ModelState, list[dict]]:
    """One full-batch outer update. ``tasks`` must already be in model scale.

    Returns the (mutated) state and one loss record per task.
    """
    if not tasks:
        raise ValueError("train_epoch needs at least one meta-training task")
    config = state.config
    epoch = state.epoch
    observed = [t.observed() if isinstance(t, TaskDataset) else t for t in tasks]
    order = np.random.default_rng([config.seed, epoch, 2]).permutation(len(observed))
    total_grads = {k: np.zeros_like(v) for k, v in state.shared.items()}
    records = []
    scale = 1.0 / len(observed)
    for idx in order:
        task = observed[idx]
        if task.query.shape[0] == 0:
            raise ValueError(f"meta-training task {task.task_id} has an empty query set")
        try:
            result, grads = run_task(state, task, task_seed(config.seed, epoch, task.task_id))
        except FloatingPointError as exc:
            raise TrainingError(f"epoch {epoch}, task {task.task_id}: {exc}") from exc
        comps = result.components
        for name, g in grads.items():
            total_grads[name] += scale * g
        records.append(
            {"task_id": int(task.task_id), **{k: float(v.data) for k, v in comps.items()}}
        )
    tape = ad.Tape(np.random.SeedSequence([config.seed, epoch, 3]))
    P = _leaves(tape, {k: state.shared[k] for k in ("dag.edge_logits", "dag.order_scores")})
    lg = graph_loss(tape, P, config, state.temperatures(epoch))
    graph_grads = tape.backward(lg)
    for name, g in graph_grads.items():
        total_grads[name] += config.weights.lambda_G * g
    records.append({"task_id": None, "graph": float(lg.data)})
    _adam_step(state, total_grads)
    state.epoch += 1
    return state, records


def summarize_epoch(state: ModelState, records: Sequence[dict], wall_time: float) -> dict:
    task_recs = [r for r in records if r["task_id"] is not None]
    graph = next(r["graph"] for r in records if r["task_id"] is None)
    mean = {k: float(np.mean([r[k] for r in task_recs])) for k in ("recon", "intv", "hsic", "total")}
    tau_u, tau_pi = state.temperatures(state.epoch - 1)
    return {
        "epoch": state.epoch - 1,
        "mode": state.config.ablation_mode,
        **mean,
        "graph": graph,
        "objective": mean["total"] + state.config.weights.lambda_G * graph,
        "temperature_u": tau_u,
        "temperature_pi": tau_pi,
        "wall_time": wall_time,
    }


def prepare_tasks(state: ModelState, tasks: Sequence[TaskDataset]) -> list[ObservedTask]:
    """Map raw tasks to model scale and strip ground-truth fields."""
    out = []
    for t in tasks:
        obs = t.observed() if isinstance(t, TaskDataset) else t
        if state.scaler is not None:
            obs = state.scaler.transform_task(obs)
        out.append(obs)
    return out


def fit(
    tasks: Sequence[TaskDataset],
    config: TrainConfig,
    state: ModelState | None = None,
    epochs: int | None = None,
    on_epoch: Callable[[ModelState, dict], None] | None = None,
) -> ModelState:
    """Meta-train on raw tasks, creating (or resuming) ``state``.

    ``epochs`` limits how many epochs run in this call; training never goes
    past ``config.epochs``.
    """
    if not tasks:
        raise ValueError("fit needs at least one meta-training task")
    if state is None:
        state = init_state(tasks[0].d, config)
        if config.standardize:
            observed = [t.observed() if isinstance(t, TaskDataset) else t for t in tasks]
            state.scaler = fit_standardizer(observed)
    prepared = prepare_tasks(state, tasks)
    stop = config.epochs if epochs is None else min(config.epochs, state.epoch + epochs)
    while state.epoch < stop:
        start = time.perf_counter()
        state, records = train_epoch(state, prepared)
        summary = summarize_epoch(state, records, time.perf_counter() - start)
        if on_epoch is not None:
            on_epoch(state, summary)
    return state


# ---------------------------------------------------------------- meta-test


def adapt_meta_test(
    state: ModelState, task: TaskDataset | ObservedTask, seed=0
) -> tuple[intv.InterventionSample, lik.RidgeFit | None]:
    """Fit the task heads on the support set and predict intervention targets.

    Shared parameters are read but never written. Only the support rows are
    used; the graph comes from one posterior sample drawn with ``seed``.
    """
    obs = prepare_tasks(state, [task])[0]
    if obs.support.shape[0] < 1:
        raise ValueError("meta-test support is empty")
    support_only = ObservedTask(obs.task_id, obs.support, obs.support[:0])
    result, _ = run_task(state, support_only, seed, with_grad=False)
    return result.sample, result.ridge


# -------------------------------------------------------------- checkpoint


def save_checkpoint(state: ModelState, path: str | Path) -> Path:
    """Write ``manifest.json`` and ``arrays.npz``; round-trips bit-exactly."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, value in state.shared.items():
        arrays[f"param/{name}"] = value
        arrays[f"adam_m/{name}"] = state.adam_m[name]
        arrays[f"adam_v/{name}"] = state.adam_v[name]
    if state.scaler is not None:
        arrays["scaler/mean"] = state.scaler.mean
        arrays["scaler/scale"] = state.scaler.scale
    with open(path / "arrays.npz", "wb") as fh:
        np.savez(fh, **arrays)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "d": state.d,
        "epoch": state.epoch,
        "step": state.step,
        "config": state.config.to_dict(),
        "standardized": state.scaler is not None,
        "parameters": [
            {"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.shared.items()
        ],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> ModelState:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    with np.load(path / "arrays.npz") as data:
        arrays = {k: data[k] for k in data.files}
    shared, adam_m, adam_v = {}, {}, {}
    for entry in manifest["parameters"]:
        name = entry["name"]
        value = arrays[f"param/{name}"]
        if list(value.shape) != entry["shape"]:
            raise ValueError(f"{path}: {name} has shape {value.shape}, manifest says {entry['shape']}")
        shared[name] = value
        adam_m[name] = arrays[f"adam_m/{name}"]
        adam_v[name] = arrays[f"adam_v/{name}"]
    scaler = None
    if manifest["standardized"]:
        scaler = Standardizer(arrays["scaler/mean"], arrays["scaler/scale"])
    return ModelState(
        d=manifest["d"],
        config=TrainConfig.from_dict(manifest["config"]),
        shared=shared,
        adam_m=adam_m,
        adam_v=adam_v,
        step=manifest["step"],
        epoch=manifest["epoch"],
        scaler=scaler,
    )
