"""Graph and intervention-target metrics.

Adjacency convention throughout: ``A[j, i] = 1`` means ``j -> i``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import dag_sampler as dags
from .scm import CycleError, is_acyclic
from .trainer import adapt_meta_test

MAX_SID_NODES = 20


def _binary(adjacency) -> np.ndarray:
    a = np.asarray(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    return (a != 0).astype(np.int8)


def shd(estimated, truth) -> int:
    """Structural Hamming distance; a reversed edge costs 1."""
    est, true = _binary(estimated), _binary(truth)
    if est.shape != true.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {true.shape}")
    diff = est != true
    # a reversal shows up as two mismatches, at (i, j) and (j, i)
    pair_diff = np.triu(diff | diff.T, k=1)
    return int(pair_diff.sum())


def e_shd(samples: np.ndarray, truth) -> float:
    """Mean SHD over a stack of sampled adjacency matrices ``(M, d, d)``."""
    return float(np.mean(per_sample(shd, samples, truth)))


def per_sample(metric: Callable, samples, truth) -> np.ndarray:
    samples = np.asarray(samples)
    if samples.ndim == 2:
        samples = samples[None]
    if samples.shape[0] < 1:
        raise ValueError("need at least one sample")
    return np.array([metric(s, truth) for s in samples], dtype=np.float64)


# ------------------------------------------------------------- d-separation


def ancestors(adj: np.ndarray, nodes) -> set[int]:
    """``nodes`` together with all their ancestors."""
    seen = set(nodes)
    stack = list(nodes)
    while stack:
        v = stack.pop()
        for p in np.flatnonzero(adj[:, v]):
            p = int(p)
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def descendants(adj: np.ndarray, nodes) -> set[int]:
    """``nodes`` together with all their descendants."""
    return ancestors(adj.T, nodes)


def d_separated(adj, xs, ys, zs) -> bool:
    """True when ``xs`` and ``ys`` are d-separated given ``zs``.

    Uses the moral graph of the ancestral set of ``xs | ys | zs``.
    """
    adj = _binary(adj)
    xs, ys, zs = set(xs), set(ys), set(zs)
    if xs & ys:
        return False
    keep = sorted(ancestors(adj, xs | ys | zs))
    sub = adj[np.ix_(keep, keep)].astype(bool)
    moral = sub | sub.T
    for child in range(len(keep)):
        parents = np.flatnonzero(sub[:, child])
        moral[np.ix_(parents, parents)] = True
    np.fill_diagonal(moral, False)
    index = {v: k for k, v in enumerate(keep)}
    blocked = {index[z] for z in zs}
    targets = {index[y] for y in ys}
    stack = [index[x] for x in xs]
    seen = set(stack)
    while stack:
        v = stack.pop()
        if v in targets:
            return False
        for w in np.flatnonzero(moral[v]):
            w = int(w)
            if w not in seen and w not in blocked:
                seen.add(w)
                stack.append(w)
    return True


def valid_adjustment(adj, x: int, y: int, z) -> bool:
    """Generalized adjustment criterion for the effect of ``x`` on ``y``.

    ``z`` must avoid every descendant of a non-``x`` node on a proper causal
    path, and must d-separate ``x`` from ``y`` once the first edge of each
    proper causal path is removed.
    """
    adj = _binary(adj)
    z = set(z)
    if x in z or y in z:
        return False
    reach_from_x = descendants(adj, {x}) - {x}
    # nodes on proper causal paths x -> ... -> y, excluding x
    on_path = reach_from_x & ancestors(adj, {y}) if y in reach_from_x else set()
    forbidden = descendants(adj, on_path) if on_path else set()
    if z & forbidden:
        return False
    backdoor = adj.copy()
    for w in on_path:
        backdoor[x, w] = 0
    return d_separated(backdoor, {x}, {y}, z)


def sid(estimated, truth) -> int:
    """Structural intervention distance from ``truth`` to ``estimated``.

    Counts ordered pairs ``(i, j)`` for which the estimated parents of ``i``
    give a wrong ``p(x_j | do(x_i))`` under the true graph.
    """
    est, true = _binary(estimated), _binary(truth)
    if est.shape != true.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {true.shape}")
    d = true.shape[0]
    if d > MAX_SID_NODES:
        raise ValueError(f"sid is limited to d <= {MAX_SID_NODES}, got {d}")
    for name, g in (("estimated", est), ("truth", true)):
        if not is_acyclic(g):
            raise CycleError(f"{name} graph is cyclic")
    errors = 0
    for i in range(d):
        parents = {int(p) for p in np.flatnonzero(est[:, i])}
        desc = descendants(true, {i})
        for j in range(d):
            if j == i:
                continue
            if j in parents:
                # the estimate claims no effect of i on j
                errors += j in desc
            elif not valid_adjustment(true, i, j, parents):
                errors += 1
    return errors


def e_sid(samples: np.ndarray, truth) -> float:
    return float(np.mean(per_sample(sid, samples, truth)))


# ----------------------------------------------------------------- ranking


def auroc(scores, labels) -> float | None:
    """Mann-Whitney AUROC with midranks for ties; ``None`` for single-class labels."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float | None:
    """Average precision, ``sum_k (R_k - R_{k-1}) P_k`` over distinct thresholds."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # evaluate only at the last index of each tied score block
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = tp[last]
    precision = tp / (last + 1.0)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def permutation_null(
    scores, labels, n_permutations: int = 1000, rng: np.random.Generator | None = None,
    metric: Callable = auroc,
) -> np.ndarray:
    """Metric values under random relabelling (label counts preserved)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = np.asarray(labels).ravel()
    out = np.empty(n_permutations)
    for k in range(n_permutations):
        value = metric(scores, rng.permutation(labels))
        out[k] = np.nan if value is None else value
    return out


# ------------------------------------------------------------------ report


def _stderr(values: np.ndarray) -> float:
    """Monte-Carlo standard error of the mean."""
    return float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0


@dataclass
class EvalReport:
    e_shd: float
    e_shd_se: float
    e_sid: float | None
    e_sid_se: float | None
    graph_auroc: float | None
    graph_auprc: float | None
    intv_auroc: float | None
    intv_auprc: float | None
    intv_auroc_null_p99: float | None
    intv_auroc_null_mean: float | None
    intv_auroc_null_std: float | None
    n_posterior_samples: int
    n_tasks: int
    task_scores: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(
    graph_samples: np.ndarray,
    edge_probs: np.ndarray,
    true_adjacency: np.ndarray,
    task_scores: Sequence[np.ndarray],
    true_targets: Sequence[np.ndarray],
    task_ids: Sequence[int] | None = None,
    n_permutations: int = 1000,
    rng: np.random.Generator | None = None,
) -> EvalReport:
    """Build a report from posterior samples and per-task intervention scores.

    Intervention scores are pooled across tasks into one AUROC/AUPRC.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    truth = _binary(true_adjacency)
    d = truth.shape[0]
    samples = np.asarray(graph_samples)
    m = samples.shape[0]
    shds = per_sample(shd, samples, truth)
    if d <= MAX_SID_NODES:
        sids = per_sample(sid, samples, truth)
        e_sid_value, e_sid_se = float(sids.mean()), _stderr(sids)
    else:
        e_sid_value = e_sid_se = None
    off = ~np.eye(d, dtype=bool)
    graph_scores, graph_labels = np.asarray(edge_probs)[off], truth[off]

    scores = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in task_scores])
    labels = np.concatenate([np.asarray(t).ravel() for t in true_targets])
    intv_auc = auroc(scores, labels)
    null_p99 = null_mean = null_std = None
    if intv_auc is not None and n_permutations > 0:
        null = permutation_null(scores, labels, n_permutations, rng)
        null_p99 = float(np.quantile(null, 0.99))
        null_mean, null_std = float(null.mean()), float(null.std(ddof=1))
    ids = list(task_ids) if task_ids is not None else list(range(len(task_scores)))
    return EvalReport(
        e_shd=float(shds.mean()),
        e_shd_se=_stderr(shds),
        e_sid=e_sid_value,
        e_sid_se=e_sid_se,
        graph_auroc=auroc(graph_scores, graph_labels),
        graph_auprc=auprc(graph_scores, graph_labels),
        intv_auroc=intv_auc,
        intv_auprc=auprc(scores, labels),
        intv_auroc_null_p99=null_p99,
        intv_auroc_null_mean=null_mean,
        intv_auroc_null_std=null_std,
        n_posterior_samples=m,
        n_tasks=len(task_scores),
        task_scores={str(t): [float(v) for v in np.ravel(s)] for t, s in zip(ids, task_scores)},
    )


def evaluate(
    state,
    test_tasks,
    truth: np.ndarray | None,
    n_samples: int = 100,
    seed: int = 0,
    n_permutations: int = 1000,
) -> EvalReport:
    """Score a trained model on meta-test tasks against the ground truth.

    Graph metrics use ``n_samples`` hard posterior samples; intervention
    scores are ``sigmoid(logits)`` after support-only adaptation of each task.
    """
    missing = []
    if truth is None:
        missing.append("adjacency")
    absent = [t.task_id for t in test_tasks if getattr(t, "true_targets", None) is None]
    if absent:
        missing.append(f"true_targets (tasks {absent})")
    if missing:
        raise ValueError("evaluation needs ground truth; missing: " + ", ".join(missing))
    if np.shape(truth) != (state.d, state.d):
        raise ValueError(f"truth adjacency has shape {np.shape(truth)}, model has d={state.d}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    phi, psi = state.shared["dag.edge_logits"], state.shared["dag.order_scores"]
    samples = dags.sample_hard(phi, psi, n_samples, rng)
    probs = samples.mean(axis=0)
    np.fill_diagonal(probs, 0.0)
    scores = []
    for task in test_tasks:
        sample, _ = adapt_meta_test(state, task, seed=np.random.SeedSequence([seed, 23, task.task_id]))
        scores.append(sample.scores)
    return summarize(
        samples,
        probs,
        truth,
        scores,
        [t.true_targets for t in test_tasks],
        [t.task_id for t in test_tasks],
        n_permutations=n_permutations,
        rng=np.random.default_rng(np.random.SeedSequence([seed, 29])),
    )
