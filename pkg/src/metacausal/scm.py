"""Ground-truth additive-noise SCMs, interventional task generation and task I/O.

Mechanisms are random-Fourier-feature draws from an RBF Gaussian process
over each variable's parents; root variables get the zero function.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

N_FEATURES = 64

__all__ = [
    "CycleError",
    "DatasetFormatError",
    "Mechanism",
    "GroundTruthScm",
    "TaskDataset",
    "ObservedTask",
    "Collection",
    "Benchmark",
    "topological_order",
    "is_acyclic",
    "sample_dag",
    "sample_mechanisms",
    "generate_task",
    "make_benchmark",
    "save_tasks",
    "load_tasks",
    "load_collection",
]


class CycleError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def topological_order(adjacency: np.ndarray) -> list[int]:
    """Kahn's algorithm; ``adjacency[j, i] = 1`` means ``j -> i``."""
    adj = np.asarray(adjacency) != 0
    d = adj.shape[0]
    indegree = adj.sum(axis=0).astype(int)
    ready = [i for i in range(d) if indegree[i] == 0]
    order = []
    while ready:
        node = ready.pop()
        order.append(node)
        for child in np.flatnonzero(adj[node]):
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(int(child))
    if len(order) != d:
        raise CycleError("adjacency contains a directed cycle")
    return order


def is_acyclic(adjacency: np.ndarray) -> bool:
    try:
        topological_order(adjacency)
    except CycleError:
        return False
    return True


def sample_dag(d: int, expected_edges_per_node: float, rng: np.random.Generator) -> np.ndarray:
    """Erdos-Renyi DAG over a random causal order.

    Each of the ``d(d-1)/2`` admissible pairs is kept with probability
    ``min(1, 2 * rate / (d - 1))``, so the mean out-degree equals ``rate``.
    """
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    if expected_edges_per_node < 0:
        raise ValueError("expected_edges_per_node must be non-negative")
    p = min(1.0, 2.0 * expected_edges_per_node / max(1, d - 1))
    upper = np.triu(rng.random((d, d)) < p, k=1).astype(np.int64)
    perm = rng.permutation(d)
    adj = np.zeros((d, d), dtype=np.int64)
    adj[np.ix_(perm, perm)] = upper
    return adj


@dataclass(frozen=True)
class Mechanism:
    """``f(x) = sqrt(2/D) * sum_k a_k cos(omega_k . x_pa + b_k)``."""

    parents: np.ndarray
    omega: np.ndarray
    phase: np.ndarray
    amplitude: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.parents.size == 0:
            return np.zeros(x.shape[0])
        proj = x[:, self.parents] @ self.omega.T + self.phase
        return np.sqrt(2.0 / self.omega.shape[0]) * (np.cos(proj) @ self.amplitude)


@dataclass(frozen=True)
class GroundTruthScm:
    d: int
    adjacency: np.ndarray
    mechanisms: tuple[Mechanism, ...]
    noise_scale: np.ndarray

    @property
    def order(self) -> list[int]:
        return topological_order(self.adjacency)


def sample_mechanisms(
    adjacency: np.ndarray,
    rng: np.random.Generator,
    noise_scale: float = 0.1,
    length_scale: float = 1.0,
    n_features: int = N_FEATURES,
) -> GroundTruthScm:
    adjacency = np.asarray(adjacency, dtype=np.int64)
    topological_order(adjacency)
    d = adjacency.shape[0]
    mechs = []
    for i in range(d):
        parents = np.flatnonzero(adjacency[:, i])
        mechs.append(
            Mechanism(
                parents=parents,
                omega=rng.normal(0.0, 1.0 / length_scale, size=(n_features, parents.size)),
                phase=rng.uniform(0.0, 2.0 * np.pi, size=n_features),
                amplitude=rng.normal(size=n_features),
            )
        )
    return GroundTruthScm(d, adjacency, tuple(mechs), np.full(d, float(noise_scale)))


@dataclass
class ObservedTask:
    """What inference code is allowed to see of a task."""

    task_id: int
    support: np.ndarray
    query: np.ndarray


@dataclass
class TaskDataset:
    task_id: int
    support: np.ndarray
    query: np.ndarray
    true_targets: np.ndarray | None = None
    is_meta_test: bool = False

    @property
    def d(self) -> int:
        return self.support.shape[1]

    def observed(self) -> ObservedTask:
        return ObservedTask(self.task_id, self.support, self.query)


INTERVENTION_VALUE_MEAN = 2.0
SOFT_SHIFT = 2.0


def _simulate(scm: GroundTruthScm, targets: np.ndarray, kind: str, n: int, rng) -> np.ndarray:
    x = np.zeros((n, scm.d))
    for i in scm.order:
        if targets[i] and kind == "hard":
            x[:, i] = rng.normal(INTERVENTION_VALUE_MEAN, 1.0, size=n)
            continue
        value = scm.mechanisms[i](x) + rng.normal(0.0, scm.noise_scale[i], size=n)
        if targets[i]:
            value = value + SOFT_SHIFT
        x[:, i] = value
    return x


def generate_task(
    scm: GroundTruthScm,
    targets: Sequence[int],
    kind: str,
    n_support: int,
    n_query: int,
    rng: np.random.Generator,
    task_id: int = 0,
    is_meta_test: bool = False,
) -> TaskDataset:
    """Ancestral sampling under a hard (value ~ N(2, 1)) or soft (+2 shift) intervention."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (scm.d,):
        raise ValueError(f"targets must have length {scm.d}, got shape {targets.shape}")
    if kind not in ("hard", "soft"):
        raise ValueError(f"unknown intervention kind {kind!r}")
    if n_support < 1:
        raise ValueError("n_support must be >= 1")
    if n_query < 0:
        raise ValueError("n_query must be >= 0")
    x = _simulate(scm, targets, kind, n_support + n_query, rng)
    return TaskDataset(
        task_id=task_id,
        support=x[:n_support],
        query=x[n_support:],
        true_targets=targets.copy(),
        is_meta_test=is_meta_test,
    )


@dataclass
class Collection:
    tasks: list[TaskDataset]
    meta: dict = field(default_factory=dict)
    adjacency: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.tasks[0].d


@dataclass
class Benchmark:
    scm: GroundTruthScm
    train: list[TaskDataset]
    test: list[TaskDataset]
    meta: dict


def _draw_targets(d: int, n_targets: int, observational_fraction: float, rng) -> np.ndarray:
    targets = np.zeros(d, dtype=np.int64)
    if n_targets == 0 or rng.random() < observational_fraction:
        return targets
    targets[rng.choice(d, size=n_targets, replace=False)] = 1
    return targets


def make_benchmark(
    d: int = 10,
    n_train: int = 20,
    n_test: int = 20,
    n_support: int = 10,
    n_query: int = 100,
    n_test_support: int = 10,
    kind: str = "hard",
    n_targets: int = 1,
    observational_fraction: float = 0.1,
    expected_edges_per_node: float = 1.0,
    noise_scale: float = 0.1,
    seed: int = 0,
) -> Benchmark:
    """One simulated system with meta-training and meta-test task collections.

    Every task draws from its own child seed, so tasks are reproducible in
    isolation.
    """
    if not 0 <= n_targets <= 3:
        raise ValueError("n_targets must be in 0..3")
    root = np.random.SeedSequence(seed)
    graph_seq, mech_seq, task_seq = root.spawn(3)
    adjacency = sample_dag(d, expected_edges_per_node, np.random.default_rng(graph_seq))
    scm = sample_mechanisms(adjacency, np.random.default_rng(mech_seq), noise_scale=noise_scale)
    child = task_seq.spawn(n_train + n_test)
    train, test = [], []
    for t in range(n_train + n_test):
        rng = np.random.default_rng(child[t])
        is_test = t >= n_train
        targets = _draw_targets(d, n_targets, observational_fraction, rng)
        task = generate_task(
            scm,
            targets,
            kind,
            n_test_support if is_test else n_support,
            0 if is_test else n_query,
            rng,
            task_id=t,
            is_meta_test=is_test,
        )
        (test if is_test else train).append(task)
    meta = {
        "d": d,
        "seed": seed,
        "kind": kind,
        "n_targets": n_targets,
        "observational_fraction": observational_fraction,
        "expected_edges_per_node": expected_edges_per_node,
        "noise_scale": noise_scale,
    }
    return Benchmark(scm, train, test, meta)


# ------------------------------------------------------------------ disk I/O

FORMAT_VERSION = 1


def _fmt(x: float) -> str:
    return "%.17g" % x


def save_tasks(
    tasks: Sequence[TaskDataset],
    path: str | Path,
    meta: dict | None = None,
    adjacency: np.ndarray | None = None,
) -> Path:
    """Write a task collection directory (``meta.json`` + per-task CSVs)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not tasks:
        raise ValueError("no tasks to save")
    d = tasks[0].d
    for task in tasks:
        if task.d != d:
            raise ValueError(f"task {task.task_id} has d={task.d}, expected {d}")
    header = {
        "format_version": FORMAT_VERSION,
        "d": d,
        "T": len(tasks),
        **(meta or {}),
        "tasks": [
            {"task_id": int(t.task_id), "is_meta_test": bool(t.is_meta_test)} for t in tasks
        ],
    }
    (path / "meta.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    names = [f"x_{i + 1}" for i in range(d)]
    for task in tasks:
        with open(path / f"task_{task.task_id}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names + ["split"])
            for row in task.support:
                writer.writerow([_fmt(v) for v in row] + ["support"])
            for row in task.query:
                writer.writerow([_fmt(v) for v in row] + ["query"])
        if task.true_targets is not None:
            with open(path / f"targets_{task.task_id}.csv", "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [str(int(v)) for v in task.true_targets]
                )
    if adjacency is not None:
        with open(path / "graph.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in np.asarray(adjacency):
                writer.writerow([str(int(v)) for v in row])
    return path


def _parse_float(cell: str, where: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DatasetFormatError(f"{where}: non-numeric cell {cell!r}") from None


def _read_task_csv(file: Path, d: int | None) -> tuple[np.ndarray, np.ndarray]:
    with open(file, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError(f"{file}:1: empty file")
    header = rows[0]
    if len(header) < 2 or header[-1] != "split":
        raise DatasetFormatError(f"{file}:1: malformed header, last column must be 'split'")
    width = len(header) - 1
    expected = [f"x_{i + 1}" for i in range(width)]
    if header[:-1] != expected:
        raise DatasetFormatError(f"{file}:1: malformed header, expected columns {expected}")
    if d is not None and width != d:
        raise DatasetFormatError(f"{file}:1: has {width} variables, collection has d={d}")
    support, query = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        where = f"{file}:{lineno}"
        if len(row) != width + 1:
            raise DatasetFormatError(f"{where}: expected {width + 1} cells, got {len(row)}")
        values = [_parse_float(c, where) for c in row[:-1]]
        if row[-1] == "support":
            support.append(values)
        elif row[-1] == "query":
            query.append(values)
        else:
            raise DatasetFormatError(f"{where}: split must be support|query, got {row[-1]!r}")
    if not support:
        raise DatasetFormatError(f"{file}: no support rows")
    return (
        np.asarray(support, dtype=np.float64).reshape(-1, width),
        np.asarray(query, dtype=np.float64).reshape(-1, width),
    )


def _read_binary_rows(file: Path, width: int) -> np.ndarray:
    with open(file, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    out = []
    for lineno, row in enumerate(rows, start=1):
        if len(row) != width:
            raise DatasetFormatError(f"{file}:{lineno}: expected {width} cells, got {len(row)}")
        vals = [_parse_float(c, f"{file}:{lineno}") for c in row]
        if any(v not in (0.0, 1.0) for v in vals):
            raise DatasetFormatError(f"{file}:{lineno}: entries must be 0 or 1")
        out.append(vals)
    return np.asarray(out, dtype=np.int64)


def load_collection(path: str | Path) -> Collection:
    """Read a collection directory.

    ``meta.json`` is optional so that externally simulated exports (one CSV
    per experiment) can be ingested; tasks without a ``targets_<t>.csv``
    carry ``true_targets=None``.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is not a directory")
    meta: dict = {}
    meta_file = path / "meta.json"
    if meta_file.exists():
        try:
            meta = json.loads(meta_file.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{meta_file}:{exc.lineno}: malformed header ({exc.msg})") from None
        if not isinstance(meta, dict) or "d" not in meta:
            raise DatasetFormatError(f"{meta_file}:1: malformed header, missing 'd'")
        entries = meta.get("tasks") or []
        task_info = [(int(e["task_id"]), bool(e.get("is_meta_test", False))) for e in entries]
    else:
        ids = sorted(int(f.stem.split("_", 1)[1]) for f in path.glob("task_*.csv"))
        task_info = [(t, False) for t in ids]
    if not task_info:
        raise DatasetFormatError(f"{path}: no tasks found")
    d = meta.get("d")
    tasks = []
    for task_id, is_test in task_info:
        support, query = _read_task_csv(path / f"task_{task_id}.csv", d)
        d = support.shape[1]
        target_file = path / f"targets_{task_id}.csv"
        targets = None
        if target_file.exists():
            rows = _read_binary_rows(target_file, d)
            if rows.shape[0] != 1:
                raise DatasetFormatError(f"{target_file}: expected exactly one row")
            targets = rows[0]
        tasks.append(TaskDataset(task_id, support, query, targets, is_test))
    adjacency = None
    graph_file = path / "graph.csv"
    if graph_file.exists():
        adjacency = _read_binary_rows(graph_file, d)
        if adjacency.shape != (d, d):
            raise DatasetFormatError(f"{graph_file}: expected a {d}x{d} matrix")
    return Collection(tasks, meta, adjacency)


def load_tasks(path: str | Path) -> list[TaskDataset]:
    return load_collection(path).tasks
