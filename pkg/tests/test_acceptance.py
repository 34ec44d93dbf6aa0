"""Acceptance suite: one or more tests per criterion, named ``test_criterion_<n>_*``.

The conftest prints a pass/fail line per criterion at the end of the run.
Criteria 5 and 7 train five full-size models and take most of an hour on one
core; they are marked ``slow`` but still run by default.
"""

import inspect
import json
import time

import numpy as np
import pytest

from metacausal import autodiff as ad
from metacausal import cli, diagnostics, intervention, likelihood, losses, metrics, scm, trainer
from metacausal import dag_sampler as dags
from oracles import (
    auprc_step,
    auroc_pairwise,
    hsic_double_loop,
    random_dag,
    ridge_by_gradient_descent,
    sid_linear_gaussian,
)

N_SEEDS = 5
CPU_BUDGET_S = 15 * 60


# ------------------------------------------------------------ criterion 1


def test_criterion_1_acyclicity(record):
    rng = np.random.default_rng(2024)
    dims = (3, 6, 12)
    n_settings, per_setting = 50, 200
    cycles = 0
    start = time.perf_counter()
    for k in range(n_settings):
        d = dims[k % len(dims)]
        scale = rng.choice([0.1, 1.0, 10.0, 50.0])
        phi = rng.normal(0.0, scale, (d, d))
        psi = rng.normal(0.0, scale, d)
        samples = dags.sample_hard(phi, psi, per_setting, rng)
        cycles += sum(not scm.is_acyclic(a) for a in samples)
    elapsed = time.perf_counter() - start
    record(f"{n_settings * per_setting} samples, {cycles} cycles, {elapsed:.1f} s")
    assert cycles == 0
    assert elapsed < 30.0


# ------------------------------------------------------------ criterion 2


def test_criterion_2_ridge_matches_gradient_descent(record):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        h = rng.normal(size=(10, 32))
        y = rng.normal(size=10)
        closed = likelihood.ridge_solve(ad.Tape().const(h), y, 0.1).data
        gd = ridge_by_gradient_descent(h, y, 0.1)
        worst = max(worst, np.linalg.norm(closed - gd) / np.linalg.norm(gd))
    record(f"max rel err {worst:.2e}")
    assert worst < 1e-4


# ------------------------------------------------------------ criterion 3


@pytest.mark.parametrize("seed", [0, 1])
def test_criterion_3_gradient_integrity(seed, record):
    results = diagnostics.check_gradients(seed=seed, coords_per_group=10)
    groups = {r.group for r in results}
    assert {"dag", "pool", "logit", "obs", "int"} <= groups
    assert {r.component for r in results} == set(diagnostics.COMPONENTS)
    worst = max(r.max_rel_error for r in results)
    record(f"seed {seed}: {len(results)} component/group pairs, max rel err {worst:.1e}")
    assert all(r.passed for r in results), diagnostics.format_table(results)


# ------------------------------------------------------------ criterion 4


def test_criterion_4_hsic_oracle(record):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        n, d = int(rng.integers(4, 60)), int(rng.integers(2, 6))
        r = rng.normal(size=(n, d))
        r[:, 1] += rng.normal() * r[:, 0] ** 2
        widths = [losses.median_bandwidth(r[:, i]) for i in range(d)]
        got = losses.hsic_residual(ad.Tape().const(r)).data
        worst = max(worst, abs(got - hsic_double_loop(r, widths)))
    record(f"HSIC max abs err {worst:.1e}")
    assert worst < 1e-10


def test_criterion_4_ranking_oracles(record):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 40))
        scores = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
        labels = rng.random(n) < 0.3
        if labels.all() or not labels.any():
            continue
        worst = max(
            worst,
            abs(metrics.auroc(scores, labels) - auroc_pairwise(scores, labels)),
            abs(metrics.auprc(scores, labels) - auprc_step(scores, labels)),
        )
    record(f"AUROC/AUPRC max abs err {worst:.1e}")
    assert worst < 1e-12


def test_criterion_4_sid_oracle(record):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(100):
        d = int(rng.integers(2, 6))
        truth, estimate = random_dag(d, rng), random_dag(d, rng)
        mismatches += metrics.sid(estimate, truth) != sid_linear_gaussian(estimate, truth, rng)
    record(f"SID mismatches {mismatches}/100")
    assert mismatches == 0


# ------------------------------------------------------------ criterion 5


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Five default-size simulations (seeds 0..4) through the command-line pipeline."""
    root = tmp_path_factory.mktemp("acceptance") / "sims"
    config = cli.parse_config({"seed": 0, "n_simulations": N_SEEDS})
    cli.run_pipeline(config, root)
    reports = [json.loads((root / f"sim_{k}" / "report.json").read_text()) for k in range(N_SEEDS)]
    return root, config, reports


def _prior_e_shd(root, k, report):
    data = root / f"sim_{k}" / "data"
    test = scm.load_collection(data / "test")
    prior = trainer.init_state(test.tasks[0].d, trainer.TrainConfig.from_dict(report["train_config"]))
    result = metrics.evaluate(
        prior, test.tasks, test.adjacency, n_samples=report["n_posterior_samples"], seed=report["seed"],
        n_permutations=0,
    )
    return result.e_shd


def _true_targets(root, k, report):
    test = scm.load_collection(root / f"sim_{k}" / "data" / "test")
    by_id = {str(t.task_id): t.true_targets for t in test.tasks}
    ids = list(report["metrics"]["task_scores"])
    scores = np.concatenate([report["metrics"]["task_scores"][i] for i in ids])
    labels = np.concatenate([by_id[i] for i in ids])
    return scores, labels


@pytest.mark.slow
def test_criterion_5_runtime_budget(pipeline, record):
    root, _, _ = pipeline
    times = []
    for k in range(N_SEEDS):
        lines = (root / f"sim_{k}" / "run" / "train_log.jsonl").read_text().splitlines()
        times.append(sum(json.loads(x)["wall_time"] for x in lines))
    record("train s/seed " + ", ".join(f"{t:.0f}" for t in times))
    assert max(times) < CPU_BUDGET_S


@pytest.mark.slow
def test_criterion_5a_intervention_auroc(pipeline, record):
    root, _, reports = pipeline
    per_seed = [r["metrics"]["intv_auroc"] for r in reports]
    mean_auc = float(np.mean(per_seed))
    # null of the seed-averaged AUROC: labels permuted within each seed
    pooled = [_true_targets(root, k, r) for k, r in enumerate(reports)]
    rng = np.random.default_rng(99)
    null = np.array(
        [np.mean([metrics.auroc(s, rng.permutation(y)) for s, y in pooled]) for _ in range(1000)]
    )
    p99 = float(np.quantile(null, 0.99))
    record(
        "intv AUROC per seed " + ", ".join(f"{a:.3f}" for a in per_seed)
        + f", mean {mean_auc:.3f}, null p99 {p99:.3f}"
    )
    assert mean_auc >= 0.65
    assert mean_auc > p99


@pytest.mark.slow
def test_criterion_5b_eshd_below_prior(pipeline, record):
    root, _, reports = pipeline
    trained = [r["metrics"]["e_shd"] for r in reports]
    prior = [_prior_e_shd(root, k, r) for k, r in enumerate(reports)]
    record("E-SHD trained/prior " + ", ".join(f"{a:.2f}/{b:.2f}" for a, b in zip(trained, prior)))
    assert all(a < b for a, b in zip(trained, prior))


@pytest.mark.slow
def test_criterion_5c_analytical_faster_than_full_maml(pipeline, record):
    root, config, _ = pipeline
    tasks = scm.load_collection(root / "sim_0" / "data" / "train").tasks
    states, prepared = {}, {}
    for mode in ("analytical", "full-maml"):
        cfg = config.train_config()
        cfg = trainer.TrainConfig.from_dict({**cfg.to_dict(), "ablation_mode": mode})
        states[mode] = trainer.init_state(tasks[0].d, cfg)
        states[mode].scaler = trainer.fit_standardizer([t.observed() for t in tasks])
        prepared[mode] = trainer.prepare_tasks(states[mode], tasks)
    times = {mode: [] for mode in states}
    for round_ in range(4):
        # alternate modes so background load hits both alike; round 0 is warm-up
        for mode in states:
            start = time.perf_counter()
            trainer.train_epoch(states[mode], prepared[mode])
            if round_:
                times[mode].append(time.perf_counter() - start)
    fast, slow = np.median(times["analytical"]), np.median(times["full-maml"])
    record(f"s/epoch analytical {fast:.2f}, full-maml {slow:.2f}, ratio {fast / slow:.2f}")
    assert fast < 0.5 * slow


# ------------------------------------------------------------ criterion 6


class SealedTask(scm.TaskDataset):
    @property
    def true_targets(self):
        raise AssertionError("inference code read true_targets")

    @true_targets.setter
    def true_targets(self, value):
        pass


def test_criterion_6_meta_test_leaves_parameters_unchanged(record):
    bench = scm.make_benchmark(d=5, n_train=4, n_test=3, n_query=30, seed=1)
    cfg = trainer.TrainConfig(epochs=3, hidden=16, embed_dim=8, feature_dim=8, graph_mc_samples=4)
    state = trainer.fit(bench.train, cfg)
    before = state.snapshot()
    moments = {k: (state.adam_m[k].copy(), state.adam_v[k].copy()) for k in state.shared}
    for task in bench.test:
        trainer.adapt_meta_test(state, task, seed=task.task_id)
    metrics.evaluate(state, bench.test, bench.scm.adjacency, n_samples=5, n_permutations=10)
    changed = [k for k in before if not np.array_equal(before[k], state.shared[k])]
    for k, (m, v) in moments.items():
        if not (np.array_equal(m, state.adam_m[k]) and np.array_equal(v, state.adam_v[k])):
            changed.append(f"adam/{k}")
    record(f"{len(before)} arrays checked, {len(changed)} changed")
    assert not changed
    assert state.epoch == 3 and state.step == 3


def test_criterion_6_true_targets_unreachable(record):
    bench = scm.make_benchmark(d=4, n_train=3, n_test=2, n_query=20, seed=2)
    seal = lambda ts: [SealedTask(t.task_id, t.support, t.query, None) for t in ts]  # noqa: E731
    cfg = trainer.TrainConfig(epochs=2, hidden=16, embed_dim=8, feature_dim=8, graph_mc_samples=4)
    state = trainer.fit(seal(bench.train), cfg)
    for task in seal(bench.test):
        trainer.adapt_meta_test(state, task, seed=0)
    assert "true_targets" not in scm.ObservedTask.__dataclass_fields__
    inference_modules = (trainer, intervention, likelihood, losses, dags)
    leaks = [m.__name__ for m in inference_modules if "true_targets" in inspect.getsource(m)]
    record(f"sealed fit + adapt ok, source references in inference modules: {leaks or 'none'}")
    assert not leaks


# ------------------------------------------------------------ criterion 7


@pytest.mark.slow
def test_criterion_7_pipeline_reports_identical(pipeline, tmp_path, record):
    root, _, _ = pipeline
    config = cli.parse_config({"seed": 0, "n_simulations": 1})
    cli.run_pipeline(config, tmp_path / "again")
    first = (root / "sim_0" / "report.json").read_bytes()
    second = (tmp_path / "again" / "sim_0" / "report.json").read_bytes()
    record(f"byte-identical: {first == second} ({len(first)} bytes)")
    assert first == second
