"""Command-line driver: generate data, train, adapt, evaluate, and run whole pipelines.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from . import diagnostics, metrics, scm, trainer
from .losses import LossWeights

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class DataConfig:
    d: int = 10
    n_train_tasks: int = 20
    n_test_tasks: int = 20
    n_support: int = 10
    n_query: int = 100
    n_test_support: int = 10
    intervention_kind: str = "hard"
    n_targets: int = 1
    observational_fraction: float = 0.1
    expected_edges_per_node: float = 1.0
    noise_scale: float = 0.1


@dataclass
class EvalConfig:
    n_posterior_samples: int = 100
    n_permutations: int = 1000


def _train_defaults() -> dict:
    cfg = trainer.TrainConfig().to_dict()
    cfg.pop("weights")
    cfg.pop("seed")
    return cfg


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_simulations: int = 1
    workers: int = 1
    checkpoint_every: int = 50
    output_dir: str = "runs"
    dataset_path: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    train: dict = field(default_factory=_train_defaults)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(seed=self.seed, weights=self.loss, **self.train)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_section(raw: Any, defaults: Mapping[str, Any], where: str) -> dict:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    out = {}
    for key, value in raw.items():
        default = defaults[key]
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif isinstance(default, str):
            ok = isinstance(value, str)
        else:
            ok = value is None or isinstance(value, str)
        if not ok:
            raise ConfigError(f"{where}.{key}: expected {type(default).__name__}, got {value!r}")
        out[key] = value
    return out


def parse_config(raw: Mapping) -> ExperimentConfig:
    """Strict parse: unknown keys or wrongly typed values raise :class:`ConfigError`."""
    base = ExperimentConfig()
    top_defaults = {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}
    scalars = {k: v for k, v in top_defaults.items() if k not in ("data", "train", "loss", "eval")}
    if not isinstance(raw, Mapping):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(raw) - set(top_defaults))
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    top = _check_section({k: v for k, v in raw.items() if k in scalars}, scalars, "config")
    data = _check_section(raw.get("data", {}), asdict(base.data), "data")
    train = _check_section(raw.get("train", {}), base.train, "train")
    loss = _check_section(raw.get("loss", {}), asdict(base.loss), "loss")
    ev = _check_section(raw.get("eval", {}), asdict(base.eval), "eval")
    try:
        config = ExperimentConfig(
            **top,
            data=DataConfig(**data),
            train={**base.train, **train},
            loss=LossWeights(**loss),
            eval=EvalConfig(**ev),
        )
        config.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if config.n_simulations < 1 or config.workers < 1 or config.checkpoint_every < 1:
        raise ConfigError("n_simulations, workers and checkpoint_every must be >= 1")
    if config.data.intervention_kind not in ("hard", "soft"):
        raise ConfigError("data.intervention_kind must be 'hard' or 'soft'")
    return config


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return parse_config(raw)


def apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Command-line flags win over the config file."""
    raw = config.to_dict()
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "simulations", None) is not None:
        raw["n_simulations"] = args.simulations
    if getattr(args, "workers", None) is not None:
        raw["workers"] = args.workers
    if getattr(args, "mode", None) is not None:
        raw["train"]["ablation_mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        raw["train"]["epochs"] = args.epochs
    if getattr(args, "d", None) is not None:
        raw["data"]["d"] = args.d
    if getattr(args, "tasks", None) is not None:
        raw["data"]["n_train_tasks"] = raw["data"]["n_test_tasks"] = args.tasks
    if getattr(args, "observational_fraction", None) is not None:
        raw["data"]["observational_fraction"] = args.observational_fraction
    return parse_config(raw)


def default_config_json() -> str:
    return json.dumps(ExperimentConfig().to_dict(), indent=2, sort_keys=True) + "\n"


# ----------------------------------------------------------------- helpers


def directory_digest(path: str | Path) -> str:
    """SHA-256 over relative file names and contents, in sorted order."""
    path = Path(path)
    h = hashlib.sha256()
    for file in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(file.relative_to(path).as_posix().encode())
        h.update(b"\0")
        h.update(file.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def prepare_output(path: str | Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise FileExistsError(f"{path} exists and is not empty; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def resolve_collection(path: str | Path, split: str) -> scm.Collection:
    """Load ``path/split`` for a generated dataset, or ``path`` itself for a bare collection."""
    path = Path(path)
    sub = path / split
    return scm.load_collection(sub if sub.is_dir() else path)


# ---------------------------------------------------------------- commands


def generate(config: ExperimentConfig, out: str | Path, force: bool = False) -> str:
    out = prepare_output(out, force)
    dc = config.data
    bench = scm.make_benchmark(
        d=dc.d,
        n_train=dc.n_train_tasks,
        n_test=dc.n_test_tasks,
        n_support=dc.n_support,
        n_query=dc.n_query,
        n_test_support=dc.n_test_support,
        kind=dc.intervention_kind,
        n_targets=dc.n_targets,
        observational_fraction=dc.observational_fraction,
        expected_edges_per_node=dc.expected_edges_per_node,
        noise_scale=dc.noise_scale,
        seed=config.seed,
    )
    scm.save_tasks(bench.train, out / "train", {**bench.meta, "split": "train"}, bench.scm.adjacency)
    scm.save_tasks(bench.test, out / "test", {**bench.meta, "split": "test"}, bench.scm.adjacency)
    return directory_digest(out)


def train(
    config: ExperimentConfig,
    data: str | Path,
    out: str | Path,
    force: bool = False,
    resume: str | Path | None = None,
    log=None,
    stop_after: int | None = None,
) -> trainer.ModelState:
    """Train on ``data`` and write ``checkpoint/``, ``train_log.jsonl`` and ``config.json`` under ``out``.

    ``stop_after`` ends this invocation early without changing the annealing
    schedule, so a later ``resume`` reproduces an uninterrupted run.
    """
    collection = resolve_collection(data, "train")
    if resume is not None:
        state = trainer.load_checkpoint(resume)
        wanted = config.train_config()
        state.config = trainer.TrainConfig(**{**state.config.to_dict(), "epochs": wanted.epochs})
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        state = None
        out = prepare_output(out, force)
    tcfg = state.config if state is not None else config.train_config()
    if state is not None and collection.tasks[0].d != state.d:
        raise ValueError(f"dataset has d={collection.tasks[0].d}, checkpoint has d={state.d}")
    _dump_json(config.to_dict(), out / "config.json")
    log_path = out / "train_log.jsonl"

    def on_epoch(st: trainer.ModelState, summary: dict) -> None:
        with open(log_path, "a") as fh:
            fh.write(json.dumps(summary, sort_keys=True) + "\n")
        if log is not None:
            log(summary)
        if st.epoch % config.checkpoint_every == 0 and st.epoch < st.config.epochs:
            trainer.save_checkpoint(st, out / "checkpoint")

    state = trainer.fit(collection.tasks, tcfg, state=state, epochs=stop_after, on_epoch=on_epoch)
    trainer.save_checkpoint(state, out / "checkpoint")
    return state


def adapt(checkpoint: str | Path, data: str | Path, seed: int = 0) -> dict:
    state = trainer.load_checkpoint(checkpoint)
    collection = resolve_collection(data, "test")
    out = {}
    for task in collection.tasks:
        if task.d != state.d:
            raise ValueError(f"task {task.task_id} has d={task.d}, checkpoint has d={state.d}")
        sample, _ = trainer.adapt_meta_test(
            state, task, seed=np.random.SeedSequence([seed, 23, task.task_id])
        )
        out[str(task.task_id)] = {
            "scores": sample.scores.tolist(),
            "logits": sample.logits.data.tolist(),
            "predicted_targets": sample.m_hard.astype(int).tolist(),
        }
    return out


def evaluate(config: ExperimentConfig, checkpoint: str | Path, data: str | Path) -> dict:
    """Evaluation report: metrics plus everything needed to reproduce them."""
    state = trainer.load_checkpoint(checkpoint)
    collection = resolve_collection(data, "test")
    if collection.tasks[0].d != state.d:
        raise ValueError(f"dataset has d={collection.tasks[0].d}, checkpoint has d={state.d}")
    report = metrics.evaluate(
        state,
        collection.tasks,
        collection.adjacency,
        n_samples=config.eval.n_posterior_samples,
        seed=config.seed,
        n_permutations=config.eval.n_permutations,
    )
    return {
        "metrics": report.to_dict(),
        "seed": config.seed,
        "n_posterior_samples": config.eval.n_posterior_samples,
        "n_permutations": config.eval.n_permutations,
        "dataset_digest": directory_digest(Path(data)),
        "checkpoint_digest": directory_digest(checkpoint),
        "train_config": state.config.to_dict(),
        "epochs_trained": state.epoch,
    }


SUMMARY_KEYS = ("e_shd", "e_sid", "graph_auroc", "graph_auprc", "intv_auroc", "intv_auprc")


def summarize_simulations(reports: list[dict]) -> dict:
    """Mean and sample standard deviation (ddof=1; 0 for one run) of each headline metric."""
    summary = {"n_simulations": len(reports)}
    for key in SUMMARY_KEYS:
        values = np.array(
            [r["metrics"][key] for r in reports if r["metrics"][key] is not None], dtype=np.float64
        )
        if values.size == 0:
            summary[key] = {"mean": None, "std": None, "n": 0}
            continue
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        summary[key] = {"mean": float(values.mean()), "std": std, "n": int(values.size)}
    return summary


def _simulate(config: ExperimentConfig, root: Path, index: int) -> dict:
    sim_config = parse_config({**config.to_dict(), "seed": config.seed + index, "n_simulations": 1})
    sim_dir = root / f"sim_{index}"
    if config.dataset_path is not None:
        data = Path(config.dataset_path)
    else:
        data = sim_dir / "data"
        generate(sim_config, data, force=True)
    train(sim_config, data, sim_dir / "run", force=True)
    report = evaluate(sim_config, sim_dir / "run" / "checkpoint", data)
    _dump_json(report, sim_dir / "report.json")
    return report


def run_pipeline(config: ExperimentConfig, out: str | Path, force: bool = False) -> dict:
    """Generate, train and evaluate ``n_simulations`` times with seeds ``seed + k``."""
    root = prepare_output(out, force)
    _dump_json(config.to_dict(), root / "config.json")
    indices = range(config.n_simulations)
    if config.workers > 1 and config.n_simulations > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            reports = list(pool.map(_simulate, [config] * len(indices), [root] * len(indices), indices))
    else:
        reports = [_simulate(config, root, k) for k in indices]
    summary = summarize_simulations(reports)
    _dump_json(summary, root / "summary.json")
    return summary


# --------------------------------------------------------------------- argv


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metacausal",
        description="Meta-learned causal discovery with unknown intervention targets.",
        epilog="default configuration (JSON):\n" + default_config_json(),
        formatter_class=_HelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file; unknown keys are rejected")
        p.add_argument("--seed", type=int, help="overrides config.seed")
        p.add_argument("--out", required=out_required, help="output path")
        return p

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, formatter_class=_HelpFormatter)

    p = common(add("generate", "simulate a meta-train/meta-test dataset"))
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--d", type=int, help="number of variables")
    p.add_argument("--tasks", type=int, help="tasks per split (train and test)")
    p.add_argument("--observational-fraction", type=float, help="share of tasks without targets")

    p = common(add("train", "meta-train on a dataset"))
    p.add_argument("--data", help="dataset directory (defaults to config.dataset_path)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--mode", choices=trainer.MODES, help="task adaptation method")
    p.add_argument("--epochs", type=int, help="total training epochs")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--stop-after", type=int, help="epochs to run in this invocation")

    p = common(add("adapt", "adapt to meta-test tasks and write per-task target scores"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = common(add("evaluate", "write an evaluation report for a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = add("check-gradients", "finite-difference check of every loss term and parameter group")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--coords", type=int, default=6, help="coordinates checked per group")

    p = common(add("run", "generate, train and evaluate one or more simulations"))
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--mode", choices=trainer.MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--tasks", type=int)
    p.add_argument("--simulations", type=int, help="number of independent simulations")
    p.add_argument("--workers", type=int, help="parallel simulation workers")

    p = add("default-config", "print or write the default configuration")
    p.add_argument("--out", help="file to write instead of stdout")
    return parser


def _print_epoch(summary: dict) -> None:
    print(
        f"epoch {summary['epoch']:4d}  total {summary['total']:.5f}  recon {summary['recon']:.5f}"
        f"  graph {summary['graph']:.4f}  tau {summary['temperature_u']:.3f}",
        flush=True,
    )


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "default-config":
        text = default_config_json()
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if args.command == "check-gradients":
        results = diagnostics.check_gradients(
            d=args.d, seed=args.seed, tolerance=args.tolerance, coords_per_group=args.coords
        )
        print(diagnostics.format_table(results))
        return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL

    config = apply_overrides(load_config(args.config), args)
    if args.command == "generate":
        digest = generate(config, args.out, args.force)
        print(f"wrote {args.out}")
        print(f"digest sha256:{digest}")
    elif args.command == "train":
        data = args.data or config.dataset_path
        if data is None:
            raise ConfigError("train needs --data or config.dataset_path")
        state = train(
            config, data, args.out, args.force, args.resume, log=_print_epoch, stop_after=args.stop_after
        )
        print(f"checkpoint {Path(args.out) / 'checkpoint'} (epoch {state.epoch})")
    elif args.command == "adapt":
        result = adapt(args.checkpoint, args.data, config.seed)
        _dump_json(result, Path(args.out))
        print(f"wrote {args.out}")
    elif args.command == "evaluate":
        report = evaluate(config, args.checkpoint, args.data)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _dump_json(report, out)
        m = report["metrics"]
        print(json.dumps({k: m[k] for k in SUMMARY_KEYS}, sort_keys=True))
    elif args.command == "run":
        summary = run_pipeline(config, args.out, args.force)
        for key in SUMMARY_KEYS:
            s = summary[key]
            if s["mean"] is not None:
                print(f"{key:<12} {s['mean']:.4f} +- {s['std']:.4f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (trainer.TrainingError, ad.NonFiniteError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, FileExistsError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
