"""Meta-learned causal discovery from small interventional datasets with unknown targets."""

from .dag_sampler import DagPosteriorParams, DagSample, sample_adjacency
from .metrics import EvalReport, evaluate
from .scm import TaskDataset, load_tasks, make_benchmark, save_tasks
from .trainer import ModelState, TrainConfig, adapt_meta_test, fit

__version__ = "0.1.0"

__all__ = [
    "DagPosteriorParams",
    "DagSample",
    "EvalReport",
    "ModelState",
    "TaskDataset",
    "TrainConfig",
    "adapt_meta_test",
    "evaluate",
    "fit",
    "load_tasks",
    "make_benchmark",
    "sample_adjacency",
    "save_tasks",
]
