"""Reconstruction, intervention-sparsity, residual-independence and graph-sparsity terms."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

PROB_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_I: float = 0.01
    lambda_H: float = 0.1
    lambda_G: float = 0.1
    hsic_bandwidth_mode: str = "median"
    hsic_bandwidth: float = 1.0
    hsic_max_rows: int = 128
    graph_prior_p: float = 0.1

    def __post_init__(self):
        for name in ("lambda_I", "lambda_H", "lambda_G"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.graph_prior_p < 1:
            raise ValueError("graph_prior_p must lie in (0, 1)")
        if self.hsic_bandwidth_mode not in ("median", "fixed"):
            raise ValueError("hsic_bandwidth_mode must be 'median' or 'fixed'")
        if not self.hsic_bandwidth > 0:
            raise ValueError("hsic_bandwidth must be positive")


def recon_loss(query, predictions: ad.DiffValue) -> ad.DiffValue:
    """Mean squared error over all entries."""
    if tuple(np.shape(getattr(query, "data", query))) != predictions.shape:
        raise ad.ShapeError(
            f"recon_loss: query shape {np.shape(getattr(query, 'data', query))} "
            f"!= predictions shape {predictions.shape}"
        )
    return ad.mean(ad.square(query - predictions))


def intv_sparsity(logits: ad.DiffValue) -> ad.DiffValue:
    """Mean implied intervention probability, an l1 penalty on ``sigmoid(logits)``."""
    return ad.mean(ad.sigmoid(logits))


@lru_cache(maxsize=8)
def _pair_operator(n: int) -> np.ndarray:
    # (n, n*n): column a*n+b holds +1 at row a and -1 at row b
    op = np.zeros((n, n * n))
    cols = np.arange(n * n)
    np.add.at(op, (cols // n, cols), 1.0)
    np.add.at(op, (cols % n, cols), -1.0)
    op.setflags(write=False)
    return op


@lru_cache(maxsize=8)
def _row_sum_operator(n: int) -> np.ndarray:
    op = np.kron(np.eye(n), np.ones((n, 1)))
    op.setflags(write=False)
    return op


def median_bandwidth(column: np.ndarray) -> float:
    """Median pairwise distance; 1.0 when that median is zero."""
    column = np.asarray(column, dtype=np.float64)
    iu = np.triu_indices(column.shape[0], k=1)
    med = float(np.median(np.abs(column[:, None] - column[None, :])[iu]))
    return med if med > 0 else 1.0


def hsic_residual(
    residuals: ad.DiffValue,
    weights: LossWeights = LossWeights(),
    rng: np.random.Generator | None = None,
) -> ad.DiffValue:
    """Mean biased HSIC ``tr(K_i H K_j H) / N^2`` over unordered variable pairs.

    Gaussian kernels per variable. Bandwidths come from the median heuristic
    (treated as constants) or ``weights.hsic_bandwidth``. All pairs are
    evaluated together through the expansion
    ``tr(KHLH) = tr(KL) - 2/N 1'KL1 + 1/N^2 (1'K1)(1'L1)``.
    """
    n, d = residuals.shape
    if n < 4:
        raise ValueError(f"hsic_residual needs at least 4 rows, got {n}")
    if n > weights.hsic_max_rows:
        keep = (
            np.sort(rng.choice(n, size=weights.hsic_max_rows, replace=False))
            if rng is not None
            else np.arange(weights.hsic_max_rows)
        )
        residuals = residuals[keep]
        n = weights.hsic_max_rows
    if d < 2:
        return ad.scale(ad.sum(residuals), 0.0)
    if weights.hsic_bandwidth_mode == "median":
        widths = np.array([median_bandwidth(residuals.data[:, i]) for i in range(d)])
    else:
        widths = np.full(d, weights.hsic_bandwidth)
    diffs = residuals.T @ _pair_operator(n)  # (d, n*n) pairwise differences
    kernels = ad.exp(ad.square(diffs) * (-0.5 / widths**2)[:, None])
    row_sums = kernels @ _row_sum_operator(n)  # (d, n)
    totals = ad.sum(row_sums, axis=1)
    gram = kernels @ kernels.T
    cross = row_sums @ row_sums.T
    outer = ad.reshape(totals, (d, 1)) @ ad.reshape(totals, (1, d))
    hsic = ad.scale(gram - ad.scale(cross, 2.0 / n) + ad.scale(outer, 1.0 / n**2), 1.0 / n**2)
    upper = np.triu(np.ones((d, d)), k=1)
    return ad.scale(ad.sum(hsic * upper), 1.0 / upper.sum())


def hsic_pair_matrix(residuals: np.ndarray, widths: Sequence[float]) -> np.ndarray:
    """Plain-numpy ``d x d`` HSIC matrix using explicit centering (diagnostics)."""
    residuals = np.asarray(residuals, dtype=np.float64)
    n, d = residuals.shape
    center = np.eye(n) - 1.0 / n
    kernels = []
    for i in range(d):
        diff = residuals[:, i][:, None] - residuals[:, i][None, :]
        kernels.append(np.exp(-(diff**2) / (2.0 * widths[i] ** 2)))
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            out[i, j] = np.trace(kernels[i] @ center @ kernels[j] @ center) / n**2
    return out


def graph_sparsity(edge_probs: ad.DiffValue, prior: float = 0.1) -> ad.DiffValue:
    """Mean ``KL(Bern(p_ij) || Bern(prior))`` over the strict upper triangle."""
    if not 0 < prior < 1:
        raise ValueError("prior must lie in (0, 1)")
    d = edge_probs.shape[0]
    upper = np.triu(np.ones((d, d)), k=1)
    if upper.sum() == 0:
        return ad.scale(ad.sum(edge_probs), 0.0)
    p = ad.clip(edge_probs, PROB_EPS, 1.0 - PROB_EPS)
    q = 1.0 - p
    kl = p * (ad.log(p) - np.log(prior)) + q * (ad.log(q) - np.log(1.0 - prior))
    return ad.scale(ad.sum(kl * upper), 1.0 / upper.sum())


class LossError(FloatingPointError):
    pass


TASK_COMPONENTS = ("recon", "intv", "hsic")


def total_loss(
    components: Sequence[Mapping[str, ad.DiffValue]],
    graph: ad.DiffValue | None,
    weights: LossWeights,
    task_ids: Sequence[int] | None = None,
) -> ad.DiffValue:
    """``mean_t(L_R + l_I L_I + l_H L_H) + l_G L_G``.

    ``components`` holds one mapping per task with keys ``recon``, ``intv``
    and ``hsic``; all must share a tape with ``graph``.
    """
    if not components:
        raise ValueError("total_loss needs at least one task")
    task_ids = list(task_ids) if task_ids is not None else list(range(len(components)))
    terms = []
    for tid, comp in zip(task_ids, components):
        for key in TASK_COMPONENTS:
            if not np.all(np.isfinite(comp[key].data)):
                raise LossError(f"non-finite {key} loss in task {tid}")
        terms.append(
            comp["recon"]
            + ad.scale(comp["intv"], weights.lambda_I)
            + ad.scale(comp["hsic"], weights.lambda_H)
        )
    acc = terms[0]
    for term in terms[1:]:
        acc = acc + term
    out = ad.scale(acc, 1.0 / len(terms))
    if graph is not None:
        if not np.all(np.isfinite(graph.data)):
            raise LossError("non-finite graph loss")
        out = out + ad.scale(graph, weights.lambda_G)
    return out
