"""Per-task intervention-target posterior from the support set.

support -> feature matrix C (nine ``N x d`` blocks) -> set pooling
(mean of embeddings, embedding of the mean) -> logit net -> binary
Gumbel-softmax mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import likelihood as lik
from .nn import apply_mlp, init_mlp

POOL = "pool"
LOGIT = "logit"
N_BLOCKS = 9


def init_predictor(
    rng: np.random.Generator, d: int, embed_dim: int = 32, hidden: int = 64
) -> dict[str, np.ndarray]:
    params = init_mlp(rng, [N_BLOCKS * d, hidden, hidden, embed_dim], POOL)
    params.update(init_mlp(rng, [2 * embed_dim, hidden, hidden, d], LOGIT))
    return params


@dataclass
class FeatureBundle:
    C: ad.DiffValue
    F: ad.DiffValue | None = None


@dataclass
class InterventionSample:
    logits: ad.DiffValue
    m_soft: ad.DiffValue
    m_hard: np.ndarray
    noise: np.ndarray

    def mask(self, straight_through: bool = True) -> ad.DiffValue:
        if straight_through:
            return ad.straight_through(self.m_hard, self.m_soft)
        return self.m_soft

    @property
    def scores(self) -> np.ndarray:
        """``sigmoid(logits)``: the per-variable intervention probability."""
        return 1.0 / (1.0 + np.exp(-self.logits.data))


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Row order that depends only on the set of rows (lexicographic)."""
    x = np.asarray(x)
    return np.lexsort(x.T[::-1])


def column_stats(support: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column mean and unbiased std; the std is zero when there is a single row."""
    support = np.asarray(support, dtype=np.float64)
    mu = support.mean(axis=0)
    if support.shape[0] < 2:
        return mu, np.zeros_like(mu)
    return mu, support.std(axis=0, ddof=1)


def feature_matrix(support: np.ndarray, x_obs: ad.DiffValue, x_int: ad.DiffValue) -> ad.DiffValue:
    """``[D, Xo, D-Xo, (D-Xo)^2, Xi, D-Xi, (D-Xi)^2, mu, sigma]`` column-wise."""
    support = np.asarray(support, dtype=np.float64)
    if support.ndim != 2 or support.shape[0] < 1:
        raise ValueError("support must be a non-empty N x d matrix")
    if x_obs.shape != support.shape or x_int.shape != support.shape:
        raise ad.ShapeError(
            f"predictions {x_obs.shape}/{x_int.shape} do not match support {support.shape}"
        )
    tape = x_obs.tape
    data = tape.const(support)
    mu, sigma = column_stats(support)
    r_obs = data - x_obs
    r_int = data - x_int
    blocks = [
        data,
        x_obs,
        r_obs,
        ad.square(r_obs),
        x_int,
        r_int,
        ad.square(r_int),
        tape.const(np.broadcast_to(mu, support.shape)),
        tape.const(np.broadcast_to(sigma, support.shape)),
    ]
    return ad.concat(blocks, axis=1)


def build_features(support: np.ndarray, adj, params: Mapping[str, ad.DiffValue], heads) -> FeatureBundle:
    """Feature matrix from the current likelihood model on ``support``."""
    x_obs = lik.observational(params, support, adj)
    x_int = lik.interventional(lik.trunk_blocks(params, support, adj), heads)
    return FeatureBundle(feature_matrix(support, x_obs, x_int))


def pool(C: ad.DiffValue, params: Mapping[str, ad.DiffValue]) -> ad.DiffValue:
    """``concat(mean_n h(c_n), h(mean_n c_n))``; bitwise invariant to row order."""
    if C.ndim != 2 or C.shape[0] < 1:
        raise ad.ShapeError(f"pool needs a non-empty matrix, got shape {C.shape}")
    rows = C[canonical_order(C.data)]
    z_me = ad.mean(apply_mlp(params, POOL, rows), axis=0)
    z_em = apply_mlp(params, POOL, ad.mean(rows, axis=0, keepdims=True))
    return ad.concat([z_me, ad.reshape(z_em, (z_em.shape[1],))], axis=0)


def predict_targets(
    F: ad.DiffValue,
    params: Mapping[str, ad.DiffValue],
    temperature: float = 0.5,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> InterventionSample:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    expected = params[LOGIT + ".W0"].shape[0]
    if F.shape != (expected,):
        raise ad.ShapeError(f"feature vector has shape {F.shape}, expected ({expected},)")
    logits = apply_mlp(params, LOGIT, F)
    if not np.all(np.isfinite(logits.data)):
        raise ad.NonFiniteError("predict_targets: non-finite logits")
    d = logits.shape[0]
    if noise is None:
        noise = rng.gumbel(size=d) - rng.gumbel(size=d)
    m_soft = ad.sigmoid(ad.scale(logits + noise, 1.0 / temperature))
    m_hard = (m_soft.data > 0.5).astype(np.float64)
    return InterventionSample(logits, m_soft, m_hard, np.asarray(noise))
