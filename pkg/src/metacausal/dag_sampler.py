"""Differentiable DAG posterior: ``A = Pi^T U Pi``.

``U`` is strictly upper triangular with independent binary Gumbel-softmax
entries (logits ``phi``); ``Pi`` is a permutation drawn with Gumbel-top-k over
node scores ``psi``. Rank ``r`` of the order sits in row ``r`` of ``Pi``, so
``A[i, j] = U[rank(i), rank(j)]`` and every hard sample is acyclic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .scm import topological_order

# Added to logits of already-placed nodes; finite so the tape's checks pass.
_MASKED = -1e9


@dataclass
class DagPosteriorParams:
    edge_logits: object  # d x d, ndarray or DiffValue; only the strict upper triangle is used
    order_scores: object  # d
    temperature_u: float = 1.0
    temperature_pi: float = 1.0

    @property
    def d(self) -> int:
        return self.order_scores.shape[0]


@dataclass(frozen=True)
class DagNoise:
    logistic_u: np.ndarray  # difference of two Gumbels per U entry
    gumbel_pi: np.ndarray


@dataclass
class DagSample:
    U_hard: np.ndarray
    Pi_hard: np.ndarray
    A_hard: np.ndarray
    U_soft: ad.DiffValue
    Pi_soft: ad.DiffValue
    A_soft: ad.DiffValue

    def adjacency(self, straight_through: bool = True) -> ad.DiffValue:
        """Hard forward / soft backward by default; the soft relaxation otherwise."""
        if straight_through:
            return ad.straight_through(self.A_hard, self.A_soft)
        return self.A_soft


def draw_noise(d: int, rng: np.random.Generator) -> DagNoise:
    return DagNoise(rng.gumbel(size=(d, d)) - rng.gumbel(size=(d, d)), rng.gumbel(size=d))


def _check_temperature(tau: float, which: str) -> None:
    if not tau > 0:
        raise ValueError(f"{which} must be positive, got {tau}")


def _lift(x, tape: ad.Tape) -> ad.DiffValue:
    return x if isinstance(x, ad.DiffValue) else tape.const(x)


def _tape_for(params: DagPosteriorParams, tape: ad.Tape | None) -> ad.Tape:
    for v in (params.edge_logits, params.order_scores):
        if isinstance(v, ad.DiffValue):
            return v.tape
    return tape if tape is not None else ad.Tape()


def sample_upper(params, rng=None, noise: DagNoise | None = None, tape=None):
    """Return ``(U_hard, U_soft)``; ``U_soft = sigmoid((phi + g1 - g0) / tau)`` above the diagonal."""
    _check_temperature(params.temperature_u, "temperature_u")
    d = params.d
    tape = _tape_for(params, tape)
    if noise is None:
        noise = draw_noise(d, rng)
    mask = np.triu(np.ones((d, d)), k=1)
    phi = _lift(params.edge_logits, tape)
    noisy = phi + noise.logistic_u
    u_hard = ((noisy.data > 0) * mask).astype(np.float64)
    u_soft = ad.sigmoid(ad.scale(noisy, 1.0 / params.temperature_u)) * mask
    return u_hard, u_soft


def sample_permutation(params, rng=None, noise: DagNoise | None = None, tape=None):
    """Return ``(Pi_hard, Pi_soft)`` by Gumbel-top-k with one masked softmax per rank."""
    _check_temperature(params.temperature_pi, "temperature_pi")
    d = params.d
    tape = _tape_for(params, tape)
    if noise is None:
        noise = draw_noise(d, rng)
    scores = _lift(params.order_scores, tape) + noise.gumbel_pi
    order = np.argsort(-scores.data, kind="stable")
    pi_hard = np.zeros((d, d))
    pi_hard[np.arange(d), order] = 1.0
    placed = np.zeros((d, d))
    for r in range(1, d):
        placed[r, order[:r]] = _MASKED
    logits = ad.scale(ad.reshape(scores, (1, d)), 1.0 / params.temperature_pi) + placed
    pi_soft = ad.softmax(logits, axis=1)
    return pi_hard, pi_soft


def sample_adjacency(params, rng=None, noise: DagNoise | None = None, tape=None) -> DagSample:
    tape = _tape_for(params, tape)
    if noise is None:
        noise = draw_noise(params.d, rng)
    u_hard, u_soft = sample_upper(params, noise=noise, tape=tape)
    pi_hard, pi_soft = sample_permutation(params, noise=noise, tape=tape)
    a_hard = pi_hard.T @ u_hard @ pi_hard
    a_soft = pi_soft.T @ u_soft @ pi_soft
    return DagSample(u_hard, pi_hard, a_hard, u_soft, pi_soft, a_soft)


def hard_adjacency(edge_logits: np.ndarray, order_scores: np.ndarray, noise: DagNoise) -> np.ndarray:
    """The ``A_hard`` that :func:`sample_adjacency` would produce for ``noise``."""
    d = order_scores.shape[0]
    upper = ((edge_logits + noise.logistic_u) > 0) * np.triu(np.ones((d, d)), k=1)
    order = np.argsort(-(order_scores + noise.gumbel_pi), kind="stable")
    pi = np.zeros((d, d))
    pi[np.arange(d), order] = 1.0
    return pi.T @ upper @ pi


def sample_hard(
    edge_logits: np.ndarray, order_scores: np.ndarray, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """``n_samples`` hard adjacency matrices at once, shape ``(n, d, d)``.

    Hard samples do not depend on the temperatures.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    d = order_scores.shape[0]
    if d == 1:
        return np.zeros((n_samples, 1, 1))
    logistic = rng.gumbel(size=(n_samples, d, d)) - rng.gumbel(size=(n_samples, d, d))
    upper = ((edge_logits[None] + logistic) > 0) & np.triu(np.ones((d, d), bool), k=1)[None]
    order = np.argsort(-(order_scores[None] + rng.gumbel(size=(n_samples, d))), axis=1, kind="stable")
    rank = np.argsort(order, axis=1)
    idx = np.arange(n_samples)[:, None, None]
    return upper[idx, rank[:, :, None], rank[:, None, :]].astype(np.float64)


def edge_probabilities(params, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo estimate of ``P(A_ij = 1)``."""
    phi = np.asarray(getattr(params.edge_logits, "data", params.edge_logits), dtype=np.float64)
    psi = np.asarray(getattr(params.order_scores, "data", params.order_scores), dtype=np.float64)
    probs = sample_hard(phi, psi, n_samples, rng).mean(axis=0)
    np.fill_diagonal(probs, 0.0)
    return probs


def anneal(epoch: int, epochs: int, start: float, end: float) -> float:
    """Geometric schedule from ``start`` (first epoch) to ``end`` (last epoch)."""
    if epochs <= 1:
        return start
    frac = min(max(epoch / (epochs - 1), 0.0), 1.0)
    return float(start * (end / start) ** frac)


def point_mass_params(adjacency: np.ndarray, strength: float = 20.0) -> DagPosteriorParams:
    """Parameters whose samples equal ``adjacency`` with overwhelming probability.

    Order scores are spaced ``5 * strength`` apart along a topological order
    and edge logits are ``+-strength``. ``adjacency[j, i] = 1`` means ``j -> i``.
    """
    adjacency = np.asarray(adjacency, dtype=np.float64)
    d = adjacency.shape[0]
    order = np.asarray(topological_order(adjacency))
    psi = np.empty(d)
    psi[order] = 5.0 * strength * (d - np.arange(d))
    upper = adjacency[np.ix_(order, order)]
    phi = np.where(upper > 0, strength, -strength) * np.triu(np.ones((d, d)), k=1)
    return DagPosteriorParams(phi, psi)
