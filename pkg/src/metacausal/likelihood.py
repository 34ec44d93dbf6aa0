"""Switching additive-noise likelihood and closed-form ridge adaptation.

Variable ``i`` is predicted as ``(1 - m_i) f_i(A_i * x) + m_i w_i . h(A_i * x)``
where ``f_i`` is an independent observational MLP, ``h`` is a trunk shared by
all variables and ``w_i`` is a task-specific head fitted on the support set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .nn import apply_mlp, init_mlp

TRUNK = "int"
HEADS = "int.heads"


def obs_prefix(i: int) -> str:
    return f"obs.{i}"


@dataclass
class MechanismSpec:
    d: int
    hidden: int = 64
    feature_dim: int = 32
    ridge_lambda: float = 0.1

    def __post_init__(self):
        if not self.ridge_lambda > 0:
            raise ValueError(f"ridge_lambda must be > 0, got {self.ridge_lambda}")


def init_mechanisms(
    rng: np.random.Generator, spec: MechanismSpec, with_heads: bool = False
) -> dict[str, np.ndarray]:
    """Observational MLPs ``d -> h -> h -> 1`` per variable plus the shared trunk ``d -> h -> h -> d_h``."""
    params: dict[str, np.ndarray] = {}
    for i in range(spec.d):
        params.update(init_mlp(rng, [spec.d, spec.hidden, spec.hidden, 1], obs_prefix(i)))
    params.update(init_mlp(rng, [spec.d, spec.hidden, spec.hidden, spec.feature_dim], TRUNK))
    if with_heads:
        params[HEADS] = np.zeros((spec.d, spec.feature_dim))
    return params


def likelihood_param_names(params: Mapping[str, object]) -> list[str]:
    return [k for k in params if k.startswith("obs.") or k.startswith("int.")]


def interventional_param_names(params: Mapping[str, object]) -> list[str]:
    return [k for k in params if k.startswith("int.")]


@dataclass
class RidgeFit:
    weights: list[ad.DiffValue]
    design_matrices: list[ad.DiffValue]
    targets: np.ndarray

    def normal_equation_residual(self, lam: float) -> float:
        worst = 0.0
        for i, (w, h) in enumerate(zip(self.weights, self.design_matrices)):
            hd = h.data
            lhs = (hd.T @ hd + lam * np.eye(hd.shape[1])) @ w.data
            worst = max(worst, float(np.max(np.abs(lhs - hd.T @ self.targets[:, i]))))
        return worst


def _lift(x, tape: ad.Tape) -> ad.DiffValue:
    return x if isinstance(x, ad.DiffValue) else tape.const(x)


def _tape_of(*values) -> ad.Tape:
    for v in values:
        if isinstance(v, ad.DiffValue):
            return v.tape
    raise TypeError("at least one argument must live on a tape")


def observational(params: Mapping[str, ad.DiffValue], x, adj: ad.DiffValue) -> ad.DiffValue:
    """``N x d`` matrix whose column ``i`` is ``f_i(A_i * x)``."""
    tape = _tape_of(adj, x, params[obs_prefix(0) + ".W0"])
    x = _lift(x, tape)
    adj = _lift(adj, tape)
    _check_shapes(x, adj)
    cols = []
    for i in range(adj.shape[0]):
        cols.append(apply_mlp(params, obs_prefix(i), x * adj[:, i]))
    return ad.concat(cols, axis=1)


def _check_shapes(x: ad.DiffValue, adj: ad.DiffValue) -> None:
    d = adj.shape[0]
    if adj.shape != (d, d) or x.ndim != 2 or x.shape[1] != d:
        raise ad.ShapeError(f"data shape {x.shape} does not match adjacency shape {adj.shape}")


def trunk_blocks(params: Mapping[str, ad.DiffValue], x, adj) -> list[ad.DiffValue]:
    """``H_i = h(A_i * x)`` for every variable, from one stacked trunk pass."""
    tape = _tape_of(adj, x, params[TRUNK + ".W0"])
    x = _lift(x, tape)
    adj = _lift(adj, tape)
    _check_shapes(x, adj)
    n, d = x.shape
    selector = np.kron(np.eye(d), np.ones((n, 1)))  # (d*n, d): row block i picks variable i
    masks = selector @ adj.T  # row block i holds A[:, i]
    if x.requires_grad:
        stacked = ad.concat([x] * d, axis=0)
    else:
        stacked = np.tile(x.data, (d, 1))
    hidden = apply_mlp(params, TRUNK, masks * stacked, final_activation=True)
    return [hidden[i * n : (i + 1) * n] for i in range(d)]


def ridge_solve(h: ad.DiffValue, y: np.ndarray, lam: float) -> ad.DiffValue:
    """``(H^T H + lam I)^{-1} H^T y`` as a single differentiable solve."""
    return ad.solve_spd(h.T @ h, h.T @ np.asarray(y, dtype=np.float64), lam)


def ridge_adapt(
    support: np.ndarray,
    adj,
    params: Mapping[str, ad.DiffValue],
    lam: float,
    blocks: Sequence[ad.DiffValue] | None = None,
) -> RidgeFit:
    """Fit every head ``w_i`` on the support set.

    ``blocks`` may carry precomputed design matrices whose first ``N`` rows
    are the support rows (used when the trunk was run on support and query
    together).
    """
    if not lam > 0:
        raise ad.SolverError(f"ridge lambda must be > 0, got {lam}")
    support = np.asarray(support, dtype=np.float64)
    n = support.shape[0]
    if n < 1:
        raise ValueError("support must have at least one row")
    if blocks is None:
        blocks = trunk_blocks(params, support, adj)
    designs = [b if b.shape[0] == n else b[:n] for b in blocks]
    weights = [ridge_solve(h, support[:, i], lam) for i, h in enumerate(designs)]
    return RidgeFit(weights, designs, support)


def head_vectors(heads) -> list:
    """Accept a list of per-variable heads or a ``d x d_h`` head matrix."""
    if isinstance(heads, ad.DiffValue):
        return [heads[i] for i in range(heads.shape[0])]
    return list(heads)


def interventional(blocks: Sequence[ad.DiffValue], heads) -> ad.DiffValue:
    """``N x d`` matrix whose column ``i`` is ``H_i w_i``."""
    heads = head_vectors(heads)
    cols = [ad.reshape(h @ w, (h.shape[0], 1)) for h, w in zip(blocks, heads)]
    return ad.concat(cols, axis=1)


def switch(x_obs: ad.DiffValue, x_int: ad.DiffValue, m) -> ad.DiffValue:
    """Row-broadcast ``(1 - m) * x_obs + m * x_int``; ``m`` may be soft."""
    return x_obs + m * (x_int - x_obs)


def batch_predict(data, adj, m, params: Mapping[str, ad.DiffValue], heads):
    """Predictions and residuals for every row and variable.

    Returns ``(predictions, residuals)``, both ``N x d`` DiffValues.
    """
    tape = _tape_of(adj, m, data, params[TRUNK + ".W0"])
    data = _lift(data, tape)
    if not np.all(np.isfinite(data.data)):
        raise ad.NonFiniteError("batch_predict: non-finite input")
    adj = _lift(adj, tape)
    x_obs = observational(params, data, adj)
    x_int = interventional(trunk_blocks(params, data, adj), heads)
    pred = switch(x_obs, x_int, m)
    return pred, data - pred


def predict(x, adj_column, m_i, params: Mapping[str, ad.DiffValue], i: int, head) -> ad.DiffValue:
    """Single-sample prediction of ``x_i`` given its parent mask column."""
    tape = _tape_of(adj_column, m_i, x, head, params[TRUNK + ".W0"])
    x = _lift(x, tape)
    if not np.all(np.isfinite(x.data)):
        raise ad.NonFiniteError("predict: non-finite input")
    masked = x * _lift(adj_column, tape)
    obs = apply_mlp(params, obs_prefix(i), masked)[0]
    intv = apply_mlp(params, TRUNK, masked, final_activation=True) @ head
    return obs + m_i * (intv - obs)
