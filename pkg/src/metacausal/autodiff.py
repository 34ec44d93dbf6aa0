"""Tape-based reverse-mode differentiation over small dense float64 arrays.

Every value produced during a forward pass is a :class:`DiffValue` bound to
one :class:`Tape`. Operations append a node holding a vector-Jacobian product
closure; :meth:`Tape.backward` walks those nodes in reverse recording order.

Arrays are rank 0, 1 or 2. Elementwise operations follow numpy broadcasting
and gradients are summed back to each operand's shape.
"""

from __future__ import annotations

import itertools
from types import MappingProxyType
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg as sla

__all__ = [
    "DiffError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "SolverError",
    "DiffValue",
    "Tape",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "transpose",
    "sum",
    "mean",
    "square",
    "sqrt",
    "exp",
    "log",
    "tanh",
    "relu",
    "sigmoid",
    "softmax",
    "solve_spd",
    "concat",
    "reshape",
    "take",
    "clip",
    "straight_through",
    "finite_diff_check",
]

_generations = itertools.count()


class DiffError(Exception):
    """Base class for failures raised by the differentiation engine."""


class ShapeError(DiffError, ValueError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    pass


class TapeError(DiffError):
    pass


class SolverError(DiffError, np.linalg.LinAlgError):
    pass


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp", "index")

    def __init__(self, op, out, inputs, vjp, index):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.index = index


class DiffValue:
    """A value on a tape. ``grad`` is filled in by :meth:`Tape.backward`."""

    __slots__ = ("data", "grad", "tape", "requires_grad", "is_leaf", "name")
    __array_ufunc__ = None  # make ndarray (op) DiffValue dispatch to our reflected operators

    def __init__(
        self,
        data,
        tape: "Tape",
        requires_grad: bool = False,
        name: str | None = None,
        is_leaf: bool = False,
    ):
        self.data = data
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.is_leaf = is_leaf
        self.name = name

    @property
    def tape_id(self) -> int:
        return self.tape.generation

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "DiffValue":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffValue(shape={self.shape}{label}, tape={self.tape_id})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Ordered record of primitive operations plus a seeded random stream.

    A tape is single-threaded. Values from different tapes never mix.
    """

    def __init__(self, seed=None):
        self.generation = next(_generations)
        self.nodes: list[_Node] = []
        self.rng = np.random.default_rng(seed)

    def param(self, data, name: str | None = None) -> DiffValue:
        """Register a leaf that receives a gradient."""
        arr = _as_array(data, "param")
        return DiffValue(arr.copy(), self, requires_grad=True, name=name, is_leaf=True)

    def const(self, data) -> DiffValue:
        return DiffValue(_as_array(data, "const"), self, requires_grad=False)

    def _record(self, op: str, data: np.ndarray, inputs: Sequence[DiffValue], vjp) -> DiffValue:
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op}: non-finite value produced (node {len(self.nodes)})")
        requires = any(v.requires_grad for v in inputs)
        out = DiffValue(data, self, requires_grad=requires)
        if requires:
            self.nodes.append(_Node(op, out, tuple(inputs), vjp, len(self.nodes)))
        return out

    def backward(self, root: DiffValue) -> Mapping[str, np.ndarray]:
        """Accumulate d(root)/d(leaf) for every leaf that requires a gradient.

        Returns a read-only map from leaf name to gradient; unnamed leaves
        only get their ``grad`` attribute populated.
        """
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, DiffValue] = {}
        if root.is_leaf:
            leaves[id(root)] = root
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(
                        f"non-finite gradient flowing out of node {node.index} ({node.op})"
                    )
                if gi.shape != inp.data.shape:
                    gi = _unbroadcast(gi, inp.data.shape)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp.is_leaf:
                    leaves[key] = inp
        out: dict[str, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g
            if leaf.name is not None:
                out[leaf.name] = g
        return MappingProxyType(out)


def _as_array(data, op: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"{op}: rank {arr.ndim} arrays are not supported (shape {arr.shape})")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite input")
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _tape_of(op: str, *operands) -> "Tape":
    tape = None
    for v in operands:
        if isinstance(v, DiffValue):
            if tape is None:
                tape = v.tape
            elif v.tape is not tape:
                raise TapeError(
                    f"{op}: operands come from different tape generations "
                    f"({tape.generation} vs {v.tape.generation})"
                )
    if tape is None:
        raise TapeError(f"{op}: at least one operand must be a DiffValue")
    return tape


def _lift(tape: Tape, v, op: str) -> DiffValue:
    if isinstance(v, DiffValue):
        return v
    return DiffValue(_as_array(v, op), tape)


def _binary_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> DiffValue:
    tape = _tape_of("add", a, b)
    a, b = _lift(tape, a, "add"), _lift(tape, b, "add")
    _binary_shape("add", a.data, b.data)
    return tape._record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> DiffValue:
    tape = _tape_of("sub", a, b)
    a, b = _lift(tape, a, "sub"), _lift(tape, b, "sub")
    _binary_shape("sub", a.data, b.data)
    return tape._record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> DiffValue:
    """Hadamard product (numpy broadcasting)."""
    tape = _tape_of("mul", a, b)
    a, b = _lift(tape, a, "mul"), _lift(tape, b, "mul")
    _binary_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return tape._record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> DiffValue:
    tape = _tape_of("div", a, b)
    a, b = _lift(tape, a, "div"), _lift(tape, b, "div")
    _binary_shape("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return tape._record("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: DiffValue, c: float) -> DiffValue:
    c = float(c)
    return a.tape._record("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> DiffValue:
    tape = _tape_of("matmul", a, b)
    a, b = _lift(tape, a, "matmul"), _lift(tape, b, "matmul")
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        # constant operands (selectors, data) can be large; skip their gradients
        if ad.ndim == 2 and bd.ndim == 2:
            ga = g @ bd.T if need_a else None
            gb = ad.T @ g if need_b else None
        elif ad.ndim == 2:
            ga = np.outer(g, bd) if need_a else None
            gb = ad.T @ g if need_b else None
        elif bd.ndim == 2:
            ga = bd @ g if need_a else None
            gb = np.outer(ad, g) if need_b else None
        else:
            ga, gb = g * bd, g * ad
        return ga, gb

    return tape._record("matmul", ad @ bd, (a, b), vjp)


def transpose(a: DiffValue) -> DiffValue:
    return a.tape._record("transpose", a.data.T, (a,), lambda g: (g.T,))


def sum(a: DiffValue, axis: int | None = None, keepdims: bool = False) -> DiffValue:  # noqa: A001
    shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: DiffValue, axis: int | None = None, keepdims: bool = False) -> DiffValue:
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {shape}")

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return a.tape._record("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def square(a: DiffValue) -> DiffValue:
    ad = a.data
    return a.tape._record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: DiffValue) -> DiffValue:
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(a.data)

    def vjp(g):
        # an infinite slope at zero is reported by backward's finiteness check
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / (2.0 * out),)

    return a.tape._record("sqrt", out, (a,), vjp)


def exp(a: DiffValue) -> DiffValue:
    out = np.exp(a.data)
    return a.tape._record("exp", out, (a,), lambda g: (g * out,))


def log(a: DiffValue) -> DiffValue:
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    ad = a.data
    return a.tape._record("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: DiffValue) -> DiffValue:
    out = np.tanh(a.data)
    return a.tape._record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: DiffValue) -> DiffValue:
    on = a.data > 0
    return a.tape._record("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split evaluation keeps exp() from overflowing for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: DiffValue) -> DiffValue:
    out = _sigmoid(np.atleast_1d(a.data)).reshape(a.data.shape)
    return a.tape._record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: DiffValue, axis: int = -1) -> DiffValue:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return a.tape._record("softmax", out, (a,), vjp)


def solve_spd(m, b, lam: float) -> DiffValue:
    """Solve ``(m + lam*I) w = b`` for symmetric positive-definite ``m``.

    Cholesky factorisation; the backward pass reuses the factor for the
    adjoint system, so gradients reach both ``m`` and ``b``.
    """
    tape = _tape_of("solve_spd", m, b)
    m, b = _lift(tape, m, "solve_spd"), _lift(tape, b, "solve_spd")
    lam = float(lam)
    if not lam > 0:
        raise SolverError(f"solve_spd: ridge parameter must be > 0, got {lam}")
    md, bd = m.data, b.data
    if md.ndim != 2 or md.shape[0] != md.shape[1] or bd.shape[0] != md.shape[0]:
        raise ShapeError(f"solve_spd: incompatible shapes {md.shape} and {bd.shape}")
    system = md + lam * np.eye(md.shape[0])
    try:
        factor = sla.cho_factor(system, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"solve_spd: matrix is not positive definite ({exc})") from None
    w = sla.cho_solve(factor, bd, check_finite=False)

    def vjp(g):
        gb = sla.cho_solve(factor, g, check_finite=False)
        gm = -np.outer(gb, w) if w.ndim == 1 else -(gb @ w.T)
        return gm, gb

    return tape._record("solve_spd", w, (m, b), vjp)


def concat(values: Sequence, axis: int = 0) -> DiffValue:
    tape = _tape_of("concat", *values)
    vals = [_lift(tape, v, "concat") for v in values]
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        shapes = [v.shape for v in vals]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([v.data.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._record("concat", out, vals, vjp)


def reshape(a: DiffValue, shape: tuple[int, ...]) -> DiffValue:
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    if out.ndim > 2:
        raise ShapeError(f"reshape: rank {out.ndim} target {shape} not supported")
    return a.tape._record("reshape", out, (a,), lambda g: (g.reshape(old),))


def take(a: DiffValue, index) -> DiffValue:
    """Basic or integer-array indexing; the gradient scatters back."""
    shape = a.data.shape
    out = np.array(a.data[index], dtype=np.float64)

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return a.tape._record("take", out, (a,), vjp)


def clip(a: DiffValue, lo: float, hi: float) -> DiffValue:
    inside = (a.data >= lo) & (a.data <= hi)
    return a.tape._record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def straight_through(hard, soft: DiffValue) -> DiffValue:
    """Forward value ``hard``; gradient passes to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: incompatible shapes {hard.shape} and {soft.shape}")
    return soft.tape._record("straight_through", hard.copy(), (soft,), lambda g: (g,))


# ------------------------------------------------------------- diagnostics


def finite_diff_check(
    f: Callable[[Tape, dict[str, DiffValue]], DiffValue],
    theta: Mapping[str, np.ndarray] | np.ndarray,
    step: float = 1e-5,
    seed: int = 0,
    coords: Mapping[str, Sequence[int]] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f(tape, params)`` must build a scalar from ``params`` on ``tape``; every
    call gets a fresh tape seeded with ``seed``, so any sampling inside ``f``
    sees identical noise. ``coords`` optionally restricts the check to a subset
    of flat indices per parameter.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = isinstance(theta, np.ndarray)
    point = {"theta": np.asarray(theta, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in theta.items()
    }

    def evaluate(values: Mapping[str, np.ndarray], with_grad: bool):
        tape = Tape(seed)
        params = {k: tape.param(v, name=k) for k, v in values.items()}
        root = f(tape, params["theta"] if single else params)
        if not isinstance(root, DiffValue):
            raise TypeError("f must return a DiffValue")
        if with_grad:
            grads = tape.backward(root)
            return float(root.data), grads
        return float(root.data), None

    _, grads = evaluate(point, True)
    worst = 0.0
    for name, base in point.items():
        analytic = np.asarray(grads.get(name, np.zeros_like(base))).ravel()
        indices = range(base.size) if coords is None or name not in coords else coords[name]
        for idx in indices:
            shifted = dict(point)
            up = base.copy().ravel()
            down = base.copy().ravel()
            up[idx] += step
            down[idx] -= step
            shifted[name] = up.reshape(base.shape)
            f_up, _ = evaluate(shifted, False)
            shifted[name] = down.reshape(base.shape)
            f_down, _ = evaluate(shifted, False)
            if not (np.isfinite(f_up) and np.isfinite(f_down)):
                raise NonFiniteError(f"finite_diff_check: f is non-finite near {name}[{idx}]")
            numeric = (f_up - f_down) / (2.0 * step)
            err = abs(analytic[idx] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
