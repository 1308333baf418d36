"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A Tape records every primitive application eagerly (forward values are
computed immediately); one backward() pass walks the tape in reverse and
accumulates adjoints. Primitives cover the dense-matrix vocabulary needed
by the model and flow expressions: broadcast arithmetic, matmul, reductions,
Cholesky-based factorizations and solves, and row assembly/selection.

Langevin drifts are built as explicit closed-form expressions out of these
primitives, so a single first-order backward pass differentiates through
the whole annealed flow. Ops accept plain arrays/floats and return plain
numpy results when no Var is involved, which lets the same formula code
serve both taped and untaped callers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import linalg
from .errors import NonScalarLoss, ShapeMismatch


class Tape:
    """Append-only record of primitive applications."""

    __slots__ = ("nodes", "leaf_values")

    def __init__(self):
        self.nodes = []
        self.leaf_values = {}

    def _append(self, parents, vjp, value) -> "Var":
        self.nodes.append((parents, vjp))
        return Var(self, len(self.nodes) - 1, value)

    def leaf(self, value) -> "Var":
        v = self._append((), None, np.asarray(value, dtype=np.float64))
        self.leaf_values[v.index] = v.value
        return v

    def constant(self, value) -> "Var":
        return self._append((), None, np.asarray(value, dtype=np.float64))

    def __len__(self):
        return len(self.nodes)


class Var:
    """Handle to one tape node: index plus cached forward value."""

    __slots__ = ("tape", "index", "value")

    # keep numpy from trying to broadcast over Var objects; binary ops
    # with ndarray operands must come through our own operators
    __array_ufunc__ = None

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(idx={self.index}, shape={self.value.shape})"


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _lift(tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Reduce gradient g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) + _val(b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = av + bv

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape._append((a.index, b.index), vjp, out)


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) - _val(b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape._append((a.index, b.index), vjp, av - bv)


def neg(a):
    if not isinstance(a, Var):
        return -_val(a)

    def vjp(g):
        return (-g,)

    return a.tape._append((a.index,), vjp, -a.value)


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) * _val(b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._append((a.index, b.index), vjp, av * bv)


def div(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) / _val(b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        return (_unbroadcast(g / bv, av.shape),
                _unbroadcast(-g * av / (bv * bv), bv.shape))

    return tape._append((a.index, b.index), vjp, out)


def scale(a, c: float):
    """Multiply by a python-float constant."""
    c = float(c)
    if not isinstance(a, Var):
        return _val(a) * c

    def vjp(g):
        return (g * c,)

    return a.tape._append((a.index,), vjp, a.value * c)


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) @ _val(b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-d")
    out = av @ bv

    def vjp(g):
        # adjoints can arrive as axis-permuted views, which np.matmul
        # handles an order of magnitude slower than a copy
        if not g.flags.c_contiguous:
            g = np.ascontiguousarray(g)
        return (_unbroadcast(g @ _swap(bv), av.shape),
                _unbroadcast(_swap(av) @ g, bv.shape))

    return tape._append((a.index, b.index), vjp, out)


def transpose(a):
    """Swap the last two axes."""
    if not isinstance(a, Var):
        return _swap(_val(a))

    def vjp(g):
        return (_swap(g),)

    return a.tape._append((a.index,), vjp, _swap(a.value))


def reshape(a, shape):
    shape = tuple(shape)
    if not isinstance(a, Var):
        return _val(a).reshape(shape)
    old = a.value.shape

    def vjp(g):
        return (g.reshape(old),)

    return a.tape._append((a.index,), vjp, a.value.reshape(shape))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(_val(a))
    out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return a.tape._append((a.index,), vjp, out)


def log(a):
    if not isinstance(a, Var):
        return np.log(_val(a))
    av = a.value

    def vjp(g):
        return (g / av,)

    return a.tape._append((a.index,), vjp, np.log(av))


def sqrt(a):
    if not isinstance(a, Var):
        return np.sqrt(_val(a))
    out = np.sqrt(a.value)

    def vjp(g):
        return (g / (2.0 * out),)

    return a.tape._append((a.index,), vjp, out)


def square(a):
    if not isinstance(a, Var):
        return np.square(_val(a))
    av = a.value

    def vjp(g):
        return (2.0 * g * av,)

    return a.tape._append((a.index,), vjp, av * av)


def softplus(a):
    if not isinstance(a, Var):
        return np.logaddexp(0.0, _val(a))
    av = a.value

    def vjp(g):
        return (g / (1.0 + np.exp(-av)),)

    return a.tape._append((a.index,), vjp, np.logaddexp(0.0, av))


def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(_val(a), axis=axis, keepdims=keepdims)
    av = a.value
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        # read-only broadcast view; adjoint accumulation never mutates
        return (np.broadcast_to(gg, av.shape),)

    return a.tape._append((a.index,), vjp, out)


def cumsum(a):
    """Cumulative sum along a 1-d array."""
    if not isinstance(a, Var):
        return np.cumsum(_val(a))

    def vjp(g):
        return (np.cumsum(g[::-1])[::-1],)

    return a.tape._append((a.index,), vjp, np.cumsum(a.value))


def clamp_min(a, floor: float):
    """max(a, floor); gradient is zero where the clamp is active."""
    floor = float(floor)
    if not isinstance(a, Var):
        return np.maximum(_val(a), floor)
    av = a.value
    active = av > floor

    def vjp(g):
        return (g * active,)

    return a.tape._append((a.index,), vjp, np.maximum(av, floor))


def cholesky(a, jitter_ladder=linalg.DEFAULT_JITTER_LADDER):
    """Lower Cholesky factor via the jitter ladder.

    The jitter that made factorization succeed is treated as a constant
    shift, so gradients are those of chol(a + jitter*I) at fixed jitter.
    """
    if not isinstance(a, Var):
        return linalg.cholesky(_val(a), jitter_ladder).lower
    factor = linalg.cholesky(a.value, jitter_ladder)
    lower = factor.lower

    def vjp(g):
        # standard Cholesky reverse rule: Abar = 0.5 * L^-T (P + P^T) L^-1
        # with P = tril(L^T g) with halved diagonal; symmetric-gradient
        # convention, matching symmetric-by-construction inputs
        p = np.tril(lower.T @ g)
        p[np.diag_indices_from(p)] *= 0.5
        s = p + p.T
        t = scipy.linalg.solve_triangular(lower, s, lower=True, trans="T",
                                          check_finite=False)
        abar = scipy.linalg.solve_triangular(
            lower, t.T, lower=True, trans="T", check_finite=False).T
        return (0.25 * (abar + abar.T),)

    return a.tape._append((a.index,), vjp, lower)


def tri_solve(l, b, side: str = "lower"):
    """Solve L x = b (side='lower') or L.T x = b (side='upper'), L lower-tri."""
    trans = "N" if side == "lower" else "T"
    if not isinstance(l, Var) and not isinstance(b, Var):
        return scipy.linalg.solve_triangular(_val(l), _val(b), lower=True,
                                             trans=trans, check_finite=False)
    tape = _tape_of(l, b)
    l, b = _lift(tape, l), _lift(tape, b)
    lv = l.value
    x = scipy.linalg.solve_triangular(lv, b.value, lower=True, trans=trans,
                                      check_finite=False)

    def vjp(g):
        gb = scipy.linalg.solve_triangular(
            lv, g, lower=True, trans="T" if trans == "N" else "N",
            check_finite=False)
        if trans == "N":
            gl = -np.tril(gb @ x.T)
        else:
            gl = -np.tril(x @ gb.T)
        return gl, gb

    return tape._append((l.index, b.index), vjp, x)


def solve(a, b):
    """General (batched) solve a @ x = b; a is (..., n, n), b is (..., n, k)."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.linalg.solve(_val(a), _val(b))
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    x = np.linalg.solve(av, bv)

    def vjp(g):
        if not g.flags.c_contiguous:
            g = np.ascontiguousarray(g)
        gb = np.linalg.solve(_swap(av), g)
        ga = -(gb @ _swap(x))
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return tape._append((a.index, b.index), vjp, x)


def inv(a):
    """(Batched) matrix inverse."""
    if not isinstance(a, Var):
        return np.linalg.inv(_val(a))
    x = np.linalg.inv(a.value)

    def vjp(g):
        xt = _swap(x)
        return (-(xt @ g @ xt),)

    return a.tape._append((a.index,), vjp, x)


def logdet(a, jitter_ladder=linalg.DEFAULT_JITTER_LADDER):
    """log det of an SPD matrix via Cholesky."""
    if not isinstance(a, Var):
        return linalg.logdet(linalg.cholesky(_val(a), jitter_ladder))
    factor = linalg.cholesky(a.value, jitter_ladder)
    out = np.asarray(linalg.logdet(factor))

    def vjp(g):
        inv = linalg.chol_solve(factor, np.eye(factor.n))
        return (float(g) * 0.5 * (inv + inv.T),)

    return a.tape._append((a.index,), vjp, out)


def mvn_quadform(l, r):
    """||L^-1 r||^2, the Mahalanobis quadratic form given a lower factor."""
    w = tri_solve(l, r, "lower")
    return sum_(square(w))


def diag_part(a):
    """Diagonal of a square matrix as a vector."""
    if not isinstance(a, Var):
        return np.diagonal(_val(a)).copy()
    n = a.value.shape[0]

    def vjp(g):
        out = np.zeros((n, n))
        out[np.diag_indices(n)] = g
        return (out,)

    return a.tape._append((a.index,), vjp, np.diagonal(a.value).copy())


def batch_diag(a):
    """Diagonals of a stack of square matrices: (..., k, k) -> (..., k)."""
    if not isinstance(a, Var):
        return np.diagonal(_val(a), axis1=-2, axis2=-1).copy()
    av = a.value
    k = av.shape[-1]

    def vjp(g):
        out = np.zeros_like(av)
        ii = np.arange(k)
        out[..., ii, ii] = g
        return (out,)

    return a.tape._append((a.index,), vjp,
                          np.diagonal(av, axis1=-2, axis2=-1).copy())


def concat_rows(parts):
    """Stack along axis 0."""
    parts = list(parts)
    tape = _tape_of(*parts)
    if tape is None:
        return np.concatenate([_val(p) for p in parts], axis=0)
    parts = [_lift(tape, p) for p in parts]
    sizes = [p.value.shape[0] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=0)

    def vjp(g):
        grads, ofs = [], 0
        for s in sizes:
            grads.append(g[ofs:ofs + s])
            ofs += s
        return tuple(grads)

    return tape._append(tuple(p.index for p in parts), vjp, out)


def slice_rows(a, start, stop):
    if not isinstance(a, Var):
        return _val(a)[start:stop]
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[start:stop] = g
        return (out,)

    return a.tape._append((a.index,), vjp, av[start:stop])


def take_rows(a, idx):
    """Gather rows by an integer index array."""
    idx = np.asarray(idx, dtype=np.intp)
    if not isinstance(a, Var):
        return _val(a)[idx]
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._append((a.index,), vjp, av[idx])


def embed_rows(a, idx, n_rows):
    """Scatter rows of `a` into a zero array with n_rows rows."""
    idx = np.asarray(idx, dtype=np.intp)
    if not isinstance(a, Var):
        av = _val(a)
        out = np.zeros((n_rows,) + av.shape[1:])
        out[idx] = av
        return out
    av = a.value
    out = np.zeros((n_rows,) + av.shape[1:])
    out[idx] = av

    def vjp(g):
        return (g[idx],)

    return a.tape._append((a.index,), vjp, out)


def detach(a):
    """Copy a Var's value onto the tape as a constant (stops gradients)."""
    if not isinstance(a, Var):
        return _val(a)
    return a.tape.constant(a.value)


# sum_ has a trailing underscore to dodge the builtin; exported as "sum" too
OPS = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "mul": mul,
    "div": div,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "softplus": softplus,
    "sum": sum_,
    "cumsum": cumsum,
    "clamp_min": clamp_min,
    "diag_batch": batch_diag,
    "cholesky": cholesky,
    "tri_solve": tri_solve,
    "solve": solve,
    "inv": inv,
    "logdet": logdet,
    "mvn_quadform": mvn_quadform,
    "diag_part": diag_part,
    "concat_rows": concat_rows,
    "slice_rows": slice_rows,
    "take_rows": take_rows,
    "embed_rows": embed_rows,
}

# accepted aliases for spec-style primitive ids
_ALIASES = {
    "mul-elementwise": "mul",
    "scalar-scale": "scale",
    "logdet-via-cholesky": "logdet",
    "mvn-quadform": "mvn_quadform",
    "concat-rows": "concat_rows",
    "slice-rows": "slice_rows",
}


def record(op: str, *args, **kwargs):
    """Apply a primitive by name. Unknown names raise ValueError."""
    name = _ALIASES.get(op, op)
    fn = OPS.get(name)
    if fn is None:
        raise ValueError(f"unknown primitive {op!r}")
    return fn(*args, **kwargs)


def backward(loss: Var) -> dict:
    """Adjoint of every leaf with respect to a scalar loss.

    Returns {leaf node index -> gradient array}; leaves the loss does not
    depend on get zeros.
    """
    if not isinstance(loss, Var):
        raise NonScalarLoss("loss is not a tape variable")
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    nodes = tape.nodes
    adjoint = {loss.index: np.ones_like(loss.value)}
    grads = {}
    for i in range(loss.index, -1, -1):
        g = adjoint.pop(i, None)
        if g is None:
            continue
        parents, vjp = nodes[i]
        if vjp is None:
            if i in tape.leaf_values:
                grads[i] = g
            continue
        for p, pg in zip(parents, vjp(g)):
            if pg is None:
                continue
            acc = adjoint.get(p)
            adjoint[p] = pg if acc is None else acc + pg
    for i, v in tape.leaf_values.items():
        if i <= loss.index and i not in grads:
            grads[i] = np.zeros_like(v)
    return grads


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference check, one worst-case entry per leaf."""

    per_leaf: dict
    max_rel_error: float
    tol: float
    passed: bool
    failures: list


def grad_check(f, point: dict, h: float = 1e-5, tol: float = 1e-6,
               denom_floor: float = 1e-2) -> GradCheckReport:
    """Compare tape gradients of f against central finite differences.

    f maps {name: Var} built on a fresh tape to a scalar Var. Relative
    error per coordinate is |ad - fd| / max(|ad|, |fd|, denom_floor).
    """
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in point.items()}
    grads = backward(f(leaves))
    analytic = {k: grads[leaves[k].index] for k in point}

    def value_at(pt):
        t = Tape()
        return float(f({k: t.leaf(v) for k, v in pt.items()}).value)

    per_leaf, failures = {}, []
    worst = 0.0
    for name, base in point.items():
        fd = np.zeros_like(base)
        flat = fd.ravel()
        for i in range(base.size):
            hi = {k: v.copy() for k, v in point.items()}
            lo = {k: v.copy() for k, v in point.items()}
            hi[name].ravel()[i] += h
            lo[name].ravel()[i] -= h
            flat[i] = (value_at(hi) - value_at(lo)) / (2.0 * h)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), denom_floor)
        rel = np.abs(a - fd) / denom
        leaf_worst = float(rel.max()) if rel.size else 0.0
        per_leaf[name] = leaf_worst
        worst = max(worst, leaf_worst)
        if leaf_worst > tol:
            failures.append(name)
    return GradCheckReport(per_leaf=per_leaf, max_rel_error=worst, tol=tol,
                           passed=worst <= tol, failures=failures)
