"""Dense float64 arrays, a reverse-mode tape, and a finite-difference gradient checker.

Everything downstream (attention mechanisms, the toy sequence model) is built
from the small op vocabulary in this module.  Ops accept either plain Tensors
(pure evaluation) or Vars bound to a Tape (recorded, differentiable); the two
modes share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "Tensor",
    "Var",
    "Tape",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "relu",
    "softmax",
    "concat",
    "slice_cols",
    "sum_all",
    "ema",
    "layer_norm",
    "gather_rows",
    "cross_entropy",
    "backward",
    "finite_difference_check",
    "GradCheck",
]


class DimensionError(ValueError):
    """Operand shapes do not line up for the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


# Verification hook: `attentive-mlp verify --break-gradients` scales the
# matmul backward rule by 1.01 to prove the gradient check can fail.
_MATMUL_GRAD_SCALE = 1.0


class Tensor:
    """Immutable dense array of 64-bit floats, rank 0 to 3.

    Rank 0 arises only from scalar reductions (``sum_all``, ``cross_entropy``);
    tensors built from data are rank 1-3 with positive extents.  Every element
    is finite.  Values are safe to share across threads.
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64)
        _check_array(arr)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed float64 array without copying."""
        obj = object.__new__(cls)
        _check_array(arr)
        arr.setflags(write=False)
        obj.data = arr
        return obj

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _check_array(arr: np.ndarray) -> None:
    if arr.dtype != np.float64:
        raise ContractError(f"expected float64 data, got {arr.dtype}")
    if arr.ndim > 3:
        raise DimensionError(f"rank {arr.ndim} exceeds 3 (shape {arr.shape})")
    if arr.ndim > 0 and min(arr.shape) < 1:
        raise DimensionError(f"extents must be positive, got shape {arr.shape}")
    # a single reduction: any NaN/Inf element makes the sum non-finite
    if not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise ContractError("tensor contains NaN or Inf")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Var):
        return x.tensor
    return Tensor(x)


class Var:
    """Handle to a value recorded on a Tape.

    ``grad`` is populated by ``backward`` for requires-grad Vars; it always
    matches the value's shape.  A Var is only meaningful on the Tape that
    created it.
    """

    __slots__ = ("tensor", "node_id", "requires_grad", "tape", "_grad")

    def __init__(self, tensor: Tensor, node_id: int, requires_grad: bool, tape: "Tape"):
        self.tensor = tensor
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.tape = tape
        self._grad: Tensor | None = None

    @property
    def grad(self) -> Tensor | None:
        return self._grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def item(self) -> float:
        return self.tensor.item()

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple] | None
    requires: bool


class Tape:
    """Recorded computation graph in topological order.

    Build once, backward once.  A Tape and its Vars belong to one logical
    thread; distinct Tapes may be used concurrently.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._vars: list[Var] = []
        self._spent = False

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value, requires_grad: bool = False) -> Var:
        """Enter a value onto the tape as an input node."""
        t = _as_tensor(value)
        node_id = len(self._nodes)
        self._nodes.append(_Node(inputs=(), backward=None, requires=requires_grad))
        v = Var(t, node_id, requires_grad, self)
        self._vars.append(v)
        return v

    def _record(self, out: np.ndarray, inputs: Sequence[Var], bw: Callable) -> Var:
        requires = any(v.requires_grad for v in inputs)
        node_id = len(self._nodes)
        self._nodes.append(
            _Node(inputs=tuple(v.node_id for v in inputs), backward=bw, requires=requires)
        )
        v = Var(Tensor._wrap(out), node_id, requires, self)
        self._vars.append(v)
        return v


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ContractError("operands come from different tapes")
    return tape


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.leaf(_as_tensor(x))


def _val(x) -> np.ndarray:
    return _as_tensor(x).data


def _dispatch(out: np.ndarray, operands: tuple, make_bw: Callable):
    """Return a Tensor, or record a Var if any operand lives on a tape."""
    tape = _tape_of(*operands)
    if tape is None:
        return Tensor._wrap(out)
    vs = [_lift(tape, x) for x in operands]
    return tape._record(out, vs, make_bw())


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product of two rank-2 operands."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {av.shape} @ {bv.shape}")
    out = av @ bv

    def make_bw():
        def bw(g):
            return (_MATMUL_GRAD_SCALE * (g @ bv.T), av.T @ g)

        return bw

    return _dispatch(out, (a, b), make_bw)


def transpose(a):
    av = _val(a)
    if av.ndim != 2:
        raise DimensionError(f"transpose needs a rank-2 operand, got shape {av.shape}")
    out = np.ascontiguousarray(av.T)

    def make_bw():
        def bw(g):
            return (np.ascontiguousarray(g.T),)

        return bw

    return _dispatch(out, (a,), make_bw)


def _same_shape(av, bv, op):
    if av.shape != bv.shape:
        raise DimensionError(f"{op} needs matching shapes, got {av.shape} vs {bv.shape}")


def add(a, b):
    av, bv = _val(a), _val(b)
    _same_shape(av, bv, "add")
    return _dispatch(av + bv, (a, b), lambda: lambda g: (g, g))


def sub(a, b):
    av, bv = _val(a), _val(b)
    _same_shape(av, bv, "sub")
    return _dispatch(av - bv, (a, b), lambda: lambda g: (g, -g))


def mul(a, b):
    """Elementwise product."""
    av, bv = _val(a), _val(b)
    _same_shape(av, bv, "mul")
    return _dispatch(av * bv, (a, b), lambda: lambda g: (g * bv, g * av))


def scale(a, s: float):
    """Multiply by a python scalar (not differentiated through s)."""
    av = _val(a)
    s = float(s)
    return _dispatch(av * s, (a,), lambda: lambda g: (g * s,))


def add_bias(x, b):
    """Add a rank-1 bias to every row of a rank-2 operand."""
    xv, bv = _val(x), _val(b)
    if xv.ndim != 2 or bv.ndim != 1 or xv.shape[1] != bv.shape[0]:
        raise DimensionError(f"add_bias needs (n,k) plus (k,), got {xv.shape} and {bv.shape}")
    return _dispatch(xv + bv[None, :], (x, b), lambda: lambda g: (g, g.sum(axis=0)))


def relu(x):
    xv = _val(x)
    out = np.maximum(xv, 0.0)

    def make_bw():
        mask = xv > 0.0

        def bw(g):
            return (g * mask,)

        return bw

    return _dispatch(out, (x,), make_bw)


def _softmax_last(xv: np.ndarray) -> np.ndarray:
    # max-subtraction keeps exp in range for any finite input
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis; each slice sums to 1."""
    xv = _val(x)
    if xv.ndim == 0:
        raise DimensionError("softmax needs at least rank 1")
    out = _softmax_last(xv)

    def make_bw():
        y = out

        def bw(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)

        return bw

    return _dispatch(out, (x,), make_bw)


def concat(a, b, axis: int):
    """Concatenate two rank-2 operands along axis 0 (rows) or 1 (columns)."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionError(f"concat needs rank-2 operands, got {av.shape}, {bv.shape}")
    if axis not in (0, 1):
        raise DimensionError(f"concat axis must be 0 or 1, got {axis}")
    other = 1 - axis
    if av.shape[other] != bv.shape[other]:
        raise DimensionError(
            f"concat along axis {axis} needs matching extent on axis {other}: "
            f"{av.shape} vs {bv.shape}"
        )
    out = np.concatenate([av, bv], axis=axis)
    split = av.shape[axis]

    def make_bw():
        def bw(g):
            if axis == 0:
                return (g[:split], g[split:])
            return (g[:, :split], g[:, split:])

        return bw

    return _dispatch(out, (a, b), make_bw)


def slice_cols(x, start: int, stop: int):
    """Contiguous column slice of a rank-2 operand."""
    xv = _val(x)
    if xv.ndim != 2:
        raise DimensionError(f"slice_cols needs a rank-2 operand, got shape {xv.shape}")
    if not (0 <= start < stop <= xv.shape[1]):
        raise DimensionError(f"slice [{start}:{stop}] out of range for shape {xv.shape}")
    out = xv[:, start:stop].copy()

    def make_bw():
        def bw(g):
            full = np.zeros_like(xv)
            full[:, start:stop] = g
            return (full,)

        return bw

    return _dispatch(out, (x,), make_bw)


def sum_all(x):
    """Sum of all elements, as a rank-0 scalar."""
    xv = _val(x)
    out = np.asarray(xv.sum())

    def make_bw():
        def bw(g):
            return (np.broadcast_to(g, xv.shape).copy(),)

        return bw

    return _dispatch(out, (x,), make_bw)


def ema(x, beta: float):
    """Exponential moving average over rows: out_i = b*out_{i-1} + (1-b)*x_i.

    The running state starts at the first row, so out_1 == x_1 exactly and
    beta == 1 holds the first row forever.
    """
    beta = float(beta)
    if not (0.0 <= beta <= 1.0):
        raise ContractError(f"ema beta must be in [0, 1], got {beta}")
    xv = _val(x)
    if xv.ndim != 2:
        raise DimensionError(f"ema needs a rank-2 operand, got shape {xv.shape}")
    n = xv.shape[0]
    out = np.empty_like(xv)
    out[0] = xv[0]
    for i in range(1, n):
        out[i] = beta * out[i - 1] + (1.0 - beta) * xv[i]

    def make_bw():
        def bw(g):
            gx = np.empty_like(g)
            carry = g[n - 1].copy()
            for i in range(n - 1, 0, -1):
                gx[i] = (1.0 - beta) * carry
                carry = g[i - 1] + beta * carry
            gx[0] = carry
            return (gx,)

        return bw

    return _dispatch(out, (x,), make_bw)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Row-wise normalization of a rank-2 operand with learned gain and bias."""
    xv, gv, bv = _val(x), _val(gain), _val(bias)
    if xv.ndim != 2 or gv.shape != (xv.shape[1],) or bv.shape != (xv.shape[1],):
        raise DimensionError(
            f"layer_norm needs (n,d) with (d,) gain/bias, got {xv.shape}, {gv.shape}, {bv.shape}"
        )
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gv[None, :] + bv[None, :]

    def make_bw():
        d = xv.shape[1]

        def bw(g):
            dgain = (g * xhat).sum(axis=0)
            dbias = g.sum(axis=0)
            dxhat = g * gv[None, :]
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
            return (dx, dgain, dbias)

        return bw

    return _dispatch(out, (x, gain, bias), make_bw)


def gather_rows(table, indices):
    """Select rows of a rank-2 table; backward scatter-adds into the table."""
    tv = _val(table)
    idx = np.asarray(indices, dtype=np.int64)
    if tv.ndim != 2 or idx.ndim != 1:
        raise DimensionError(f"gather_rows needs a rank-2 table and rank-1 indices")
    if idx.size == 0 or idx.min() < 0 or idx.max() >= tv.shape[0]:
        raise ContractError(f"indices out of range for table with {tv.shape[0]} rows")
    out = tv[idx].copy()

    def make_bw():
        def bw(g):
            full = np.zeros_like(tv)
            np.add.at(full, idx, g)
            return (full,)

        return bw

    return _dispatch(out, (table,), make_bw)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under row softmax."""
    lv = _val(logits)
    idx = np.asarray(targets, dtype=np.int64)
    if lv.ndim != 2 or idx.shape != (lv.shape[0],):
        raise DimensionError(
            f"cross_entropy needs (n,v) logits with n targets, got {lv.shape} and {idx.shape}"
        )
    if idx.min() < 0 or idx.max() >= lv.shape[1]:
        raise ContractError(f"target out of range for {lv.shape[1]} classes")
    n = lv.shape[0]
    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + lv.max(axis=1)
    out = np.asarray((lse - lv[np.arange(n), idx]).mean())

    def make_bw():
        probs = _softmax_last(lv)

        def bw(g):
            dl = probs.copy()
            dl[np.arange(n), idx] -= 1.0
            return (dl * (float(g) / n),)

        return bw

    return _dispatch(out, (logits,), make_bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Var) -> None:
    """Populate .grad on every requires-grad Var reachable from the scalar loss."""
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")
    if loss.tensor.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.tensor.shape}")
    if tape._spent:
        raise ContractError("backward already ran on this tape")
    tape._spent = True

    grads: list[np.ndarray | None] = [None] * len(tape._nodes)
    grads[loss.node_id] = np.ones_like(loss.tensor.data)

    for nid in range(loss.node_id, -1, -1):
        node = tape._nodes[nid]
        g = grads[nid]
        if g is None or node.backward is None or not node.requires:
            continue
        contribs = node.backward(g)
        for iid, contrib in zip(node.inputs, contribs):
            if contrib is None or not tape._nodes[iid].requires:
                continue
            # contributions are never mutated, so aliasing g is fine
            if grads[iid] is None:
                grads[iid] = contrib
            else:
                grads[iid] = grads[iid] + contrib

    for v in tape._vars:
        if v.requires_grad:
            g = grads[v.node_id]
            if g is None:
                g = np.zeros_like(v.tensor.data)
            v._grad = Tensor._wrap(np.asarray(g, dtype=np.float64))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheck:
    """Outcome of one parameter's finite-difference comparison."""

    index: int
    max_rel_err: float
    passed: bool


def finite_difference_check(f, params, h: float = 1e-4, tol: float = 1e-4) -> list[GradCheck]:
    """Compare tape gradients of f against central finite differences.

    f must be pure and accept one positional argument per parameter; given
    Vars it must return a scalar Var, given Tensors a scalar Tensor.  The
    relative error per element is |fd - an| / max(|fd|, |an|, 1e-8).
    """
    if not (1e-6 <= h <= 1e-3):
        raise ContractError(f"h must lie in [1e-6, 1e-3], got {h}")
    base = [_as_tensor(p) for p in params]

    tape = Tape()
    vs = [tape.leaf(p, requires_grad=True) for p in base]
    out = f(*vs)
    backward(tape, out)
    analytic = [v.grad.data for v in vs]

    def eval_at(tensors) -> float:
        r = f(*tensors)
        return _as_tensor(r).item()

    reports = []
    for i, p in enumerate(base):
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            plus = p.data.copy().reshape(-1)
            plus[j] += h
            minus = p.data.copy().reshape(-1)
            minus[j] -= h
            args_p = list(base)
            args_p[i] = Tensor._wrap(plus.reshape(p.shape))
            args_m = list(base)
            args_m[i] = Tensor._wrap(minus.reshape(p.shape))
            fd.reshape(-1)[j] = (eval_at(args_p) - eval_at(args_m)) / (2.0 * h)
        an = analytic[i]
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-8)
        rel = float(np.max(np.abs(fd - an) / denom)) if fd.size else 0.0
        reports.append(GradCheck(index=i, max_rel_err=rel, passed=rel <= tol))
    return reports
