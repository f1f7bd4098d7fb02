"""Dense float32 tensors with reverse-mode autodiff over a dynamically built tape.

Tensors are numpy-backed, row-major, rank 1-4 (rank 4 read as N x C x H x W).
Every differentiable op records a node holding its inputs and a backward
closure; ``Tensor.backward()`` replays the tape in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand extents do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Backward invoked on a tensor the tape cannot support."""


class NumericalError(ArithmeticError):
    """A forward value came out non-finite in checked mode."""


_grad_enabled = True
_checked = False


def set_checked(flag: bool) -> None:
    """Enable/disable finiteness assertions after every forward op."""
    global _checked
    _checked = bool(flag)


def is_checked() -> bool:
    return _checked


class no_grad:
    """Context manager that suspends tape recording (pure evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """One tape record: the op kind, its inputs, and the backward rule."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn


class Tensor:
    """A float32 array plus optional gradient accumulator and tape node."""

    __slots__ = ("data", "requires_grad", "grad", "node", "retains_grad")

    def __init__(self, values, dims: Optional[Sequence[int]] = None,
                 requires_grad: bool = False):
        data = np.asarray(values, dtype=np.float32)
        if dims is not None:
            dims = tuple(int(d) for d in dims)
            expected = int(np.prod(dims)) if dims else 1
            if data.size != expected:
                raise ShapeError(f"expected {expected} values, got {data.size}")
            data = data.reshape(dims)
        if not 1 <= data.ndim <= 4:
            raise ShapeError(f"rank must be 1-4, got {data.ndim}")
        if any(d < 1 for d in data.shape):
            raise ShapeError(f"every extent must be >= 1, got {data.shape}")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.retains_grad = False

    # -- introspection --------------------------------------------------

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.dims}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ----------------------------------------------

    def retain_grad(self) -> "Tensor":
        """Keep the gradient on this (possibly non-leaf) tensor after backward."""
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.retains_grad = False
        return out

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad leaf.

        Repeated calls accumulate; call ``zero_grad`` on leaves between
        passes if accumulation is not wanted.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got dims {self.dims}")
        if self.node is None:
            raise GraphError("loss is detached from the tape (no producing op)")
        tape = GraphTape.trace(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(tape.records):
            out_grad = flowing.pop(id(t), None)
            if out_grad is None:
                continue
            if t.retains_grad:
                t.grad = out_grad if t.grad is None else t.grad + out_grad
            parent_grads = t.node.backward_fn(out_grad)
            for parent, g in zip(t.node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    # leaf: accumulate into the public gradient slot
                    parent.grad = g if parent.grad is None else parent.grad + g
                else:
                    prev = flowing.get(id(parent))
                    flowing[id(parent)] = g if prev is None else prev + g

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -float(other))

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, dims):
        return reshape(self, dims)


class GraphTape:
    """Topologically ordered record list for one backward pass.

    ``records[i]`` holds a tensor whose node's parents are all leaves or
    appear at indices < i; a backward pass visits each record exactly once,
    in reverse order.
    """

    def __init__(self, records: list):
        self.records = records

    @staticmethod
    def trace(output: "Tensor") -> "GraphTape":
        records: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                records.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.node.parents:
                if p.node is not None and id(p) not in seen:
                    stack.append((p, False))
        return GraphTape(records)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward_fn) -> Tensor:
    """Wrap an op result, attaching a tape node when gradients are live."""
    if _checked and not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.retains_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    else:
        out.requires_grad = False
        out.node = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_binary(a: Tensor, b, op: str):
    if not isinstance(b, Tensor):
        return np.float32(b)
    try:
        np.broadcast_shapes(a.dims, b.dims)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.dims} and {b.dims}") from None
    return b


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _check_binary(a, b, "add")
    if not isinstance(b, Tensor):
        return _make(a.data + b, "add", (a,), lambda g: (g,))
    sa, sb = a.dims, b.dims
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b) -> Tensor:
    b = _check_binary(a, b, "mul")
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    sa, sb = a.dims, b.dims
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def scale(a: Tensor, factor: float) -> Tensor:
    f = np.float32(factor)
    return _make(a.data * f, "scale", (a,), lambda g: (g * f,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0
    return _make(out, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # stable: never exponentiates a large positive argument
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


# -- structure -----------------------------------------------------------

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 1 of rank-2 or rank-4 parts)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    rank = parts[0].data.ndim
    if rank not in (2, 4):
        raise ShapeError(f"concat_channels supports rank 2 or 4, got {rank}")
    ref = parts[0].dims
    for k, p in enumerate(parts):
        if p.data.ndim != rank:
            raise ShapeError(f"part {k}: rank {p.data.ndim} != {rank}")
        other = p.dims[:1] + p.dims[2:]
        if other != ref[:1] + ref[2:]:
            raise ShapeError(
                f"part {k}: non-channel extents {p.dims} do not match {ref}")
    if len(parts) == 1:
        p = parts[0]
        return _make(p.data.copy(), "concat", (p,), lambda g: (g,))
    widths = [p.dims[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return _make(np.concatenate([p.data for p in parts], axis=1),
                 "concat", parts, backward)


def narrow_channels(a: Tensor, start: int, length: int) -> Tensor:
    """Slice a contiguous channel band [start, start+length)."""
    if a.data.ndim not in (2, 4):
        raise ShapeError(f"narrow_channels supports rank 2 or 4, got {a.data.ndim}")
    if length < 1 or not (0 <= start and start + length <= a.dims[1]):
        raise ShapeError(
            f"band [{start}, {start + length}) outside {a.dims[1]} channels")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:start + length] = g
        return (full,)

    return _make(a.data[:, start:start + length].copy(), "narrow", (a,), backward)


def reshape(a: Tensor, dims) -> Tensor:
    dims = tuple(int(d) for d in dims)
    old = a.dims
    if int(np.prod(dims)) != a.size:
        raise ShapeError(f"cannot reshape {old} to {dims}")
    return _make(a.data.reshape(dims), "reshape", (a,),
                 lambda g: (g.reshape(old),))


# -- dense / reductions ----------------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """out[n, j] = sum_i x[n, i] * weights[i, j] (+ bias[j])."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(f"dense needs rank-2 operands, got {x.dims} and {weights.dims}")
    if x.dims[1] != weights.dims[0]:
        raise ShapeError(
            f"dense: inner extents disagree ({x.dims[1]} vs {weights.dims[0]})")
    out = x.data @ weights.data
    if bias is not None:
        if bias.dims != (weights.dims[1],):
            raise ShapeError(f"dense: bias {bias.dims} != ({weights.dims[1]},)")
        out = out + bias.data
        parents = (x, weights, bias)

        def backward(g):
            return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)
    else:
        parents = (x, weights)

        def backward(g):
            return g @ weights.data.T, x.data.T @ g

    return _make(out, "dense", parents, backward)


def tsum(a: Tensor) -> Tensor:
    # accumulate in float64 so the scalar is correctly rounded
    shape = a.dims
    out = np.float32(a.data.sum(dtype=np.float64)).reshape(1)
    return _make(out, "sum", (a,),
                 lambda g: (np.broadcast_to(g.reshape(()), shape).astype(np.float32),))


def tmean(a: Tensor) -> Tensor:
    n = np.float32(a.size)
    shape = a.dims
    out = np.float32(a.data.sum(dtype=np.float64) / a.size).reshape(1)
    return _make(out, "mean", (a,),
                 lambda g: ((np.broadcast_to(g.reshape(()), shape) / n).astype(np.float32),))


def mean_channels(a: Tensor) -> Tensor:
    """Per-position mean over channels: N x C x H x W -> N x 1 x H x W."""
    if a.data.ndim != 4:
        raise ShapeError(f"mean_channels needs rank 4, got {a.dims}")
    c = np.float32(a.dims[1])
    shape = a.dims
    return _make(a.data.mean(axis=1, keepdims=True, dtype=np.float32),
                 "mean_channels", (a,),
                 lambda g: ((np.broadcast_to(g, shape) / c).astype(np.float32),))


def max_channels(a: Tensor) -> Tensor:
    """Per-position max over channels: N x C x H x W -> N x 1 x H x W.

    Gradient is split evenly among exactly-tied maxima, which keeps the
    backward rule deterministic.
    """
    if a.data.ndim != 4:
        raise ShapeError(f"max_channels needs rank 4, got {a.dims}")
    out = a.data.max(axis=1, keepdims=True)
    mask = a.data == out
    counts = mask.sum(axis=1, keepdims=True)

    def backward(g):
        return ((g / counts) * mask,)

    return _make(out, "max_channels", (a,), backward)


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by kind: add/mul take a tensor-or-scalar b, scale a scalar."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "scale":
        return scale(a, float(b))
    if op_kind == "relu":
        return relu(a)
    if op_kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown elementwise kind '{op_kind}'")


# -- gradient checking -----------------------------------------------------

def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error metric per element: |analytic - numeric| / max(1, |analytic| + |numeric|).
    The probe step for element i is eps * max(1, |x_i|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = fn(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued fn, got dims {out.dims}")
    out.backward()
    analytic = leaf.grad.reshape(-1).astype(np.float64)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        h = np.float32(eps * max(1.0, abs(float(flat[i]))))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] = flat[i] + h
        xm[i] = flat[i] - h
        with no_grad():
            fp = fn(Tensor(xp.reshape(x.dims))).item()
            fm = fn(Tensor(xm.reshape(x.dims))).item()
        numeric[i] = (fp - fm) / (float(xp[i]) - float(xm[i]))

    denom = np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
