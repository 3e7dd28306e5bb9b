"""Dense tensors with a linear reverse-mode gradient tape.

Every differentiable operation appends one node to the thread-local tape
when gradient recording is enabled and at least one input participates in
gradients. :func:`backward` walks the tape in exact reverse order, so
gradients are a deterministic function of the forward program.

Training runs in float32. Gradient checks run the same code in float64:
operations preserve the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DisconnectedGraph, EmptyMask, InvalidAxis, ShapeMismatch

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _raise_not_scalar(t: Tensor):
    raise ShapeMismatch(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        out.requires_grad = True
        out.is_leaf = False
        self.nodes.append(_Node(out, inputs, backward))

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss) through the tape; returns leaf gradients keyed by ``id``.

        Leaf tensors with ``requires_grad`` get their ``.grad`` overwritten.
        The tape is cleared afterwards.
        """
        if loss.size != 1:
            raise DisconnectedGraph(f"loss must be a scalar, got shape {loss.shape}")
        if not loss.requires_grad or loss.is_leaf:
            raise DisconnectedGraph("loss was not produced by tape-recorded operations")
        if not self.nodes or self.nodes[-1].out is not loss and all(n.out is not loss for n in self.nodes):
            raise DisconnectedGraph("loss does not appear on the active tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp.is_leaf:
                    leaves[key] = inp
        out = {}
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g
            out[key] = g
        self.clear()
        return out


_local = threading.local()


def get_tape() -> GradTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = GradTape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep over the current thread's tape."""
    return get_tape().backward(loss)


def _wants_grad(*inputs: Tensor) -> bool:
    tape = get_tape()
    return tape.enabled and any(t.requires_grad for t in inputs)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _wants_grad(*inputs):
        get_tape().record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    # keep the codomain open: large |x| would otherwise round to exactly 0 or 1
    fi = np.finfo(d.dtype)
    y = np.clip(y, fi.tiny, d.dtype.type(1.0) - fi.epsneg)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    inner = c * (d + k * d * d * d)
    th = np.tanh(inner)
    y = 0.5 * d * (1.0 + th)

    def bw(g):
        dinner = c * (1.0 + 3.0 * k * d * d)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th * th) * dinner),)

    return _result(y.astype(d.dtype), (x,), bw)


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, gelu, scale."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "gelu": gelu, "scale": scale}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), bw)


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype).reshape(()), (x,), bw)


def softmax_lastaxis(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeMismatch("softmax needs a non-empty last axis")
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


softmax = softmax_lastaxis


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 1:
        raise ShapeMismatch("layer_norm needs a non-empty last axis")
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise ShapeMismatch(f"layer_norm affine shape {p.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    inputs = tuple(t for t in (x, gain, bias) if t is not None)

    def bw(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = None
        if x.requires_grad:
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gx_hat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        res = [gx]
        if gain is not None:
            res.append((g * xhat).sum(axis=lead) if gain.requires_grad else None)
        if bias is not None:
            res.append(g.sum(axis=lead) if bias.requires_grad else None)
        return tuple(res)

    return _result(np.ascontiguousarray(y, dtype=xd.dtype), inputs, bw)


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared difference, optionally restricted to ``mask == 1`` elements."""
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if mask is None:
        n = diff.size
        w = None
    else:
        w = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=pred.dtype)
        if w.shape != pred.shape:
            try:
                w = np.broadcast_to(w, pred.shape)
            except ValueError:
                raise ShapeMismatch(f"mse mask shape {w.shape} vs {pred.shape}") from None
        if not np.all((w == 0) | (w == 1)):
            raise ValueError("mse mask must be binary")
        n = int(w.sum())
        if n == 0:
            raise EmptyMask("mask selects zero elements")
    sq = diff * diff if w is None else diff * diff * w
    val = np.asarray(sq.sum() / pred.dtype.type(n), dtype=pred.dtype).reshape(())

    def bw(g):
        base = (2.0 / n) * g * diff
        if w is not None:
            base = base * w
        base = base.astype(pred.dtype)
        return (base if pred.requires_grad else None, -base if target.requires_grad else None)

    return _result(val, (pred, target), bw)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} into {shape}") from None
    return _result(y, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise InvalidAxis(f"{axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise InvalidAxis(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeMismatch("concat of an empty sequence")
    axis = _norm_axis(axis, xs[0].ndim)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeMismatch(f"concat along {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for i in range(len(xs)):
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(out)

    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    axis = _norm_axis(axis, x.ndim)
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeMismatch(f"narrow [{start}, {start + length}) outside extent {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[idx]), (x,), bw)


def split(x: Tensor, sizes: Sequence[int] | int, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into pieces of the given sizes (or ``sizes`` equal parts)."""
    axis = _norm_axis(axis, x.ndim)
    n = x.shape[axis]
    if isinstance(sizes, int):
        if sizes < 1 or n % sizes:
            raise ShapeMismatch(f"cannot split extent {n} into {sizes} equal parts")
        sizes = [n // sizes] * sizes
    if sum(sizes) != n or any(s < 0 for s in sizes):
        raise ShapeMismatch(f"split sizes {list(sizes)} do not cover extent {n}")
    out, start = [], 0
    for s in sizes:
        out.append(narrow(x, axis, start, s))
        start += s
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding ids outside [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5, indices: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``indices`` restricts the probe to selected flat positions; the others
    are left at zero. Evaluation happens with recording disabled and ``x``
    restored exactly afterwards.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step {h} outside [1e-7, 1e-3]")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    todo = range(flat.size) if indices is None else indices
    with no_grad():
        for i in todo:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Frobenius norm; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def assert_finite(x: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in {what}")
