"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its parents and a backward rule on a dynamic tape;
``backward`` walks the tape in reverse topological order. Gradients are
accumulated into ``.grad`` of leaf tensors that require them and the
intermediate buffers are dropped afterwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a single reduction is cheaper than an elementwise mask; fall back only when it trips
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    """Dense f64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- tape walk


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad.

    Calling twice without zeroing accumulates, like most frameworks.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # free the tape as we go
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return Tensor._result(out, (a,), lambda g: (g / x,), "log")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._result(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return Tensor._result(out, (a,), bw, "gelu")


# ---------------------------------------------------------------- reductions


def sum_axis(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        out = np.asarray(a.data.sum())
        return Tensor._result(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    ax = _norm_axis(axis, a.ndim, "sum_axis")
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, (a,), bw, "sum_axis")


def mean_axis(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[_norm_axis(axis, a.ndim, "mean_axis")]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(a.ndim)):
        raise DimensionError(f"bad permutation {perm} for rank {a.ndim}")
    inv = tuple(np.argsort(perm))
    return Tensor._result(a.data.transpose(perm), (a,), lambda g: (g.transpose(inv),), "transpose")


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose_last2 needs rank >= 2, got {a.shape}")
    return Tensor._result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose_last2")


def concat_axis(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    ax = _norm_axis(axis, tensors[0].ndim, "concat_axis")
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as e:
        raise DimensionError(f"concat_axis: {[t.shape for t in tensors]}: {e}") from None
    edges = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(edges[i], edges[i + 1]), axis=ax) for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), bw, "concat_axis")


def split_axis(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    ax = _norm_axis(axis, a.ndim, "split_axis")
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to extent {a.shape[ax]}")
    outs = []
    start = 0
    for n in sizes:
        outs.append(slice_axis(a, start, start + n, ax))
        start += n
    return outs


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = _norm_axis(axis, a.ndim, "slice_axis")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]
    if out.size == 0:
        raise DimensionError(f"empty slice [{start}:{stop}] on axis {ax} of {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor._result(out.copy(), (a,), bw, "slice_axis")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; repeated indices accumulate in the backward pass."""
    ax = _norm_axis(axis, a.ndim, "take")
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=ax)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return Tensor._result(out, (a,), bw, "take")


def scatter_rows(base: Tensor, rows: Tensor, index: np.ndarray) -> Tensor:
    """Copy of ``base`` (…, L, D) whose positions ``index`` on axis -2 are replaced by ``rows``."""
    index = np.asarray(index, dtype=np.intp)
    expect = base.shape[:-2] + (len(index), base.shape[-1])
    if rows.shape != expect:
        raise DimensionError(f"scatter_rows: rows {rows.shape} != expected {expect}")
    out = base.data.copy()
    out[..., index, :] = rows.data

    def bw(g):
        gb = g.copy()
        gb[..., index, :] = 0.0
        return gb, g[..., index, :]

    return Tensor._result(out, (base, rows), bw, "scatter_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from None
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 2 and b.ndim > 2:  # shared left operand: fold the batch into one GEMM
                ga = np.moveaxis(g, -2, 0).reshape(a.shape[0], -1) @ np.moveaxis(b.data, -2, 0).reshape(a.shape[1], -1).T
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:  # shared weight: fold the batch into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------- normalizers


def softmax_axis(a: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, a.ndim, "softmax_axis")
    if a.shape[ax] == 0:
        raise DimensionError("softmax over an empty axis")
    x = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return Tensor._result(out, (a,), bw, "softmax_axis")


def log_softmax_axis(a: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, a.ndim, "log_softmax_axis")
    if a.shape[ax] == 0:
        raise DimensionError("log_softmax over an empty axis")
    x = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=ax, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return Tensor._result(out, (a,), bw, "log_softmax_axis")


def l2_normalize_axis(a: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    ax = _norm_axis(axis, a.ndim, "l2_normalize_axis")
    x = a.data
    norm = np.sqrt((x * x).sum(axis=ax, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm)
    out = x / denom

    def bw(g):
        proj = (g * out).sum(axis=ax, keepdims=True)
        gx = (g - np.where(clipped, 0.0, out * proj)) / denom
        return (gx,)

    return Tensor._result(out, (a,), bw, "l2_normalize_axis")


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine gain/bias."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gd = g.shape[-1]
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True) / gd),)

    out = Tensor._result(xhat, (a,), bw, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------- parameters / optimizer


class ParamSet(dict):
    """Ordered name -> Tensor mapping; every entry must require grad."""

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not t.requires_grad:
            raise ContractError(f"parameter {name!r} does not require grad")
        t.name = name
        super().__setitem__(name, t)

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def prefixed(self, prefix: str) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            out[f"{prefix}.{k}"] = v
        return out

    def update(self, other=(), **kw):  # route through __setitem__ checks
        items = other.items() if hasattr(other, "items") else other
        for k, v in items:
            self[k] = v
        for k, v in kw.items():
            self[k] = v

    def num_elements(self) -> int:
        return int(sum(t.data.size for t in self.values()))


@dataclass
class OptimizerState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ParamSet, state: OptimizerState) -> None:
    """One AdamW update with bias correction and decoupled weight decay.

    Gradients are left in place; the caller zeroes them.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ContractError(f"moment shape {m.shape} != parameter shape {p.data.shape} for {name!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        _check_finite(p.data, f"adamw update of {name}")


# ---------------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5, indices: Iterable | None = None) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``t.data``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = out.reshape(-1)
    idxs = range(flat.size) if indices is None else indices
    for i in idxs:
        old = flat[i]
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a)
    b = np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
