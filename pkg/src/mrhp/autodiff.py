"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op checks its output for NaN/Inf and raises immediately, so a
non-finite value is reported at the op that produced it rather than at
the loss.  Ops accept arbitrary leading batch dimensions where that is
natural (matmul, softmax, layer_norm, pool, conv1d); the model relies on
this to run a group of equally-shaped samples through one graph.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()

# Test hook: op names whose backward rule is deliberately scaled wrong.
_CORRUPTED: set[str] = set()


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def corrupt_gradient(op_name: str):
    """Scale the backward rule of ``op_name`` by 1.5 while active (negative control)."""
    _CORRUPTED.add(op_name)
    try:
        yield
    finally:
        _CORRUPTED.discard(op_name)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swap_last(self)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of ops executed while the tape is active."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    tape = _current_tape()
    if needs and tape is not None:
        if op in _CORRUPTED:
            inner = backward

            def backward(g, inner=inner):
                return [None if r is None else 1.5 * r for r in inner(g)]

        tape.nodes.append(_Node(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _record("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # (..., m, k) @ (k, n): one flat GEMM instead of a loop over leading axes
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        need_a = a.requires_grad

        def backward(g):
            g2 = g.reshape(-1, n)
            return ((g2 @ bd.T).reshape(ad.shape) if need_a else None), a2.T @ g2

        return _record("matmul", (a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), backward)

    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), backward)


def swap_last(x: Tensor) -> Tensor:
    return _record("swap_last", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(src)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", np.array(x.data[index]), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: np.split(g, cuts, axis=axis))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    n = len(xs)
    return _record("stack", np.stack([x.data for x in xs], axis=axis), xs,
                   lambda g: [np.take(g, i, axis=axis) for i in range(n)])


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def pool(x: Tensor, mode: str = "max", axis: int = -2) -> Tensor:
    """Max or mean over ``axis``; max ties resolve to the lowest index."""
    if x.shape[axis] == 0:
        raise DimensionError(f"cannot pool over empty axis {axis} of shape {x.shape}")
    if mode == "mean":
        return _record("pool_mean", x.data.mean(axis=axis), (x,),
                       lambda g, n=x.shape[axis], s=x.shape: (
                           np.broadcast_to(np.expand_dims(g, axis) / n, s).copy(),))
    if mode != "max":
        raise ValueError(f"unknown pool mode {mode!r}")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    src = x.shape

    def backward(g):
        full = np.zeros(src)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record("pool_max", out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gd.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    if gd.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gd.shape}, {beta.shape} do not match width {d}")
    return _record("layer_norm", xhat * gd + beta.data, (x, gamma, beta), backward)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid 1-D convolution over axis -2 of ``x`` (..., len, d_in) -> (..., len-w+1, d_out)."""
    w, d_in, d_out = kernels.shape
    length = x.shape[-2]
    if x.shape[-1] != d_in:
        raise DimensionError(f"conv1d input width {x.shape[-1]} != kernel input width {d_in}")
    if length < w:
        raise DimensionError(
            f"conv1d input length {length} is shorter than kernel width {w}; "
            "pad the input or use a narrower kernel")
    n_out = length - w + 1
    xd, kd = x.data, kernels.data
    windows = np.stack([xd[..., j:j + n_out, :] for j in range(w)], axis=-2)
    flat = windows.reshape(*windows.shape[:-2], w * d_in)
    out = flat @ kd.reshape(w * d_in, d_out) + bias.data

    def backward(g):
        gk = _unbroadcast(np.swapaxes(flat, -1, -2) @ g, (w * d_in, d_out)).reshape(w, d_in, d_out)
        gx = np.zeros(xd.shape)
        for j in range(w):
            gx[..., j:j + n_out, :] += g @ kd[j].T
        return gx, gk, _unbroadcast(g, bias.shape)

    return _record("conv1d", out, (x, kernels, bias), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise DimensionError("embedding lookup needs at least one token")
    vocab = table.shape[0]
    if ids.min() < 0 or ids.max() >= vocab:
        raise IndexError(f"token id out of range [0, {vocab})")
    src = table.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return _record("embedding", table.data[ids], (table,), backward)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity of rows: (n, d), (k, d) -> (n, k)."""
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=-1, keepdims=True))
    if (na == 0).any() or (nb == 0).any():
        raise NonFiniteError("cosine similarity of a zero vector is undefined")
    ua, ub = ad / na, bd / nb
    s = ua @ ub.T

    def backward(g):
        ga = (g @ ub - (g * s).sum(axis=1, keepdims=True) * ua) / na
        gb = (g.T @ ua - (g * s).sum(axis=0)[:, None] * ub) / nb
        return ga, gb

    return _record("cosine_matrix", s, (a, b), backward)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor on the tape.

    Tensors in ``params`` that do not take part in the graph end with a zero gradient.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # what is left are leaves (tensors not produced on this tape)
    leaves = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if id(inp) in grads:
                leaves[id(inp)] = inp
    if id(loss) in grads and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.reshape(t.shape).copy() if t.grad is None else t.grad + g.reshape(t.shape)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One in-place Adam update with bias-corrected moments."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise DimensionError(f"adam shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return state


# ---------------------------------------------------------------- checking


def numeric_grad(f: Callable[[], float], p: Tensor, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` builds the scalar loss from the current parameter values.  Kinks
    (hinge at 0, max ties) are not handled; callers perturb inputs away from them.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape, params)
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: float(f().data), p, h)
        err = np.abs(p.grad - num) / np.maximum(1.0, np.abs(num))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
