"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable op appends a node to the active :class:`Tape`.  A call
to :func:`backward` replays the tape in reverse once and then clears it.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array that can take part in the gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.name = name
        # True when the value depends on a trainable leaf through the tape.
        self._tracked = trainable
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self._tracked

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, trainable={self.trainable}{tag})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed ops; consumed by a single backward pass."""

    nodes: list[_Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._recorded = False
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    # NaN/Inf anywhere propagates into the sum
    if not math.isfinite(out.sum()):
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.trainable = False
    t.name = None
    t._tracked = False
    t._recorded = False
    if _TAPE.enabled and any(i._tracked for i in inputs):
        t._tracked = True
        t._recorded = True
        _TAPE.record(_Node(op, inputs, t, bwd))
    return t


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every trainable leaf."""
    tape = tape or _TAPE
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._recorded:
        raise RuntimeError("backward called on a tensor that was not produced through the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp._tracked:
                continue
            if inp.trainable:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make("div", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make("pow", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    """Square root with the zero subgradient at 0 (keeps distance ops finite)."""
    a = as_tensor(a)
    out = np.sqrt(np.maximum(a.data, 0.0))

    def bwd(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _make("sqrt", out, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _make("gelu", out, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out ** 2),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tensors, bwd)


def index(a, key) -> Tensor:
    """Numpy-style indexing; gradients scatter-add back (handles repeats)."""
    a = as_tensor(a)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make("index", np.array(a.data[key]), (a,), bwd)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")

    def bwd(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make("embedding", weight.data[ids], (weight,), bwd)


def gather_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    """``x[b, positions[b, j]]`` for x of shape [B, L, d] -> [B, N, d]."""
    positions = np.asarray(positions, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.broadcast_to(rows, positions.shape), positions), g)
        return (full,)

    return _make("gather_positions", x.data[rows, positions], (x,), bwd)


def scatter_positions(base: Tensor, positions: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` [B, L, d] with rows at ``positions`` [B, N] replaced by ``values``."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != values.shape[:2]:
        raise ShapeError(f"positions {positions.shape} vs values {values.shape}")
    rows = np.broadcast_to(np.arange(base.shape[0])[:, None], positions.shape)
    out = base.data.copy()
    out[rows, positions] = values.data

    def bwd(g):
        gb = g.copy()
        gb[rows, positions] = 0.0
        return gb, g[rows, positions]

    return _make("scatter_positions", out, (base, values), bwd)


def masked_max(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Max over entries where ``mask`` is True; gradient goes to the first argmax."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_max: a slice has no unmasked entries")
    filled = np.where(mask, a.data, -np.inf)
    arg = np.argmax(filled, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _make("masked_max", out, (a,), bwd)


def masked_min(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    return neg(masked_max(neg(a), mask, axis))


def hinge(a) -> Tensor:
    """``[a]_+``."""
    return relu(a)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bwd)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax stabilised by max subtraction; masked-out entries get exactly 0."""
    a = as_tensor(a)
    x = a.data if mask is None else np.where(mask, a.data, -np.inf)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bwd)


def softmax_cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean over unmasked rows of ``-log softmax(logits)[target]``.

    ``logits`` is [n, C] (leading dims are flattened); ``mask`` holds
    per-row weights, rows with weight 0 contribute nothing.
    """
    logits = as_tensor(logits)
    C = logits.shape[-1]
    x = logits.data.reshape(-1, C)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {x.shape[0]} rows")
    w = np.ones(x.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    if w.shape[0] != x.shape[0]:
        raise ShapeError(f"mask length {w.shape[0]} != {x.shape[0]} rows")
    active = w != 0
    if not active.any():
        raise ValueError("softmax_cross_entropy: mask selects no rows")
    if ((t[active] < 0) | (t[active] >= C)).any():
        raise IndexError(f"target out of range [0, {C})")
    # rows with zero weight never enter the arithmetic
    xa, ta, wa = x[active], t[active], w[active]
    denom = wa.sum()
    shifted = xa - xa.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(len(ta)), ta]
    out = np.asarray((wa * nll).sum() / denom)

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(len(ta)), ta] -= 1.0
        full = np.zeros_like(x)
        full[active] = p * (wa / denom)[:, None] * g
        return (full.reshape(logits.shape),)

    return _make("softmax_cross_entropy", out, (logits,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must be ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make("layer_norm", out, (x, gamma, beta), bwd)


def custom_op(name: str, inputs: Sequence[Tensor], forward: Callable[..., np.ndarray],
              backward_fn: Callable[..., Sequence[np.ndarray]]) -> Tensor:
    """Wrap a user-supplied forward/backward pair as a tape op.

    ``backward_fn(g, *input_arrays)`` returns one gradient per input.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    arrays = [t.data for t in inputs]
    out = np.asarray(forward(*arrays), dtype=np.float64)
    return _make(name, out, inputs, lambda g: tuple(backward_fn(g, *arrays)))


# ---------------------------------------------------------------------------
# verification


class NonDeterministicError(RuntimeError):
    pass


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_elements: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    Error per element is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    With ``max_elements`` set, that many elements are sampled across all inputs.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    inputs = list(inputs)
    saved_flags = [t.trainable for t in inputs]
    for t in inputs:
        t.trainable = True
        t._tracked = True
        t.grad = None
    try:
        _TAPE.clear()
        out = f(*inputs)
        if out.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        with no_grad():
            again = f(*inputs).item()
        if again != out.item():
            raise NonDeterministicError(f"two forward passes disagree: {out.item()!r} vs {again!r}")
        backward(out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
        if max_elements is not None and max_elements < len(coords):
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), size=max_elements, replace=False)
            coords = [coords[k] for k in pick]

        worst = 0.0
        with no_grad():
            for i, j in coords:
                flat = inputs[i].data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + eps
                fp = f(*inputs).item()
                flat[j] = orig - eps
                fm = f(*inputs).item()
                flat[j] = orig
                num = (fp - fm) / (2 * eps)
                ana = analytic[i].reshape(-1)[j]
                err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.trainable = flag
            t._tracked = flag
            t.grad = None


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _param_key(i: int, p: Tensor) -> str:
    return p.name or f"param{i}"


def adam_step(params: Iterable[Tensor], state: OptimizerState) -> None:
    """One bias-corrected Adam update in place; grads are zeroed afterwards."""
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {_param_key(i, p)!r} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        key = _param_key(i, p)
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"moment buffer for {key!r} has shape {m.shape}, param {p.shape}")
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        state.m[key] = m
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        names = [_param_key(i, p) for i, p in enumerate(self.params)]
        if len(set(names)) != len(names):
            raise ValueError("optimizer parameters need unique names")
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
