"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient (and recording is enabled) the result remembers its
inputs and a closure that pushes the upstream gradient back to them.
Node ids come from a global counter, so a node's inputs always have smaller
ids than the node itself and the backward sweep is a plain descending sort.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3

_ids = itertools.count()
_recording = True


class DimensionError(ValueError):
    pass


class DegenerateAttentionError(ValueError):
    """A softmax row had no allowed entries."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "id")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self.grad: np.ndarray | None = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, id={self.id})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    if _recording and any(p.requires_grad for p in parents):
        return Tensor(data, True, op, tuple(parents), backward)
    return Tensor(data, False, op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    return _node(out, "scale", (a,), lambda g: _accumulate(a, g * c))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    out = np.where(keep, a.data, 0.0)
    return _node(out, "relu", (a,), lambda g: _accumulate(a, g * keep))


def dropout(a: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; ``rng`` is a :class:`Prng`.  Identity when rate == 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.data * keep, "dropout", (a,), lambda g: _accumulate(a, g * keep))


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accumulate(b, gb)

    return _node(out, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(a.data, -1, -2)
    return _node(out, "transpose", (a,), lambda g: _accumulate(a, np.swapaxes(g, -1, -2)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    if out.ndim > MAX_RANK:
        raise DimensionError(f"reshape: rank {out.ndim} exceeds {MAX_RANK}")
    return _node(out, "reshape", (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _node(out, "concat", tuple(tensors), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accumulate(table, full)

    return _node(out, "embedding", (table,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.array([a.data.sum()])
    return _node(out, "sum", (a,), lambda g: _accumulate(a, np.broadcast_to(g[0], a.shape)))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.array([a.data.mean()])
    return _node(out, "mean", (a,), lambda g: _accumulate(a, np.broadcast_to(g[0] / n, a.shape)))


# ------------------------------------------------------------- normalizers

def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries are left
    out of the max subtraction and get exactly zero probability.
    """
    x = as_tensor(x)
    if mask is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateAttentionError("softmax_rows: a row has every entry masked")
        masked = np.where(mask, x.data, -np.inf)
        shifted = np.where(mask, x.data - masked.max(axis=-1, keepdims=True), 0.0)
        e = np.where(mask, np.exp(shifted), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, "softmax", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        if x.requires_grad:
            gx = g * gamma.data
            _accumulate(x, inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                                      - xhat * (gx * xhat).sum(axis=-1, keepdims=True)))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))

    return _node(out, "layer_norm", (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels, keep, smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over positions where ``keep`` is True.

    With ``smoothing`` > 0 the target puts ``1 - smoothing`` on the label and
    spreads ``smoothing`` uniformly over the vocabulary.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("cross_entropy: smoothing must lie in [0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    keep = np.asarray(keep, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is padding")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    nll = -picked
    if smoothing:
        nll = (1.0 - smoothing) * nll - smoothing * logp.mean(axis=-1)
    out = np.array([(nll * keep).sum() / n])

    def backward(g):
        grad = np.exp(logp)
        if smoothing:
            grad -= smoothing / grad.shape[-1]
        np.put_along_axis(grad, labels[..., None],
                          np.take_along_axis(grad, labels[..., None], axis=-1) - (1.0 - smoothing), axis=-1)
        _accumulate(logits, grad * (keep[..., None] * (g[0] / n)))

    return _node(out, "cross_entropy", (logits,), backward)


# ----------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every recorded ancestor of ``loss``.

    Gradients accumulate into ``.grad``; callers zero them between steps.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in nodes:
            continue
        nodes[t.id] = t
        stack.extend(p for p in t.parents if p.requires_grad)
    _accumulate(loss, np.ones_like(loss.data))
    for node_id in sorted(nodes, reverse=True):
        t = nodes[node_id]
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    # interior gradients are not needed once propagated
    for t in nodes.values():
        if t.parents:
            t.grad = None


# ------------------------------------------------------------ verification

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               seed: int = 0, max_coords: int | None = None) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  With
    ``max_coords`` set, that many coordinates per parameter are sampled with a
    seeded :class:`Prng` instead of checking every one.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("grad_check: step must lie in [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = Prng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = sorted(rng.permutation(flat.size)[:max_coords])
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = f().data[0]
            flat[i] = orig - h
            with no_grad():
                down = f().data[0]
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------- parameters

@dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable


# ---------------------------------------------------------------------- PRNG

_MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Prng:
    """splitmix64: state advances by 0x9E3779B97F4A7C15 per draw, output is
    the Stafford variant-13 mix of the new state.  Floats take the top 53 bits.

    Seed 0 yields 0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * _GAMMA
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return _mix(z)

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def random(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return ((self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53).reshape(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (z * std).reshape(shape)

    def randint(self, high: int, shape=()) -> np.ndarray:
        """Integers in [0, high); ``u64 % high`` bias is negligible for small ``high``."""
        n = int(np.prod(shape, dtype=np.int64))
        return (self.u64(n) % np.uint64(high)).astype(np.int64).reshape(shape)

    def below(self, high: int) -> int:
        return int(self.randint(high, (1,))[0])

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        self.shuffle(items)
        return items

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def derangement(self, n: int) -> list[int]:
        """Uniform permutation with no fixed point (rejection sampling)."""
        if n < 2:
            raise ValueError("derangement needs at least two items")
        while True:
            perm = self.permutation(n)
            if all(i != p for i, p in enumerate(perm)):
                return perm
