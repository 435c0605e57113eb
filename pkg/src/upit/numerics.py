"""Dense f64 tensors with reverse-mode differentiation.

The graph is recorded eagerly: every op on a :class:`Tensor` that needs a
gradient stores its parents and a closure mapping the output gradient to
parent gradients. :func:`backward` replays those closures in reverse
topological order.

Everything runs in float64. Non-finite results raise ``FloatingPointError``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
MASK_VALUE = -1e30


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError("non-finite value produced")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-d float64 array that can participate in a differentiable graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
        needs = any(p.requires_grad for p in parents)
        if needs:
            return Tensor(data, True, parents, backward_fn)
        return Tensor(data)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> Tensor:
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        a = self
        out = a.data**exponent
        return Tensor._make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other
        if a.ndim == 1:
            return (a.reshape(1, -1) @ b).reshape(np.matmul(a.data, b.data).shape)
        if b.ndim == 1:
            return (a @ b.reshape(-1, 1)).reshape(np.matmul(a.data, b.data).shape)

        def bw(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a.data @ b.data, (a, b), bw)

    # -- elementwise ----------------------------------------------------------

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        a = self
        if (a.data <= 0).any():
            raise FloatingPointError("log of non-positive value")
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sigmoid(self) -> Tensor:
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def silu(self) -> Tensor:
        a = self
        s = _sigmoid(a.data)
        return Tensor._make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))

    def log_sigmoid(self) -> Tensor:
        a = self
        # log sigma(x) = -softplus(-x)
        out = -np.logaddexp(0.0, -a.data)
        return Tensor._make(out, (a,), lambda g: (g * _sigmoid(-a.data),))

    # -- reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def __getitem__(self, idx) -> Tensor:
        a = self

        basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def bw(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(a.data[idx], (a,), bw)

    # -- normalized exponentials ---------------------------------------------

    def softmax(self, axis: int = -1) -> Tensor:
        out = _softmax(self.data, axis)

        def bw(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (self,), bw)

    def log_softmax(self, axis: int = -1) -> Tensor:
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse

        def bw(g):
            return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(out, (self,), bw)


class Parameter(Tensor):
    """A named leaf tensor that receives a gradient from :func:`backward`."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        if not name:
            raise ValueError("parameter name must be non-empty")
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Differentiable free functions
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` for weight stored as ``[d_out, d_in]``."""
    x = as_tensor(x)
    d_in = weight.shape[1]
    out = x.data @ weight.data.T

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, d_in)
        return g @ weight.data, gw

    return Tensor._make(out, (x, weight), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), bw)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is True by a constant (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)
    return Tensor._make(out, (x,), lambda g: (np.where(mask, 0.0, g),))


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    idx = index[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return Tensor._make(out, (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), bw)


def backward(loss: Tensor, params: Iterable[Parameter] = ()) -> dict[str, np.ndarray]:
    """Fill ``.grad`` of every reachable leaf with d(loss)/d(leaf).

    Parameters listed in ``params`` that the loss does not reach get a zero
    gradient. Returns ``{name: grad}`` for the listed parameters.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.data)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {p.name: p.grad for p in params}


def finite_difference_grad(f: Callable[[Parameter], object], p: Parameter, eps: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f / d p, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = p.data.reshape(-1)
    out = np.zeros(flat.size, dtype=DTYPE)

    def call() -> float:
        v = f(p)
        v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=DTYPE)
        if v.size != 1:
            raise ValueError("f must return a scalar")
        return float(v.reshape(()))

    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = call()
        flat[j] = orig - eps
        lo = call()
        flat[j] = orig
        out[j] = (hi - lo) / (2.0 * eps)
    return out.reshape(p.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` in the 2-norm."""
    num = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


# ---------------------------------------------------------------------------
# Plain numeric helpers
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-logaddexp(0, -x)) is stable on both tails
    return np.exp(-np.logaddexp(0.0, -x))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _vector(v, what: str = "input") -> np.ndarray:
    arr = np.asarray(v, dtype=DTYPE)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{what} must be a non-empty vector")
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{what} contains non-finite values")
    return arr


def softmax(v) -> np.ndarray:
    return _softmax(_vector(v))


def log_softmax(v) -> np.ndarray:
    x = _vector(v)
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def categorical_ce_with_logits(logits, target: int) -> float:
    x = _vector(logits, "logits")
    if not 0 <= int(target) < x.size:
        raise IndexError(f"target {target} out of range for {x.size} classes")
    return float(-log_softmax(x)[int(target)])


def binary_ce_with_logit(logit: float, target: float) -> float:
    if target not in (0, 1):
        raise ValueError("target must be 0 or 1")
    x = float(logit)
    if not np.isfinite(x):
        raise FloatingPointError("non-finite logit")
    # -log sigma(x) = softplus(-x); -log(1 - sigma(x)) = softplus(x)
    return float(np.logaddexp(0.0, -x) if target == 1 else np.logaddexp(0.0, x))


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

PRNG_ALGORITHM = "philox4x64-10"


@dataclass(frozen=True)
class RngState:
    """A seed for numpy's Philox counter-based generator.

    ``derive`` splits off an independent child stream keyed by a label, so
    every stochastic step gets its own reproducible stream.
    """

    seed: int
    algorithm: str = PRNG_ALGORITHM

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.algorithm != PRNG_ALGORITHM:
            raise ValueError(f"unsupported PRNG algorithm {self.algorithm!r}")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(self.seed))))

    def derive(self, *labels) -> RngState:
        digest = hashlib.sha256("/".join(str(x) for x in labels).encode()).digest()
        words = [int(self.seed) & 0xFFFFFFFF, int(self.seed) >> 32]
        words += [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
        child = np.random.SeedSequence(words).generate_state(1, np.uint64)[0]
        return RngState(int(child), self.algorithm)
