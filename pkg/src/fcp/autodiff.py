"""Small reverse-mode differentiation engine over float64 numpy arrays.

Only the primitives the prototype pipeline needs are provided. Every op
records a closure that maps the output gradient to its inputs; ``backward``
walks the graph in reverse topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DegenerateInputError(ValueError):
    """Input has no usable content (zero vector, empty mask, ...)."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # ndarray (op) Tensor dispatches to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- bookkeeping ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(x, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _make(out, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), bw)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = _wrap(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # split by sign so neither branch overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions --------------------------------------------------------------

def _expand_like(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)

    def bw(g):
        return (np.array(_expand_like(g, a.shape, axis, keepdims)),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def bw(g):
        return (np.array(_expand_like(g, a.shape, axis, keepdims)) / count,)

    return _make(out, (a,), bw)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient is shared evenly among tied maxima."""
    a = _wrap(a)
    out_keep = a.data.max(axis=axis, keepdims=True)
    out = out_keep if keepdims else (out_keep.reshape(()) if axis is None else np.squeeze(out_keep, axis))

    def bw(g):
        hit = a.data == out_keep
        count = hit.sum(axis=axis, keepdims=True)
        gk = g if keepdims or axis is None else np.expand_dims(g, axis)
        return (hit * (gk / count),)

    return _make(np.asarray(out), (a,), bw)


# -- shape -------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def getitem(a, index) -> Tensor:
    a = _wrap(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def scaled_softmax(logits, scale: float = 1.0, mask=None) -> Tensor:
    """Softmax over the last axis of ``logits / scale``.

    ``mask`` (broadcastable, values in {0, 1}) multiplies the exponentials so
    masked positions get exactly zero weight. Every row must keep at least one
    unmasked position.
    """
    if scale <= 0:
        raise ContractError("softmax scale must be positive")
    logits = _wrap(logits)
    z = logits.data / scale
    if mask is None:
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        m = np.broadcast_to(_as_array(mask), z.shape)
        if np.any(m.sum(axis=-1) <= 0):
            raise DegenerateInputError("masked softmax row has no unmasked position")
        zmax = np.where(m > 0, z, -np.inf).max(axis=-1, keepdims=True)
        e = m * np.exp(np.where(m > 0, z - zmax, 0.0))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * out / scale,)

    return _make(out, (logits,), bw)


def conv1x1(x, weight, bias) -> Tensor:
    """Per-pixel affine map of a (Cin, H, W) map with a (Cout, Cin) weight."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.ndim != 3:
        raise DimensionError(f"conv1x1 expects a (C, H, W) map, got {x.shape}")
    cin, h, w = x.shape
    if weight.ndim != 2 or weight.shape[1] != cin:
        raise DimensionError(f"weight {weight.shape} does not match {cin} input channels")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias {bias.shape} does not match {weight.shape[0]} output channels")
    flat = reshape(x, (cin, h * w))
    out = matmul(weight, flat) + reshape(bias, (-1, 1))
    return reshape(out, (weight.shape[0], h, w))


def l2_normalize_rows(a, eps: float = 0.0) -> Tensor:
    a = _wrap(a)
    norms = np.sqrt((a.data**2).sum(axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise DegenerateInputError("cannot normalize a zero vector")
    return a / sqrt(tsum(a * a, axis=-1, keepdims=True))


def cosine_sim(u, v) -> Tensor:
    u, v = _wrap(u), _wrap(v)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim shapes differ: {u.shape} vs {v.shape}")
    if not np.any(u.data) or not np.any(v.data):
        raise DegenerateInputError("cosine similarity of a zero vector")
    dot = tsum(u * v)
    return dot / (sqrt(tsum(u * u)) * sqrt(tsum(v * v)))


# -- graph traversal ---------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every differentiable ancestor of a scalar loss.

    Leaf gradients accumulate across calls until ``zero_grad``; interior
    nodes hold the gradient of the latest call only.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    worst: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} over {self.n_checked} coords (worst: {self.worst})"


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``samples_per_param`` limits the coordinates probed in each tensor.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    rng = rng or np.random.default_rng(0)
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst, worst_name, checked = 0.0, "", 0
    for idx, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if samples_per_param is not None and samples_per_param < flat.size:
            coords = rng.choice(flat.size, size=samples_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2 * h)
            a = ga.reshape(-1)[c]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if err > worst:
                worst = err
                worst_name = f"{p.name or f'param{idx}'}[{c}]"
    zero_grad(params)
    return GradCheckReport(max_rel_error=worst, passed=worst < tol, n_checked=checked, worst=worst_name)


# -- optimisation ------------------------------------------------------------

class Parameter(Tensor):
    """Trainable tensor carrying its own AdamW moment buffers."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
) -> None:
    """One AdamW update using each parameter's ``.grad`` (missing grad = 0)."""
    if lr < 0:
        raise ContractError("learning rate must be nonnegative")
    b1, b2 = betas
    if not (0 <= b1 < 1 and 0 <= b2 < 1):
        raise ContractError("betas must lie in [0, 1)")
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        p.step += 1
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.m = b1 * p.m + (1 - b1) * g
        p.v = b2 * p.v + (1 - b2) * g * g
        m_hat = p.m / (1 - b1**p.step)
        v_hat = p.v / (1 - b2**p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        return lr0
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))
