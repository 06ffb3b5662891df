"""Dense tensors with reverse-mode gradients, plus Adam.

Every differentiable operation records a closure on its output; ``backward``
walks the recorded graph in reverse topological order and then drops it, so
each forward pass owns its tape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _dtype


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a gradient tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"empty dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    live = tuple(p for p in parents if p.requires_grad) if _grad_enabled else ()
    out.requires_grad = bool(live)
    if live:
        out._parents = live
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

    return _result(out_data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out_data)

    return _result(out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g / x.data)

    return _result(np.log(x.data), (x,), backward)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    active = x.data > 0

    def backward(g):
        x._accumulate(g * active)

    return _result(np.where(active, x.data, 0).astype(x.dtype), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out_data = _stable_sigmoid(x.data)

    def backward(g):
        x._accumulate(g * out_data * (1 - out_data))

    return _result(out_data, (x,), backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without forming sigmoid(x) for large |x|."""
    z = x.data
    out_data = np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        x._accumulate(g * _stable_sigmoid(-z))

    return _result(out_data.astype(x.dtype), (x,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact error-function CDF."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        x._accumulate(g * (cdf + z * pdf))

    return _result((z * cdf).astype(x.dtype), (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.dtype))


# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(out_data, (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(count))


def max_(x: Tensor, axis: int = -1) -> Tensor:
    """Max along one axis; the gradient goes to the first maximising entry."""
    idx = np.argmax(x.data, axis=axis)
    out_data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        x._accumulate(full)

    return _result(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), backward)


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing (basic or fancy); gradients scatter-add back."""
    out_data = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _result(np.array(out_data), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: left operand {a.shape} and right operand {b.shape} disagree")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


# layers


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias over the last axis of x."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"affine: input {x.shape} has width {x.shape[-1]}, weight {weight.shape} expects {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out_data = (x2 @ weight.data + bias.data).reshape(*lead, weight.shape[1])

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return _result(out_data, (x, weight, bias), backward)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (broadcastable boolean, True = keep) removes entries before
    normalisation. A slice with nothing kept comes back as all zeros.
    """
    z = x.data
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite input")
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
        shift = np.max(z, axis=axis, keepdims=True)
        shift = np.where(np.isfinite(shift), shift, 0)
        e = np.where(mask, np.exp(z - shift), 0)
    else:
        e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    total = e.sum(axis=axis, keepdims=True)
    out_data = (e / np.where(total > 0, total, 1)).astype(x.dtype)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return _result(out_data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = (xhat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(gx)

    return _result(out_data, (x, gamma, beta), backward)


def cross_entropy_from_logits(logits: Tensor, target, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``target`` classes under softmax(logits).

    With ``weights`` the rows are combined as sum(w_i * nll_i) instead of the
    plain mean.
    """
    target = np.asarray(target, dtype=np.int64)
    n, k = logits.shape
    if target.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows of logits but {target.shape} targets")
    if np.any(target < 0) or np.any(target >= k):
        raise IndexError(f"cross_entropy: target outside [0, {k})")
    z = logits.data
    shift = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - shift).sum(axis=1, keepdims=True)) + shift
    logp = z - lse
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.arange(n)
    out_data = np.asarray(-(w * logp[rows, target]).sum(), dtype=logits.dtype)

    def backward(g):
        probs = np.exp(logp)
        probs[rows, target] -= 1.0
        logits._accumulate((g * w[:, None] * probs).astype(logits.dtype))

    return _result(out_data, (logits,), backward)


def binary_cross_entropy_with_logits(logit: Tensor, y) -> Tensor:
    """Mean of -[y log s + (1-y) log(1-s)] with s = sigmoid(logit)."""
    y = np.asarray(y, dtype=logit.dtype)
    z = logit.data
    # log(1 + exp(-|z|)) form keeps both branches finite
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray(per.mean(), dtype=logit.dtype)
    scale = 1.0 / per.size

    def backward(g):
        logit._accumulate(g * scale * (_stable_sigmoid(z) - y))

    return _result(out_data, (logit,), backward)


# gradient tape


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, store: "ParameterStore | None" = None) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar loss.

    Returns a gradient table for ``store`` (zeros for parameters the loss never
    touched) and clears the parameters' ``grad`` slots; without a store the
    gradients stay on the leaf tensors. The recorded graph is released.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if store is not None:
        for p in store.values():
            p.grad = None
    if loss.requires_grad:
        order = _topological_order(loss)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._backward is not None:
                node.grad = None
            node._parents = ()
            node._backward = None
    if store is None:
        return {}
    table = {}
    for name, p in store.items():
        table[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return table


# parameters and optimisation


class ParameterStore:
    """Named trainable tensors plus Adam state."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self._entries: dict[str, Tensor] = {}
        self.step_count = 0
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value, dtype=None) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=dtype or _dtype), requires_grad=True)
        self._entries[name] = t
        self.first_moment[name] = np.zeros_like(t.data)
        self.second_moment[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._entries.values())

    def astype(self, dtype) -> "ParameterStore":
        """Copy with every parameter and moment cast to ``dtype``."""
        out = ParameterStore()
        for name, p in self._entries.items():
            out._entries[name] = Tensor(p.data.astype(dtype), requires_grad=True, dtype=dtype)
            out.first_moment[name] = self.first_moment[name].astype(dtype)
            out.second_moment[name] = self.second_moment[name].astype(dtype)
        out.step_count = self.step_count
        return out

    def copy(self) -> "ParameterStore":
        return self.astype(next(iter(self._entries.values())).dtype) if self._entries else ParameterStore()

    def reset_optimizer(self) -> None:
        self.step_count = 0
        for name, p in self._entries.items():
            self.first_moment[name] = np.zeros_like(p.data)
            self.second_moment[name] = np.zeros_like(p.data)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._entries.items()}


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if g.shape != store[name].shape:
            raise DimensionError(f"adam_step: gradient {g.shape} does not match parameter {name!r} {store[name].shape}")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = store.first_moment[name]
        v = store.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return store


def grad_check(loss_fn: Callable[[ParameterStore], Tensor], store: ParameterStore, h: float = 1e-4,
               coords_per_param: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-6, stencil: int = 3) -> float:
    """Max relative error between backward() and central differences.

    Runs in float64 on a copy of ``store``. ``coords_per_param`` limits the
    check to a random subset of coordinates per tensor (None = every one).
    The relative error of a coordinate is |a - n| / max(|a|, |n|, floor).
    ``stencil`` picks the 3-point (error O(h^2)) or 5-point (O(h^4)) central
    formula; the latter helps where layer norm sees tiny-variance rows.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    rng = rng or np.random.default_rng(0)
    offsets, coeffs = ((1, -1), (0.5, -0.5)) if stencil == 3 else ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12))
    with precision(np.float64):
        params = store.astype(np.float64)
        analytic = backward(loss_fn(params), params)
        worst = 0.0
        for name, p in params.items():
            flat = p.data.reshape(-1)
            coords: Iterable[int] = range(flat.size)
            if coords_per_param is not None and flat.size > coords_per_param:
                coords = rng.choice(flat.size, size=coords_per_param, replace=False)
            ga = analytic[name].reshape(-1)
            for i in coords:
                orig = flat[i]
                numeric = 0.0
                with no_grad():
                    for k, c in zip(offsets, coeffs):
                        flat[i] = orig + k * h
                        numeric += c * loss_fn(params).item()
                flat[i] = orig
                numeric /= h
                denom = max(abs(ga[i]), abs(numeric), floor)
                worst = max(worst, abs(ga[i] - numeric) / denom)
    return float(worst)
