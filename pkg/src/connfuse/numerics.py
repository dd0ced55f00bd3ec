"""Dense reverse-mode autodiff on numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when it depends on a tensor with
``requires_grad=True``, a closure that pushes its output gradient back to its
parents. ``Tensor.backward`` topologically sorts the graph and runs the
closures in reverse order.

All ops broadcast over leading (batch) axes the way numpy does; gradients are
summed back onto the parent's shape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# Sign masks captured from piecewise-linear ops (relu, abs) while recording.
# grad_check uses them to spot probes that straddle a kink.
_kink_log: list | None = None


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_kink(mask: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(mask)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_kink(mask)
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    _log_kink(sign > 0)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return _make(out, (x,), lambda g: (g * _sigmoid(x.data),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without forming sigmoid(x); finite for any finite x."""
    out = -np.logaddexp(0.0, -x.data)
    return _make(out, (x,), lambda g: (g * _sigmoid(-x.data),))


# ---------------------------------------------------------------- reductions / shape

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def l1_mean(x: Tensor) -> Tensor:
    """Mean absolute value over all entries."""
    return mean(absolute(x))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def take_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``x[..., rows, cols]`` into a trailing vector axis."""

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, (Ellipsis, rows, cols), g)
        return (full,)

    return _make(x.data[..., rows, cols], (x,), backward)


def scatter_symmetric(v: Tensor, n: int, rows: np.ndarray, cols: np.ndarray,
                      diag_value: float) -> Tensor:
    """Place a strict upper-triangle vector into a symmetric n×n matrix with a constant diagonal."""
    out = np.zeros(v.shape[:-1] + (n, n), dtype=v.data.dtype)
    out[..., rows, cols] = v.data
    out[..., cols, rows] = v.data
    idx = np.arange(n)
    out[..., idx, idx] = diag_value
    return _make(out, (v,), lambda g: (g[..., rows, cols] + g[..., cols, rows],))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax_rows received non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (..., K) against integer targets (...)."""
    target = np.asarray(target, dtype=np.int64)
    if logits.shape[:-1] != target.shape:
        raise ShapeError(f"targets {target.shape} do not match logits {logits.shape}")
    logp = log_softmax_rows(logits)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    return mul(sum_(mul(logp, onehot)), -1.0 / max(1, target.size))


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, mode: str = "valid") -> Tensor:
    """Per-row cross-correlation along the last axis with a single 1-D kernel.

    ``same`` zero-pads (k-1)//2 on the left and the rest on the right so the
    output keeps the input width.
    """
    if kernel.ndim != 1:
        raise ShapeError(f"kernel must be 1-D, got {kernel.shape}")
    k = kernel.shape[0]
    length = x.shape[-1]
    if mode == "same":
        left = (k - 1) // 2
        pad = [(0, 0)] * (x.ndim - 1) + [(left, k - 1 - left)]
        xp = np.pad(x.data, pad)
    elif mode == "valid":
        if length < k:
            raise ShapeError(f"valid convolution needs width >= {k}, got {length}")
        left = 0
        xp = x.data
    else:
        raise ValueError(f"unknown convolution mode {mode!r}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)
    out = windows @ kernel.data
    out_len = out.shape[-1]
    if bias is not None:
        out = out + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gk = windows.reshape(-1, k).T @ g.reshape(-1) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j in range(k):
                gxp[..., j:j + out_len] += g * kernel.data[j]
            gx = gxp[..., left:left + length]
        grads = [gx, gk]
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _make(out, parents, backward)


# ---------------------------------------------------------------- parameters / optimizer

class ParamStore:
    """Named leaf tensors plus their Adam moments and a shared step counter."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.params if k.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.params.items():
            out[f"{prefix}param/{name}"] = t.data
            out[f"{prefix}m/{name}"] = self.m[name]
            out[f"{prefix}v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        for name, t in self.params.items():
            key = f"{prefix}param/{name}"
            if key not in arrays:
                raise KeyError(f"missing tensor {key!r}")
            if arrays[key].shape != t.shape:
                raise ShapeError(f"{key}: stored shape {arrays[key].shape} != {t.shape}")
            t.data = np.array(arrays[key], dtype=self.dtype)
            self.m[name] = np.array(arrays.get(f"{prefix}m/{name}", np.zeros_like(t.data)))
            self.v[name] = np.array(arrays.get(f"{prefix}v/{name}", np.zeros_like(t.data)))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}


def adam_step(store: ParamStore, lr: float = 1e-3, weight_decay: float = 0.01,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> ParamStore:
    """One Adam update with bias correction and decoupled weight decay; clears gradients."""
    missing = [k for k, t in store.params.items() if t.grad is None]
    if missing:
        raise ValueError(f"no gradient for parameter(s): {', '.join(missing)}")
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    step_size = lr / c1
    inv_c2 = 1.0 / c2
    decay = 1.0 - lr * weight_decay
    for name, t in store.params.items():
        g = t.grad
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v * inv_c2) + eps
        w = t.data if t.data.flags.writeable and t.data.base is None else t.data.copy()
        if weight_decay:
            w *= decay
        w -= step_size * (m / denom)
        t.data = w
        t.grad = None
    return store


# ---------------------------------------------------------------- gradient checking

def _kink_signature(forward: Callable[[], Tensor]) -> tuple[float, list]:
    with record_kinks() as log_:
        value = forward()
    return float(np.asarray(value.data).sum()), log_


def _same_kinks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(forward: Callable[[], Tensor], store: ParamStore, n_probes: int = 100,
               h: float = 1e-5, rng: np.random.Generator | int | None = 0,
               max_redraws: int = 20) -> float:
    """Max relative error between backprop and central differences.

    ``n_probes`` coordinates are drawn uniformly over all parameter entries.
    A probe whose ±h evaluation flips a relu/abs sign pattern is redrawn
    (finite differences are meaningless across a kink).
    """
    rng = np.random.default_rng(rng)
    store.zero_grad()
    with record_kinks() as base_kinks:
        out = forward()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NonFiniteError(f"forward must return a finite scalar, got {out.data!r}")
    out.backward()
    names = list(store.params)
    analytic = {k: (store[k].grad if store[k].grad is not None else np.zeros(store[k].shape))
                for k in names}
    store.zero_grad()
    sizes = np.array([store[k].data.size for k in names], dtype=float)
    probs = sizes / sizes.sum()

    worst = 0.0
    for _ in range(n_probes):
        for _attempt in range(max_redraws + 1):
            name = names[rng.choice(len(names), p=probs)]
            t = store[name]
            flat = int(rng.integers(t.data.size))
            idx = np.unravel_index(flat, t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp, kp = _kink_signature(forward)
            t.data[idx] = orig - h
            fm, km = _kink_signature(forward)
            t.data[idx] = orig
            if _same_kinks(kp, base_kinks) and _same_kinks(km, base_kinks):
                break
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"forward became non-finite while probing {name}{idx}")
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic[name][idx])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, rel)
    return worst


def parameters_with_zero_grad(store: ParamStore, names: Iterable[str] | None = None) -> list[str]:
    names = store.params if names is None else names
    return [k for k in names if store[k].grad is None or not np.any(store[k].grad)]
