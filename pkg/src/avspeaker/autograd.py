"""Tape-based reverse-mode autodiff over float64 numpy arrays, plus Adam and
the warmup/linear-decay learning-rate schedule used by every training loop.

Only the handful of operations the encoder and heads need are provided.
Each op records a closure that maps the output gradient to its inputs'
gradients; ``backward`` replays those closures in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor",
    "parameter",
    "matmul",
    "softmax",
    "softmax_rows",
    "log_softmax",
    "layer_norm",
    "relu",
    "concat",
    "std",
    "cross_entropy",
    "backward",
    "AdamState",
    "adam_step",
    "LrSchedule",
    "lr_at",
]


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in data, a loss, or a gradient."""


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _op(cls, data, parents, backward_fn):
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return self.transpose()

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accum(self, g, fresh=False):
        # fresh=True: caller hands over a newly allocated array nobody else holds
        if self.grad is None:
            self.grad = g if fresh else np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # --- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._op(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bw(g):
            a._accum(-g)

        return Tensor._op(-a.data, (a,), bw)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape), fresh=True)
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape), fresh=True)

        return Tensor._op(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    # --- shape manipulation -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def bw(g):
            a._accum(g.reshape(a.shape))

        return Tensor._op(a.data.reshape(shape), (a,), bw)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        a = self

        def bw(g):
            a._accum(g.transpose(inv))

        return Tensor._op(a.data.transpose(axes), (a,), bw)

    def __getitem__(self, idx):
        a = self
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

        def bw(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            a._accum(full, fresh=True)

        return Tensor._op(a.data[idx], (a,), bw)

    # --- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor._op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False, name=None):
    """Build a leaf tensor, rejecting NaN/Inf input."""
    t = Tensor(data, requires_grad=requires_grad, name=name)
    _check_finite(t.data, name or "tensor")
    return t


def parameter(data, name=None):
    return tensor(data, requires_grad=True, name=name)


def matmul(a, b):
    """Matrix product; supports batched ``(..., M, K) @ (K, N)`` and
    equal-rank batched products."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                a._accum((g2 @ b.data.T).reshape(a.shape), fresh=True)
            if b.requires_grad:
                b._accum(a2.T @ g2, fresh=True)

        return Tensor._op((a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b), bw)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), fresh=True)
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), fresh=True)

    return Tensor._op(a.data @ b.data, (a, b), bw)


def relu(x):
    mask = x.data > 0

    def bw(g):
        x._accum(g * mask, fresh=True)

    return Tensor._op(x.data * mask, (x,), bw)


def softmax(x, axis=-1):
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        x._accum(gy, fresh=True)

    return Tensor._op(y, (x,), bw)


def softmax_rows(x):
    """Row-wise softmax of a matrix, stabilised by max subtraction."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError("softmax_rows expects a matrix")
    return softmax(x, axis=-1)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        p = np.exp(y)
        x._accum(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._op(y, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accum(
                inv
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                ),
                fresh=True,
            )

    return Tensor._op(xhat * gain.data + bias.data, (x, gain, bias), bw)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def std(x, axis):
    """Population standard deviation along ``axis``.

    The gradient at a zero-variance slice is defined as zero, so constant
    inputs give an exactly-zero output with a finite gradient.
    """
    n = x.shape[axis]
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    s = np.sqrt((xc * xc).mean(axis=axis, keepdims=True))

    def bw(g):
        safe = np.where(s > 0, s, 1.0)
        coef = np.where(s > 0, 1.0 / (n * safe), 0.0)
        x._accum(np.expand_dims(g, axis) * xc * coef)

    return Tensor._op(np.squeeze(s, axis=axis), (x,), bw)


def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood over the rows selected by ``mask``.

    ``logits`` has shape ``(..., K)``; ``targets`` and ``mask`` match the
    leading dimensions. Unmasked rows contribute neither loss nor gradient.
    """
    logits = _as_tensor(logits)
    k = logits.shape[-1]
    flat = logits.data.reshape(-1, k)
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise ValueError("targets do not match logits rows")
    if mask is None:
        mask = np.ones(flat.shape[0], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.shape[0] != flat.shape[0]:
            raise ValueError("mask does not match logits rows")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy needs at least one masked position")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"targets must lie in [0, {k})")

    rows = np.flatnonzero(mask)
    sel = flat[rows]
    z = sel - sel.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(count), targets[rows]]
    loss = nll.sum() / count

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(count), targets[rows]] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = p * (g / count)
        logits._accum(full.reshape(logits.shape))

    return Tensor._op(np.asarray(loss), (logits,), bw)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss):
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Leaf gradients accumulate; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    _check_finite(loss.data, "loss")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --- optimisation -----------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One in-place bias-corrected Adam update.

    ``params`` maps names to tensors and ``grads`` maps the same names to
    arrays. Raises :class:`NonFiniteError` if a gradient or an updated
    parameter is not finite.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        _check_finite(g, f"gradient of {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        _check_finite(p.data, f"parameter {name}")


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``peak_lr`` over ``warmup_fraction`` of training,
    then linear decay to zero at ``total_steps``."""

    total_steps: int
    peak_lr: float = 1e-3
    warmup_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def __call__(self, step):
        return lr_at(self, step)


def lr_at(schedule, step):
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    warm = schedule.warmup_fraction * schedule.total_steps
    if step <= warm:
        return schedule.peak_lr * step / warm
    return schedule.peak_lr * (schedule.total_steps - step) / (schedule.total_steps - warm)
