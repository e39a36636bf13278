"""Dense float64 tensors with reverse-mode gradients.

Every op returns a new :class:`Tensor` that remembers its parents and a
backward closure mapping the upstream gradient to one gradient per parent.
Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order.  The graph is dropped with the output tensor, so
each training step starts from a clean tape.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Param):
                node.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """Trainable leaf tensor with a persistent, accumulating gradient."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def _toposort(root: Tensor) -> list:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Detached copy: the result carries no gradient path."""
    return Tensor(as_tensor(x).data.copy())


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data, parents, backward) -> Tensor:
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward)
    return Tensor(data)


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    neg = x.data < 0
    em1 = np.expm1(np.where(neg, x.data, 0.0))
    out = np.where(neg, alpha * em1, x.data)
    slope = np.where(neg, alpha * (em1 + 1.0), 1.0)
    return _make(out, (x,), lambda g: (g * slope,))


# ----------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------------- shapes

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward)


def take(x, idx: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along one axis with an integer index array of any shape."""
    x = as_tensor(x)
    axis = axis % x.ndim
    idx = np.asarray(idx)

    def backward(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (out,)

    return _make(np.take(x.data, idx, axis=axis), (x,), backward)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, backward)


# ----------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; a may carry leading batch axes, b may not."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias, with weight stored (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# ----------------------------------------------------------------- normalisers / losses

def softmax_temp(v, tau: float = 1.0, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    s = tau * v.data
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (tau * p * (g - dot),)

    return _make(p, (v,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = x.data - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def rms_norm(h, gamma, beta, eps: float = 1e-5) -> Tensor:
    """gamma * h / sqrt(mean(h**2) + eps) + beta over the last axis.

    A zero row with eps == 0 maps to beta (0/0 is taken as 0).
    """
    h, gamma, beta = as_tensor(h), as_tensor(gamma), as_tensor(beta)
    if h.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise DimensionError(f"rms_norm shapes {h.shape}, {gamma.shape}, {beta.shape}")
    d = h.shape[-1]
    r = np.sqrt((h.data ** 2).mean(axis=-1, keepdims=True) + eps)
    safe = np.where(r > 0, r, 1.0)
    u = np.where(r > 0, h.data / safe, 0.0)
    out = gamma.data * u + beta.data

    def backward(g):
        gu = g * gamma.data
        gh = (gu - u * (gu * u).sum(axis=-1, keepdims=True) / d) / safe
        gh = np.where(r > 0, gh, 0.0)
        return gh, _unbroadcast(g * u, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (h, gamma, beta), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Batch-mean negative log-likelihood via fused log-sum-exp."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= K))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {K})")
    lp = log_softmax(logits)
    return mul(sum(getitem(lp, (np.arange(B), labels))), -1.0 / B)


def binary_cross_entropy(p, target, eps: float = 1e-12) -> Tensor:
    """Mean BCE between probabilities p and fixed soft targets."""
    p = as_tensor(p)
    t = np.broadcast_to(np.asarray(target, dtype=DTYPE), p.shape)
    pc = np.clip(p.data, eps, 1.0 - eps)
    out = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean()

    def backward(g):
        return (g * (pc - t) / (pc * (1.0 - pc)) / p.data.size,)

    return _make(out, (p,), backward)


# ----------------------------------------------------------------- convolution

def temporal_conv(x, kernels, depthwise: bool = False) -> Tensor:
    """Same-padded cross-correlation along the last (time) axis.

    x: (B, C, T), kernels: (F, k) with k odd.
    depthwise=False -> (B, F, C, T), every filter applied to every channel.
    depthwise=True  -> requires C == F; filter f applied to channel f only.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    F, k = kernels.shape
    B, C, T = x.shape
    if k % 2 == 0:
        raise DimensionError(f"kernel length must be odd, got {k}")
    if depthwise and C != F:
        raise DimensionError(f"depthwise conv needs C == F, got C={C}, F={F}")
    half = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (half, half)))
    win = sliding_window_view(xp, k, axis=-1)  # (B, C, T, k)
    K = kernels.data
    if depthwise:
        out = np.einsum("bftj,fj->bft", win, K, optimize=True)
    else:
        out = np.einsum("bctj,fj->bfct", win, K, optimize=True)

    def backward(g):
        if depthwise:
            gK = np.einsum("bft,bftj->fj", g, win, optimize=True)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + T] += g * K[:, j][None, :, None]
        else:
            gK = np.einsum("bfct,bctj->fj", g, win, optimize=True)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + T] += np.einsum("bfct,f->bct", g, K[:, j], optimize=True)
        return gxp[..., half:half + T], gK

    return _make(out, (x, kernels), backward)


def mean_pool(x, stride: int) -> Tensor:
    """Non-overlapping mean pooling on the last axis; the remainder is dropped."""
    x = as_tensor(x)
    T = x.shape[-1]
    n = T // stride
    if n < 1:
        raise DimensionError(f"pool stride {stride} exceeds length {T}")
    trimmed = x.data[..., :n * stride]
    out = trimmed.reshape(*x.shape[:-1], n, stride).mean(axis=-1)

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., :n * stride] = np.repeat(g / stride, stride, axis=-1)
        return (full,)

    return _make(out, (x,), backward)


# ----------------------------------------------------------------- recurrent

def gru_sequence(xs, h0, Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh) -> Tensor:
    """Gated recurrence over xs (B, n, d) starting from h0 (B, d_h).

    Weights are stored (d_h, d) / (d_h, d_h) and applied as W @ x.  The whole
    unrolled sequence is one graph node with a hand-written
    backpropagation-through-time closure; returns the final state h_n.
    """
    xs, h0 = as_tensor(xs), as_tensor(h0)
    ws = [as_tensor(w) for w in (Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh)]
    Wz_, Wr_, Wh_, Uz_, Ur_, Uh_, bz_, br_, bh_ = (w.data for w in ws)
    B, n, d = xs.shape
    X = xs.data
    # input projections for all steps at once
    Az = X @ Wz_.T + bz_
    Ar = X @ Wr_.T + br_
    Ah = X @ Wh_.T + bh_
    hs = [h0.data]
    zs, rs, cs = [], [], []
    h = h0.data
    for t in range(n):
        z = _stable_sigmoid(Az[:, t] + h @ Uz_.T)
        r = _stable_sigmoid(Ar[:, t] + h @ Ur_.T)
        c = np.tanh(Ah[:, t] + (r * h) @ Uh_.T)
        h = (1.0 - z) * h + z * c
        zs.append(z)
        rs.append(r)
        cs.append(c)
        hs.append(h)

    def backward(g):
        gX = np.zeros_like(X)
        gWz, gWr, gWh = (np.zeros_like(w) for w in (Wz_, Wr_, Wh_))
        gUz, gUr, gUh = (np.zeros_like(w) for w in (Uz_, Ur_, Uh_))
        gbz, gbr, gbh = (np.zeros_like(w) for w in (bz_, br_, bh_))
        dh = g
        for t in range(n - 1, -1, -1):
            hp, z, r, c = hs[t], zs[t], rs[t], cs[t]
            x = X[:, t]
            dz = dh * (c - hp)
            dc = dh * z
            dhp = dh * (1.0 - z)
            dah = dc * (1.0 - c * c)
            rh = r * hp
            gWh += dah.T @ x
            gUh += dah.T @ rh
            gbh += dah.sum(axis=0)
            drh = dah @ Uh_
            dr = drh * hp
            dhp += drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            gWz += daz.T @ x
            gWr += dar.T @ x
            gUz += daz.T @ hp
            gUr += dar.T @ hp
            gbz += daz.sum(axis=0)
            gbr += dar.sum(axis=0)
            dhp += daz @ Uz_ + dar @ Ur_
            gX[:, t] = daz @ Wz_ + dar @ Wr_ + dah @ Wh_
            dh = dhp
        return (gX, dh, gWz, gWr, gWh, gUz, gUr, gUh,
                _unbroadcast(gbz, bz_.shape), _unbroadcast(gbr, br_.shape),
                _unbroadcast(gbh, bh_.shape))

    return _make(h, (xs, h0, *ws), backward)


# ----------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tol: float = 1e-4
    abs_floor: float = 1e-6

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    def __str__(self):
        lines = [f"{name:<28s} max rel err {err:.3e}  {'ok' if err <= self.tol else 'FAIL'}"
                 for name, err in self.max_rel_error.items()]
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params: Sequence[Param], h: float = 1e-5,
               tol: float = 1e-4, abs_floor: float = 1e-6, stencil: int = 3) -> GradCheckReport:
    """Compare analytic gradients of scalar f() against central differences.

    The error for one coordinate is |a - n| / max(|a|, |n|, abs_floor), so
    coordinates whose gradients are both below the floor count as matching.
    stencil=5 uses the fourth-order five-point central difference, which
    tolerates a larger h and so keeps float round-off out of tiny gradients.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if stencil not in (3, 5):
        raise ValueError(f"stencil must be 3 or 5, got {stencil}")
    first = f().item()
    if f().item() != first:
        raise DeterminismError("two forward passes disagree; function is not deterministic")
    for p in params:
        p.zero_grad()
    f().backward()
    report = GradCheckReport(tol=tol, abs_floor=abs_floor)
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]

            def at(step):
                flat[i] = orig + step
                return f().item()

            if stencil == 3:
                num = (at(h) - at(-h)) / (2.0 * h)
            else:
                num = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0 * h)
            flat[i] = orig
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), abs_floor)
            worst = max(worst, err)
        report.max_rel_error[p.name] = worst
    return report
