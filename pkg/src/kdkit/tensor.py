"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Every primitive records its inputs and a backward
closure on the output node; ``backward()`` replays the recorded graph in
reverse topological order. All forward outputs are checked for NaN/Inf and a
``NumericalError`` is raised instead of propagating silently.

Default storage is float64; float32 is supported as a fast mode (gradient
checks are only meaningful in float64).
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64


class NumericalError(RuntimeError):
    """A forward primitive produced a NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class TapeError(RuntimeError):
    """The recorded graph was already consumed by a backward pass."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the context (e.g. frozen-teacher passes)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: non-finite values in forward output")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Wrap a forward result, recording the edge when gradients are live."""
    _check_finite(data, op)
    need = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    if need:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into every requires_grad tensor."""
    if loss.data.size != 1:
        raise ShapeError("backward: loss must be a scalar tensor")
    if loss._consumed:
        raise TapeError("backward: tape already consumed for this loss")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any requires_grad tensor")

    # iterative topological sort
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _node(out, (a, b), bw, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bw(g):
        return (g * mask,)

    return _node(out, (x,), bw, "relu")


def tsum(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum())

    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _node(out, (x,), bw, "sum")


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    out = np.asarray(x.data.mean())

    def bw(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _node(out, (x,), bw, "mean")


def square(x) -> Tensor:
    return mul(x, x)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Unit-normalize along ``axis``; exact zero-norm slices map to zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    out = np.where(nonzero, x.data / safe, 0.0)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(nonzero, (g - out * dot) / safe, 0.0)
        return (gx,)

    return _node(out, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# linear / convolution primitives


def linear_map_1x1(x, W, b=None) -> Tensor:
    """Per-pixel linear transform: out[..., k] = sum_j W[k, j] x[..., j] + b[k]."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim < 1 or W.data.ndim != 2:
        raise ShapeError("linear_map_1x1: x must be (..., d), W must be (K, d)")
    d = x.shape[-1]
    K, dw = W.shape
    if dw != d:
        raise ShapeError(f"linear_map_1x1: inner dims disagree (x has {d}, W has {dw})")
    out = x.data @ W.data.T
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (K,):
            raise ShapeError(f"linear_map_1x1: bias must have shape ({K},)")
        out = out + b.data
        parents.append(b)
    xd, Wd = x.data, W.data

    def bw(g):
        gx = g @ Wd
        gflat = g.reshape(-1, K)
        gW = gflat.T @ xd.reshape(-1, d)
        if b is not None:
            return gx, gW, gflat.sum(axis=0)
        return gx, gW

    return _node(out, tuple(parents), bw, "linear_map_1x1")


def conv3x3(x, W, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation over an NHWC (or HWC) map; W is (K, d, 3, 3)."""
    x, W = as_tensor(x), as_tensor(W)
    if stride not in (1, 2):
        raise ShapeError("conv3x3: stride must be 1 or 2")
    if pad not in (0, 1):
        raise ShapeError("conv3x3: pad must be 0 or 1")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError("conv3x3: input must be (N, h, w, d) or (h, w, d)")
    N, h, w, d = xd.shape
    if W.data.ndim != 4 or W.shape[1:] != (d, 3, 3):
        raise ShapeError(f"conv3x3: kernel must be (K, {d}, 3, 3), got {W.shape}")
    K = W.shape[0]
    oh = (h + 2 * pad - 3) // stride + 1
    ow = (w + 2 * pad - 3) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv3x3: output extent < 1")

    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
    # windows: (N, oh, ow, d, 3, 3)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win).reshape(N * oh * ow, d * 9)
    Wmat = W.data.reshape(K, d * 9)
    out = (cols @ Wmat.T).reshape(N, oh, ow, K)
    ph, pw = xp.shape[1], xp.shape[2]

    def bw(g):
        gflat = g.reshape(N * oh * ow, K)
        gW = (gflat.T @ cols).reshape(K, d, 3, 3)
        gcols = (gflat @ Wmat).reshape(N, oh, ow, d, 3, 3)
        gxp = np.zeros((N, ph, pw, d), dtype=g.dtype)
        for ki in range(3):
            for kj in range(3):
                gxp[:, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride, :] += (
                    gcols[:, :, :, :, ki, kj]
                )
        gx = gxp[:, pad:ph - pad, pad:pw - pad, :] if pad else gxp
        if squeeze:
            gx = gx[0]
        return gx, gW

    return _node(out[0] if squeeze else out, (x, W), bw, "conv3x3")


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Learnable scale/bias plus running statistics for one channel axis."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=DEFAULT_DTYPE):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.initialized = False
        self.eps = eps
        self.momentum = momentum
        self.channels = channels


def batch_norm(x, state: BatchNormState, mode: str = "train") -> Tensor:
    """Whiten per channel (last axis) with learnable scale and bias.

    Train mode uses batch statistics and updates the running stats by
    exponential moving average; eval mode uses the running stats.
    """
    x = as_tensor(x)
    if x.shape[-1] != state.channels:
        raise ShapeError(f"batch_norm: expected {state.channels} channels, got {x.shape[-1]}")
    axes = tuple(range(x.data.ndim - 1))
    gamma, beta = state.gamma, state.beta

    if mode == "train":
        m = int(np.prod([x.shape[i] for i in axes])) if axes else 1
        if m < 2:
            raise ShapeError("batch_norm: train mode needs >= 2 samples per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if not state.initialized:
            state.running_mean = mean.astype(np.float64).copy()
            state.running_var = var.astype(np.float64).copy()
            state.initialized = True
        else:
            mom = state.momentum
            state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
            state.running_var = (1.0 - mom) * state.running_var + mom * var
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean) * invstd
        out = gamma.data * xhat + beta.data

        def bw(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gmean = g.mean(axis=axes)
            gxhat_mean = (g * xhat).mean(axis=axes)
            gx = gamma.data * invstd * (g - gmean - xhat * gxhat_mean)
            return gx.astype(x.dtype), gg, gb

        return _node(out.astype(x.dtype), (x, gamma, beta), bw, "batch_norm")

    if mode == "eval":
        if not state.initialized:
            raise RuntimeError("batch_norm: eval before any train step (running stats uninitialized)")
        invstd = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * invstd
        out = gamma.data * xhat + beta.data

        def bw(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = gamma.data * invstd * g
            return gx.astype(x.dtype), gg, gb

        return _node(out.astype(x.dtype), (x, gamma, beta), bw, "batch_norm")

    raise ValueError(f"batch_norm: unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# softmax-family primitives and losses


def channel_softmax(x, temperature: float = 1.0) -> Tensor:
    """Per-pixel softmax over the last axis: exp(t*x_k) / sum exp(t*x_k')."""
    x = as_tensor(x)
    if temperature <= 0:
        raise ValueError("channel_softmax: temperature must be > 0")
    z = temperature * x.data
    z = z - z.max(axis=-1, keepdims=True)  # stabilization is mandatory
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (temperature * out * (g - dot),)

    return _node(out, (x,), bw, "channel_softmax")


def smooth_assignment_channels(a, mu: float, epsilon: float) -> Tensor:
    """Entropy-smoothed assignment weights with a rejection slot.

    Returns p with p_k = exp(eps*a_k) / (exp(eps*mu) + sum_k' exp(eps*a_k')),
    so sum_k p_k <= 1; the residual mass is the rejection weight.
    """
    a = as_tensor(a)
    if epsilon <= 0:
        raise ValueError("smooth_assignment_channels: epsilon must be > 0")
    z = epsilon * a.data
    zmax = np.maximum(z.max(axis=-1, keepdims=True), epsilon * mu)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True) + np.exp(epsilon * mu - zmax)
    out = e / denom

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (epsilon * out * (g - dot),)

    return _node(out, (a,), bw, "smooth_assignment_channels")


def _validate_simplex(arr: np.ndarray, name: str, tol: float = 1e-6) -> None:
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol) or np.any(arr < -tol):
        raise ShapeError(f"kl_div: {name} is not on the simplex within {tol}")


def kl_div(p_target, q_pred) -> Tensor:
    """Mean over pixels of KL(p || q) = sum_k p_k (log p_k - log q_k).

    ``p_target`` carries no gradient. Zero predictions under positive targets
    are clamped at 1e-12 and flagged via a logging warning.
    """
    p = p_target.data if isinstance(p_target, Tensor) else np.asarray(p_target, dtype=np.float64)
    q = as_tensor(q_pred)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: shape mismatch {p.shape} vs {q.shape}")
    _validate_simplex(p, "p_target")
    _validate_simplex(q.data, "q_pred")
    qd = q.data
    if np.any((qd < 1e-12) & (p > 1e-12)):
        logger.warning("kl_div: q has (near) zero mass where p is positive; clamping at 1e-12")
    qc = np.maximum(qd, 1e-12)
    plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
    per_pixel = (plogp - p * np.log(qc)).sum(axis=-1)
    npix = max(per_pixel.size, 1)
    out = np.asarray(per_pixel.sum() / npix)

    def bw(g):
        gq = np.where(qd > 1e-12, -p / qc, 0.0) * (g / npix)
        return (None, gq.astype(qd.dtype))

    return _node(out, (as_tensor(p_target) if isinstance(p_target, Tensor) else Tensor(p), q),
                 bw, "kl_div")


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    x = as_tensor(logits)
    y = np.asarray(labels)
    if x.data.ndim != 2:
        raise ShapeError("cross_entropy: logits must be (batch, C)")
    n, c = x.shape
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy: labels must have shape ({n},)")
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError("cross_entropy: label out of range")
    z = x.data - x.data.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logZ
    out = np.asarray(-logp[np.arange(n), y].mean())
    probs = np.exp(logp)

    def bw(g):
        gx = probs.copy()
        gx[np.arange(n), y] -= 1.0
        return (gx * (g / n),)

    return _node(out, (x,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# pooling


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial extents of an NHWC (or HWC) map."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError("global_avg_pool: input must be (N, h, w, d) or (h, w, d)")
    N, h, w, d = xd.shape
    out = xd.mean(axis=(1, 2))

    def bw(g):
        gx = np.broadcast_to(g.reshape(N, 1, 1, d) / (h * w), xd.shape).astype(xd.dtype)
        return (gx[0] if squeeze else gx,)

    return _node(out[0] if squeeze else out, (x,), bw, "global_avg_pool")


def avg_pool(x, window, stride=None) -> Tensor:
    """Mean pooling with a (wh, ww) window; the window must tile the extents."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError("avg_pool: input must be (N, h, w, d) or (h, w, d)")
    wh, ww = window
    sh, sw = (wh, ww) if stride is None else stride
    N, h, w, d = xd.shape
    if (h - wh) % sh or (w - ww) % sw or wh > h or ww > w:
        raise ShapeError(f"avg_pool: window {window} stride {(sh, sw)} does not tile ({h}, {w})")
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (wh, ww), axis=(1, 2))
    win = win[:, ::sh, ::sw]
    out = win.mean(axis=(-2, -1))

    def bw(g):
        gxp = np.zeros_like(xd)
        gper = g / (wh * ww)
        for ki in range(wh):
            for kj in range(ww):
                gxp[:, ki:ki + oh * sh:sh, kj:kj + ow * sw:sw, :] += gper
        return (gxp[0] if squeeze else gxp,)

    return _node(out[0] if squeeze else out, (x,), bw, "avg_pool")
