"""Differentiable operations.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to input gradients. Ops preserve the input dtype.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from genq.errors import ContractError, DimensionError
from genq.nnkit.autograd import Tensor, as_tensor, record

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                             _unbroadcast(g, sb) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                             _unbroadcast(-g, sb) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                             _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast as in ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, back)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return record(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return record(x.data[idx], (x,), back)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return record(out, (x,), lambda g: (g * (out > 0),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return record((xd * cdf).astype(xd.dtype), (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), back)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError("label outside the logit class range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / len(labels)),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Stack shifted NHWC views into (B, Ho, Wo, kh*kw, C)."""
    return np.stack([xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
                     for i in range(kh) for j in range(kw)], axis=3)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with OIHW weights."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    bsz, c, h, wd_ = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd_ + 2 * padding - kw) // stride + 1
    xp = np.zeros((bsz, h + 2 * padding, wd_ + 2 * padding, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + wd_, :] = x.data.transpose(0, 2, 3, 1)
    cols = _windows(xp, kh, kw, stride, ho, wo).reshape(bsz * ho * wo, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        if not x.requires_grad:
            return None, gw, gb
        gcols = (g2 @ wmat).reshape(bsz, ho, wo, kh * kw, c)
        gx = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i * kw + j]
        gx = gx[:, padding:padding + h, padding:padding + wd_, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, back)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalize NCHW ``x`` with its own per-channel statistics.

    Returns ``(out, mean, var)`` where ``var`` is the biased batch variance.
    """
    axes = (0, 2, 3)
    xd = x.data
    mu = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]
    m = xd.size // xd.shape[1]

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        if not x.requires_grad:
            return None, ggamma, gbeta
        gxhat = g * gd
        gx = (inv[None, :, None, None] / m) * (
            m * gxhat - gbeta[None, :, None, None] * gd
            - xhat * (ggamma * gamma.data)[None, :, None, None])
        return gx.astype(xd.dtype), ggamma, gbeta

    return record(out.astype(xd.dtype), (x, gamma, beta), back), mu, var


def batchnorm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray,
                   var: np.ndarray, eps: float) -> Tensor:
    """Per-channel affine normalization with fixed statistics."""
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def back(g):
        axes = (0, 2, 3)
        gx = g * gd * inv[None, :, None, None] if x.requires_grad else None
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record(out.astype(x.dtype), (x, gamma, beta), back)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = (inv / d) * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                          - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx.astype(xd.dtype), ggamma, gbeta

    return record(out.astype(xd.dtype), (x, gamma, beta), back)


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over (B, H, N, D) operands.

    Returns the attended values and the row-stochastic weight tensor.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale)
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights
