"""Differentiable fake-quantization nodes for the autodiff tape.

Gradients through rounding follow the straight-through rule: the derivative
of clip(round(t)) is 1 while ``n <= t <= p`` and 0 once clipped.
"""
from __future__ import annotations

import numpy as np

from genq.nnkit.autograd import Tensor, record
from genq.quant.core import QuantParam, round_half_away

# rectified sigmoid stretch for the rounding relaxation
ZETA, GAMMA = 1.1, -0.1


def rectified_sigmoid(v: np.ndarray) -> np.ndarray:
    return np.clip((ZETA - GAMMA) / (1.0 + np.exp(-v)) + GAMMA, 0.0, 1.0)


def inverse_rectified_sigmoid(h: np.ndarray) -> np.ndarray:
    h = np.clip(h, 1e-4, 1 - 1e-4)
    return -np.log((ZETA - GAMMA) / (h - GAMMA) - 1.0)


def soft_rounding_weight(w: np.ndarray, q: QuantParam, v: Tensor) -> Tensor:
    """``s * (clip(floor(w/s) + h(v) + z, n, p) - z)``, differentiable in ``v``."""
    s = v.dtype.type(q.s)
    base = np.floor(np.asarray(w, dtype=v.dtype) / s)
    sig = 1.0 / (1.0 + np.exp(-v.data))
    raw = (ZETA - GAMMA) * sig + GAMMA
    h = np.clip(raw, 0.0, 1.0)
    t = base + h + q.z
    inside = (t >= q.n) & (t <= q.p)
    out = s * (np.clip(t, q.n, q.p) - q.z)

    def back(g):
        dh = (ZETA - GAMMA) * sig * (1.0 - sig) * ((raw > 0) & (raw < 1))
        return ((g * s * dh * inside).astype(v.dtype),)

    return record(out.astype(v.dtype), (v,), back)


def qat_weight(w: np.ndarray, q: QuantParam, u: Tensor) -> Tensor:
    """Weight with frozen rounding plus a learned integer offset ``round(u/s)``.

    The backward pass uses the surrogate ``s * (clip(floor(w/s) + bit + u/s + z) - z)``,
    whose derivative in ``u`` is 1 inside the clip range.
    """
    s = u.dtype.type(q.s)
    base = np.floor(np.asarray(w, dtype=u.dtype) / s) + q.rounding_bits().astype(u.dtype)
    t_int = base + round_half_away(u.data / s) + q.z
    out = s * (np.clip(t_int, q.n, q.p) - q.z)
    t_soft = base + u.data / s + q.z
    inside = (t_soft >= q.n) & (t_soft <= q.p)
    return record(out.astype(u.dtype), (u,), lambda g: ((g * inside).astype(u.dtype),))


def lsq_activation(x: Tensor, s: Tensor, q: QuantParam, grad_scale: float) -> Tensor:
    """LSQ fake quantization with a learnable scalar step ``s``."""
    sd = s.data.reshape(()).astype(x.dtype)
    t = x.data / sd
    r = round_half_away(t)
    out = sd * (np.clip(r + q.z, q.n, q.p) - q.z)
    below, above = t + q.z < q.n, t + q.z > q.p
    inside = ~(below | above)

    def back(g):
        gx = g * inside if x.requires_grad else None
        ds = np.where(inside, r - t, np.where(below, q.n - q.z, q.p - q.z))
        gs = np.asarray(np.sum(g * ds) * grad_scale, dtype=s.dtype).reshape(s.shape)
        return gx, gs

    return record(out.astype(x.dtype), (x, s), back)


def fixed_activation(x: Tensor, q: QuantParam) -> Tensor:
    """Fake quantization with a frozen step; straight-through for ``x``."""
    s = x.dtype.type(q.s)
    t = x.data / s + q.z
    out = s * (np.clip(round_half_away(x.data / s) + q.z, q.n, q.p) - q.z)
    inside = (t >= q.n) & (t <= q.p)
    return record(out.astype(x.dtype), (x,), lambda g: (g * inside,))
