"""Learned weight rounding by output reconstruction.

Each weight picks floor or ceil of ``w/s``. The choice is relaxed to a
rectified sigmoid ``h(v)`` in [0, 1] and optimized with Adam to match the
float output of a block on calibration data, while an annealed regularizer
pushes ``h(v)`` to 0 or 1. The final decision is ``h(v) >= 0.5``.
"""
from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from genq import rng as rngmod
from genq.errors import ContractError, StageError
from genq.nnkit import ops
from genq.nnkit.autograd import Tape, Tensor, backward
from genq.nnkit.layers import Context
from genq.nnkit.train import Adam
from genq.quant.core import CALIBRATED, RECONSTRUCTED, QuantParam, nearest_rounding_v, quantize
from genq.quant.fakequant import (inverse_rectified_sigmoid, rectified_sigmoid,
                                  soft_rounding_weight)
from genq.quant.qmodel import QuantizedModel

log = logging.getLogger(__name__)

RunFn = Callable[[np.ndarray, dict], Tensor]


def _beta(step: int, total: int, warmup: float, start: float, end: float) -> float | None:
    warm = int(warmup * total)
    if step < warm:
        return None
    rel = (step - warm) / max(1, total - warm)
    return end + (start - end) * max(0.0, 1.0 - rel)


def block_mse(run: RunFn, x: np.ndarray, y: np.ndarray, choice: dict, batch_size: int = 256) -> float:
    """Mean squared error between ``run(x, choice)`` and ``y`` over all of ``x``."""
    total, count = 0.0, 0
    for i in range(0, len(x), batch_size):
        out = run(x[i:i + batch_size], choice).data.astype(np.float64)
        d = out - y[i:i + batch_size]
        total += float(np.sum(d * d))
        count += d.size
    return total / count


def learn_rounding(run: RunFn, params: dict[str, tuple[np.ndarray, QuantParam]],
                   x: np.ndarray, y: np.ndarray, iters: int, seed: int,
                   batch_size: int = 32, lr: float = 1e-2, reg_weight: float = 0.01,
                   warmup: float = 0.2, beta: tuple[float, float] = (20.0, 2.0)) -> dict[str, np.ndarray]:
    """Optimize relaxed rounding variables; returns the raw ``v`` per layer.

    ``run(x_batch, soft)`` must evaluate the block with each layer in ``soft``
    using relaxed rounding driven by the given tensor.
    """
    vs = {}
    for name, (w, q) in params.items():
        frac = np.asarray(w, np.float32) / np.float32(q.s)
        frac = frac - np.floor(frac)
        v0 = inverse_rectified_sigmoid(frac)
        # keep the starting decision equal to nearest rounding
        near = nearest_rounding_v(w, q)
        v0 = np.where(near > 0, np.maximum(v0, 1e-6), np.minimum(v0, -1e-6))
        vs[name] = Tensor(v0.astype(np.float32), requires_grad=True, name=f"{name}.v")
    if iters <= 0:
        return {k: nearest_rounding_v(w, q) for k, (w, q) in params.items()}
    tensors = list(vs.values())
    opt = Adam(tensors, lr)
    gen = rngmod.stream(seed, "reconstruct")
    n = len(x)
    for step in range(iters):
        idx = gen.choice(n, size=min(batch_size, n), replace=False)
        b = _beta(step, iters, warmup, *beta)
        with Tape() as tape:
            out = run(x[idx], vs)
            diff = out - Tensor(y[idx], dtype=out.dtype)
            loss = (diff * diff).sum() * (1.0 / len(idx))
        grads = backward(tape, loss, tensors)
        if b is not None:
            for k, v in enumerate(tensors):
                h = rectified_sigmoid(v.data)
                sig = 1.0 / (1.0 + np.exp(-v.data))
                dh = 1.2 * sig * (1 - sig) * ((h > 0) & (h < 1))
                m = 2 * h - 1
                # d/dv of (1 - |2h-1|^b)
                greg = -b * np.abs(m) ** (b - 1) * np.sign(m) * 2 * dh
                grads[k] = grads[k] + reg_weight * greg.astype(np.float32)
        opt.step(grads)
    return {k: v.data.copy() for k, v in vs.items()}


def hard_choice(decisions: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Map raw ``v`` to the canonical +1/-1 encoding of ``h(v) >= 0.5``."""
    return {k: np.where(rectified_sigmoid(v) >= 0.5, 1.0, -1.0).astype(np.float32)
            for k, v in decisions.items()}


def _with_rounding(q: QuantParam, v: np.ndarray) -> QuantParam:
    return QuantParam(q.bits, q.s, q.z, q.n, q.p, q.role, RECONSTRUCTED, v=v)


def reconstruct_linear(w: np.ndarray, b: np.ndarray | None, q: QuantParam, x: np.ndarray,
                       iters: int, seed: int = 0, **kw) -> tuple[QuantParam, float, float]:
    """Learned rounding for a single linear layer ``x @ w.T + b``.

    Returns the reconstructed parameter, its output MSE and the MSE of
    nearest rounding.
    """
    w = np.asarray(w, np.float32)
    x = np.asarray(x, np.float32)
    bias = np.zeros(w.shape[0], np.float32) if b is None else np.asarray(b, np.float32)
    y = (x @ w.T + bias).astype(np.float64)

    def run(xb, soft):
        if isinstance(soft["w"], Tensor):
            wq = soft_rounding_weight(w, q, soft["w"])
        else:
            wq = Tensor(quantize(w, _with_rounding(q, soft["w"]))[1])
        return ops.linear(Tensor(xb), wq, Tensor(bias))

    raw = learn_rounding(run, {"w": (w, q)}, x, y, iters, seed, **kw)
    learned = hard_choice(raw)
    nearest = {"w": nearest_rounding_v(w, q)}
    mse_l = block_mse(run, x, y, learned)
    mse_n = block_mse(run, x, y, nearest)
    if mse_l > mse_n:
        learned, mse_l = nearest, mse_n
    return _with_rounding(q, learned["w"]), mse_l, mse_n


def reconstructable_units(qm: QuantizedModel) -> list[int]:
    return [i for i, unit in enumerate(qm.model.units) if unit.weight_layers()]


def reconstruct_rounding(qm: QuantizedModel, calib, iters: int, block_id: int, seed: int = 0,
                         batch_size: int = 32, lr: float = 1e-2) -> QuantizedModel:
    """Learn the rounding of every weight in block ``block_id`` and freeze it.

    A block is a conv-BN-ReLU unit for the CNN and a transformer block for the
    ViT. The block sees inputs produced by the quantized model so far and is
    fitted to the float model's block output on float inputs. If the learned
    rounding does not beat nearest rounding on the calibration set, nearest
    rounding is kept.
    """
    units = reconstructable_units(qm)
    if not 0 <= block_id < len(units):
        raise ContractError(f"block_id {block_id} out of range 0..{len(units) - 1}")
    ui = units[block_id]
    unit = qm.model.units[ui]
    layers = unit.weight_layers()
    for layer in layers:
        q = qm.weights.get(layer.name)
        if q is None:
            raise StageError(f"weight {layer.name} has not been calibrated")
        if q.stage != CALIBRATED:
            raise StageError(f"weight {layer.name} already at stage {q.stage}")
    images = calib.images if hasattr(calib, "images") else np.asarray(calib)
    if len(images) == 0:
        raise ContractError("calibration set is empty")

    xs, ys = [], []
    for i in range(0, len(images), 256):
        chunk = images[i:i + 256]
        xs.append(qm.forward(chunk, stop=ui).data)
        ys.append(qm.model.forward(chunk, Context(), 0, ui + 1).data)
    x = np.concatenate(xs)
    y = np.concatenate(ys).astype(np.float64)

    skip = (unit.terminal_site,) if unit.terminal_site else ()
    base = {layer.name: qm.weights[layer.name] for layer in layers}

    def run(xb, choice):
        soft = {k: v for k, v in choice.items() if isinstance(v, Tensor)}
        saved = {}
        for k, v in choice.items():
            if not isinstance(v, Tensor):
                saved[k] = qm.weights[k]
                qm.weights[k] = _with_rounding(base[k], v)
                qm._wq.pop(k, None)
        try:
            return unit(Tensor(xb), qm.context(soft=soft, skip_sites=skip))
        finally:
            for k, q in saved.items():
                qm.weights[k] = q
                qm._wq.pop(k, None)

    params = {layer.name: (layer.weight.data, base[layer.name]) for layer in layers}
    raw = learn_rounding(run, params, x, y, iters, seed=rngmod.derive(seed, block_id),
                         batch_size=batch_size, lr=lr)
    learned = hard_choice(raw)
    nearest = {k: nearest_rounding_v(w, base[k]) for k, (w, _) in params.items()}
    mse_l = block_mse(run, x, y, learned)
    mse_n = block_mse(run, x, y, nearest)
    log.info("block %s: learned mse %.3g, nearest mse %.3g", unit.name, mse_l, mse_n)
    if mse_l > mse_n:
        learned = nearest
    for k, v in learned.items():
        qm.weights[k] = _with_rounding(base[k], v)
    qm.invalidate()
    return qm


def reconstruct_all(qm: QuantizedModel, calib, iters: int, seed: int = 0, **kw) -> QuantizedModel:
    for block_id in range(len(reconstructable_units(qm))):
        reconstruct_rounding(qm, calib, iters, block_id, seed=seed, **kw)
    return qm
