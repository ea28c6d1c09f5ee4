"""Quantization-aware finetuning on top of a reconstructed PTQ model.

Weights and their learned rounding stay frozen. Each weight tensor gets a
fresh all-zero offset ``u`` that enters the integer code as ``round(u/s)``
and is trained straight-through; activation steps are trained with the LSQ
gradient. With zero update steps the model is bit-identical to its PTQ start.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from genq import rng as rngmod
from genq.errors import NonFiniteLossError, StageError
from genq.nnkit import ops
from genq.nnkit.autograd import Tape, Tensor, backward
from genq.nnkit.train import SGD, cosine_lr
from genq.quant.core import QAT, RECONSTRUCTED, QuantParam
from genq.quant.qmodel import QuantizedModel

log = logging.getLogger(__name__)

MIN_STEP = 1e-8


def start_qat(qm: QuantizedModel) -> QuantizedModel:
    """Move every weight from the reconstructed stage to QAT with ``u = 0``."""
    bad = [k for k, q in qm.weights.items() if q.stage != RECONSTRUCTED]
    if bad:
        raise StageError(f"QAT needs reconstructed weights; not reconstructed: {bad[:3]}")
    for k, q in qm.weights.items():
        qm.weights[k] = QuantParam(q.bits, q.s, q.z, q.n, q.p, q.role, QAT, v=q.v,
                                   u=np.zeros_like(q.v, dtype=np.float32))
    qm.invalidate()
    return qm


def qat_finetune(qm: QuantizedModel, data, epochs: int, lr: float = 1e-3, seed: int = 0,
                 batch_size: int = 64, momentum: float = 0.9,
                 history: list | None = None) -> QuantizedModel:
    start_qat(qm)
    if epochs <= 0:
        return qm
    images, labels = data.images, np.asarray(data.labels)
    n = len(labels)
    u = {k: Tensor(q.u, requires_grad=True, name=f"{k}.u") for k, q in qm.weights.items()}
    steps = {site: Tensor(np.array([q.s], np.float32), requires_grad=True, name=f"{site}.s")
             for site, q in qm.acts.items()}
    params = list(u.values()) + list(steps.values())
    opt = SGD(params, lr, momentum=momentum)
    per_epoch = math.ceil(n / batch_size)
    total = epochs * per_epoch
    step = 0
    for epoch in range(epochs):
        order = rngmod.stream(seed, "qat", "epoch", epoch).permutation(n)
        running = 0.0
        for b in range(per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            with Tape() as tape:
                logits = qm.forward(images[idx], qm.context(qat=u, act_steps=steps))
                loss = ops.cross_entropy(logits, labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(f"non-finite QAT loss at epoch {epoch}, step {b}")
            opt.step(backward(tape, loss, params), cosine_lr(lr, step, total))
            for t in steps.values():
                t.data = np.maximum(t.data, MIN_STEP).astype(np.float32)
            # keep the parameter objects in sync so evaluation sees the update
            for k, t in u.items():
                qm.weights[k].u = t.data
            for site, t in steps.items():
                qm.acts[site].s = float(t.data[0])
            step += 1
            running += value * len(idx)
        row = {"epoch": epoch, "loss": running / n}
        log.info("qat epoch %d loss %.4f", epoch, row["loss"])
        if history is not None:
            history.append(row)
    qm.invalidate()
    return qm
