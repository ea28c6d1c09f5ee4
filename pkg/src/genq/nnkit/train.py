"""Float training loop: SGD with momentum and cosine learning-rate decay."""
from __future__ import annotations

import logging
import math

import numpy as np

from genq import rng as rngmod
from genq.errors import ContractError, NonFiniteLossError
from genq.nnkit import ops
from genq.nnkit.autograd import Tape, Tensor, backward
from genq.nnkit.layers import Context, Model

log = logging.getLogger(__name__)


class SGD:
    """SGD with heavy-ball momentum and decoupled-free L2 weight decay."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p, g, buf in zip(self.params, grads, self._buf):
            if self.weight_decay and p.ndim > 1:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data = (p.data - lr * buf).astype(p.dtype)


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def predict(model: Model, images: np.ndarray, ctx_factory=Context, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for a stack of images, computed in fixed-size chunks."""
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(model(images[i:i + batch_size], ctx_factory()).data)
    return np.concatenate(outs, axis=0)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def train_float(model: Model, dataset, epochs: int, lr: float, seed: int,
                batch_size: int = 64, momentum: float = 0.9, weight_decay: float = 5e-4,
                history: list | None = None) -> Model:
    """Train ``model`` in place on ``dataset`` (anything with ``images``/``labels``).

    Batches are reshuffled each epoch from a seeded stream, so two runs with
    the same seed produce bitwise-identical parameters.
    """
    labels = np.asarray(dataset.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ContractError(f"labels must lie in [0, {model.num_classes})")
    if epochs <= 0:
        return model
    images = dataset.images
    n = len(labels)
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    params = list(model.parameters().values())
    opt = SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    step = 0
    for epoch in range(epochs):
        order = rngmod.stream(seed, "train", "epoch", epoch).permutation(n)
        running, correct = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            if len(idx) < 2:
                continue
            ctx = Context(train=True, update_stats=True)
            with Tape() as tape:
                logits = model(images[idx], ctx)
                loss = ops.cross_entropy(logits, labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch}, step {b}")
            grads = backward(tape, loss, params)
            opt.step(grads, cosine_lr(lr, step, total))
            step += 1
            running += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        row = {"epoch": epoch, "loss": running / n, "train_acc": correct / n}
        log.info("epoch %d loss %.4f train-acc %.4f", epoch, row["loss"], row["train_acc"])
        if history is not None:
            history.append(row)
    return model
