"""Fake-quantized view of a float model."""
from __future__ import annotations

import logging

import numpy as np

from genq.errors import ContractError
from genq.nnkit.autograd import Tensor
from genq.nnkit.layers import Context, Model
from genq.nnkit.train import accuracy, predict
from genq.quant.core import CALIBRATED, QAT, RECONSTRUCTED, QuantParam, calibrate_step, quantize
from genq.quant.fakequant import fixed_activation, lsq_activation, qat_weight, soft_rounding_weight

log = logging.getLogger(__name__)

# per-site cap on stored calibration activations
MAX_SITE_VALUES = 1 << 18


class QuantizedModel:
    """A frozen float model plus one :class:`QuantParam` per weight and per activation site.

    ``weights`` is keyed by layer name (``block0.conv``), ``acts`` by site name
    (``block0.relu``, ``head.in``). Activation sites without a parameter pass
    through unquantized.
    """

    def __init__(self, model: Model, w_bits: int, a_bits: int,
                 weights: dict[str, QuantParam] | None = None,
                 acts: dict[str, QuantParam] | None = None):
        self.model = model
        self.w_bits = w_bits
        self.a_bits = a_bits
        self.weights = weights if weights is not None else {}
        self.acts = acts if acts is not None else {}
        self._wq: dict[str, Tensor] = {}

    @classmethod
    def calibrate(cls, model: Model, w_bits: int, a_bits: int) -> "QuantizedModel":
        """Fit a step size for every conv/linear weight."""
        weights = {layer.name: calibrate_step(layer.weight.data, w_bits)
                   for layer in model.weight_layers()}
        return cls(model, w_bits, a_bits, weights)

    @property
    def stage(self) -> str:
        stages = {q.stage for q in self.weights.values()}
        for st in (CALIBRATED, RECONSTRUCTED, QAT):
            if st in stages:
                return st
        return CALIBRATED

    def invalidate(self) -> None:
        self._wq.clear()

    def hard_weight(self, layer: str, w: Tensor) -> Tensor:
        cached = self._wq.get(layer)
        if cached is None:
            cached = Tensor(quantize(w.data, self.weights[layer])[1])
            self._wq[layer] = cached
        return cached

    def context(self, **kw) -> "QuantContext":
        return QuantContext(self, **kw)

    def forward(self, x, ctx: "QuantContext | None" = None, start: int = 0,
                stop: int | None = None) -> Tensor:
        return self.model.forward(x, ctx or self.context(), start, stop)

    __call__ = forward

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return predict(self.model, images, self.context, batch_size)


class QuantContext(Context):
    """Forward context that swaps in fake-quantized weights and activations.

    ``soft`` maps layer names to rounding-variable tensors (relaxed rounding),
    ``qat`` maps layer names to offset tensors, ``act_steps`` maps sites to
    learnable step tensors. ``skip_sites`` are left unquantized.
    """

    def __init__(self, qm: QuantizedModel, soft=None, qat=None, act_steps=None,
                 skip_sites=(), quantize_acts: bool = True, record_acts: bool = False):
        super().__init__()
        self.qm = qm
        self.soft = soft or {}
        self.qat = qat or {}
        self.act_steps = act_steps or {}
        self.skip = set(skip_sites)
        self.quantize_acts = quantize_acts
        self.record_acts = record_acts
        self.recorded: dict[str, np.ndarray] = {}

    def weight(self, layer: str, w: Tensor) -> Tensor:
        if layer in self.soft:
            return soft_rounding_weight(w.data, self.qm.weights[layer], self.soft[layer])
        if layer in self.qat:
            return qat_weight(w.data, self.qm.weights[layer], self.qat[layer])
        if layer not in self.qm.weights:
            return w
        return self.qm.hard_weight(layer, w)

    def act(self, site: str, x: Tensor) -> Tensor:
        if self.record_acts:
            flat = x.data.reshape(-1)
            step = max(1, flat.size // 65536)
            self.recorded[site] = flat[::step]
        if not self.quantize_acts or site in self.skip:
            return x
        q = self.qm.acts.get(site)
        if q is None:
            return x
        if site in self.act_steps:
            per_sample = x.size // x.shape[0]
            return lsq_activation(x, self.act_steps[site], q, 1.0 / np.sqrt(per_sample * q.p))
        return fixed_activation(x, q)


def calibrate_activations(qm: QuantizedModel, calib, batch_size: int = 128) -> QuantizedModel:
    """Fit a step size per activation site on calibration activations.

    Activations are recorded with activation quantization off and the weights
    at their current stage. Sites whose observed values are all non-negative
    get the zero-point pinned to ``n``.
    """
    images = calib.images if hasattr(calib, "images") else np.asarray(calib)
    if len(images) == 0:
        raise ContractError("calibration set is empty")
    store: dict[str, list[np.ndarray]] = {}
    for i in range(0, len(images), batch_size):
        ctx = qm.context(quantize_acts=False, record_acts=True)
        qm.forward(images[i:i + batch_size], ctx)
        for site, vals in ctx.recorded.items():
            store.setdefault(site, []).append(vals)
    for site in qm.model.act_sites():
        vals = np.concatenate(store.get(site, [np.zeros(1, np.float32)]))
        if vals.size > MAX_SITE_VALUES:
            vals = vals[::vals.size // MAX_SITE_VALUES + 1]
        if not np.any(vals):
            log.warning("activation site %s never activated by calibration data; using default step", site)
        qm.acts[site] = calibrate_step(vals, qm.a_bits, role="activation",
                                       nonnegative=bool(vals.min() >= 0))
    qm.invalidate()
    return qm


def evaluate(model_or_qm, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy on a labelled dataset."""
    if len(dataset.labels) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if isinstance(model_or_qm, QuantizedModel):
        logits = model_or_qm.logits(dataset.images, batch_size)
    else:
        logits = predict(model_or_qm, dataset.images, Context, batch_size)
    return accuracy(logits, dataset.labels)
