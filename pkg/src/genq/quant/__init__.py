"""Uniform fake quantization, PTQ calibration/reconstruction and QAT."""
from genq.quant.core import (CALIBRATED, QAT, RECONSTRUCTED, QuantParam, calibrate_step,
                             int_bounds, quantize, round_half_away)
from genq.quant.qat import qat_finetune, start_qat
from genq.quant.qmodel import QuantizedModel, calibrate_activations, evaluate
from genq.quant.reconstruct import reconstruct_all, reconstruct_linear, reconstruct_rounding
from genq.quant.serialize import load_quantized, save_quantized

__all__ = [
    "CALIBRATED", "QAT", "RECONSTRUCTED", "QuantParam", "calibrate_step", "int_bounds", "quantize",
    "round_half_away", "qat_finetune", "start_qat", "QuantizedModel", "calibrate_activations",
    "evaluate", "reconstruct_all", "reconstruct_linear", "reconstruct_rounding",
    "load_quantized", "save_quantized",
]
