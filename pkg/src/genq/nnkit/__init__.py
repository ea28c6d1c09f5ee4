"""Minimal numpy tensor engine with tape-based reverse-mode autodiff."""
from genq.nnkit.autograd import Tape, Tensor, backward
from genq.nnkit.layers import Context, Model, build_model, tiny_cnn, tiny_vit
from genq.nnkit.serialize import load_model, load_tensor, save_model, save_tensor
from genq.nnkit.train import accuracy, predict, train_float

__all__ = [
    "Tape", "Tensor", "backward", "Context", "Model", "build_model", "tiny_cnn", "tiny_vit",
    "load_model", "save_model", "load_tensor", "save_tensor", "accuracy", "predict", "train_float",
]
