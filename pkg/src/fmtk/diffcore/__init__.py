"""Minimal reverse-mode differentiable tensor engine."""

from fmtk.diffcore.gradcheck import finite_diff_check
from fmtk.diffcore.graph import (
    INPUT,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    Graph,
    MaxPool2x2,
    ReLU,
    ResidualAdd,
    Sigmoid,
    Softmax,
)
from fmtk.diffcore.optim import SgdState, sgd_step
from fmtk.diffcore.serialize import decode_params, encode_params, load_params, save_params
from fmtk.diffcore.tensor import Tensor

__all__ = [
    "INPUT",
    "Conv2d",
    "Dense",
    "Flatten",
    "GlobalAvgPool",
    "Graph",
    "MaxPool2x2",
    "ReLU",
    "ResidualAdd",
    "SgdState",
    "Sigmoid",
    "Softmax",
    "Tensor",
    "decode_params",
    "encode_params",
    "finite_diff_check",
    "load_params",
    "save_params",
    "sgd_step",
]
