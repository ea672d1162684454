"""Tensor math, reverse-mode tape and models for the simulator."""

from feddp.nn.autodiff import Node, Tape, backward
from feddp.nn.model import forward, init_params, param_layout, predict, total_loss
from feddp.nn.optim import cosine_lr, sgd_step
from feddp.nn.params import Param, ParamSet
from feddp.nn.spec import LayerSpec, ModelSpec, preset

__all__ = [
    "LayerSpec", "ModelSpec", "Node", "Param", "ParamSet", "Tape", "backward",
    "cosine_lr", "forward", "init_params", "param_layout", "predict", "preset",
    "sgd_step", "total_loss",
]
