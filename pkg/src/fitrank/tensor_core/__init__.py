"""Tensor math, reverse-mode autodiff, layers and Adam."""
from . import tensor as ops
from .gradcheck import finite_difference_check
from .layers import (BatchNorm, Dense, Dice, Embedding, Module, dense_layer_forward, kaiming_uniform,
                     param)
from .optim import Adam, AdamState, adam_step
from .tensor import (NonFiniteError, Tape, TapeError, Tensor, deterministic, is_deterministic,
                     l2_normalize, set_deterministic, softmax)


def softmax_with_temperature(logits, tau: float):
    return softmax(logits if isinstance(logits, Tensor) else Tensor(logits), tau=tau)


__all__ = [
    "Adam", "AdamState", "BatchNorm", "Dense", "Dice", "Embedding", "Module", "NonFiniteError",
    "Tape", "TapeError", "Tensor", "adam_step", "dense_layer_forward", "deterministic",
    "finite_difference_check", "is_deterministic", "kaiming_uniform", "l2_normalize", "ops", "param",
    "set_deterministic", "softmax", "softmax_with_temperature",
]
