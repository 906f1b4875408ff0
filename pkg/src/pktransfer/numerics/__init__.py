"""Dense kernels, reverse-mode autodiff, AdamW and the warmup-cosine schedule."""

from . import autograd as ag
from .autograd import Tape, Tensor, backward, forward_eval
from .init import dense_params, glorot_uniform
from .optim import AdamW, AdamWState, LrSchedule, adamw_step, lr_at

__all__ = [
    "ag", "Tape", "Tensor", "backward", "forward_eval", "dense_params", "glorot_uniform",
    "AdamW", "AdamWState", "LrSchedule", "adamw_step", "lr_at",
]
