import numpy as np

from .autograd import Tensor


def glorot_uniform(rng, fan_in, fan_out, name=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(shape, name=None):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def dense_params(rng, prefix, fan_in, fan_out):
    """Weight ``(fan_in, fan_out)`` and bias ``(1, fan_out)`` for ``x @ W + b``."""
    return {
        f"{prefix}.weight": glorot_uniform(rng, fan_in, fan_out, name=f"{prefix}.weight"),
        f"{prefix}.bias": zeros((1, fan_out), name=f"{prefix}.bias"),
    }
