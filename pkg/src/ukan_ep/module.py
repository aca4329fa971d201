"""Minimal parameter container shared by all layers."""

from __future__ import annotations

import math

import numpy as np

from .nn_ops import ConvSpec, convolve, normalize
from .tensor import Tensor


class Module:
    """Parameters are the ``requires_grad`` tensors among the attributes.

    Names follow attribute assignment order, so they are stable for a fixed
    construction sequence.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            items = []
            if isinstance(value, Module):
                items = [value]
            elif isinstance(value, (list, tuple)):
                items = value
            elif isinstance(value, dict):
                items = list(value.values())
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng, shape, fan_in, dtype):
    # gain sqrt(2) for relu-style paths
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def uniform_bias(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def constant(shape, value, dtype):
    return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)


class Conv(Module):
    """Convolution with Kaiming-uniform weights and optional bias."""

    def __init__(self, c_in, c_out, kernel, rng, *, stride=1, padding=0, groups=1, bias=True, rank=3, dtype=np.float32):
        ks = (kernel,) * rank if isinstance(kernel, int) else tuple(kernel)
        fan_in = (c_in // groups) * int(np.prod(ks))
        self.weight = kaiming_uniform(rng, (c_out, c_in // groups) + ks, fan_in, dtype)
        self.bias = uniform_bias(rng, (c_out,), fan_in, dtype) if bias else None
        self.spec = ConvSpec.make(rank, stride, padding, groups)

    def forward(self, x):
        return convolve(x, self.weight, self.bias, self.spec)


class Norm(Module):
    def __init__(self, channels, kind, dtype=np.float32):
        self.kind = kind
        self.gain = constant((channels,), 1.0, dtype)
        self.offset = constant((channels,), 0.0, dtype)

    def forward(self, x):
        return normalize(x, self.kind, self.gain, self.offset)
