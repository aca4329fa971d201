"""Channel (ECA), spatial (ESA) and dot-product self-attention blocks."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .kan import grid_to_tokens, tokens_to_grid
from .module import Conv, Module, kaiming_uniform
from .nn_ops import ShapeError, convolve, global_avg_pool, trilinear_upsample
from .tensor import Tensor, as_tensor


def eca_kernel_size(channels, gamma=2, b=1):
    """Odd 1D kernel size adapted to the channel count, never below 3."""
    if channels < 1:
        raise ValueError("channel count must be positive")
    t = abs(math.log2(channels) / gamma + b / gamma)
    k = 2 * math.floor(t / 2) + 1
    return max(k, 3)


class EcaModule(Module):
    def __init__(self, channels, rng, kernel_size=None, dtype=np.float32):
        k = eca_kernel_size(channels) if kernel_size is None else kernel_size
        if k < 3 or k % 2 == 0:
            raise ValueError(f"ECA kernel size must be odd and >= 3, got {k}")
        self.kernel_size = k
        self.conv1d_weight = kaiming_uniform(rng, (1, 1, k), k, dtype)

    def forward(self, x):
        return eca_forward(x, self)


def eca_forward(x, m: EcaModule):
    x = as_tensor(x)
    B, C = x.shape[:2]
    z = global_avg_pool(x).reshape(B, 1, C)
    a = T.sigmoid(convolve(z, m.conv1d_weight, None, padding=(m.kernel_size - 1) // 2))
    return x * a.reshape((B, C) + (1,) * (x.ndim - 2))


class EsaModule(Module):
    def __init__(self, rng, kernel_size=7, dtype=np.float32):
        self.kernel_size = kernel_size
        self.conv3d_weight = kaiming_uniform(rng, (1, 1) + (kernel_size,) * 3, kernel_size**3, dtype)

    def forward(self, x):
        return esa_forward(x, self)


def esa_forward(x, m: EsaModule):
    x = as_tensor(x)
    s = T.reduce(x, "mean", 1, keepdims=True)
    w = T.sigmoid(convolve(s, m.conv3d_weight, None, padding=(m.kernel_size - 1) // 2))
    return x * w


class SelfAttentionBlock(Module):
    def __init__(self, embed, heads, rng, dtype=np.float32):
        if embed % heads:
            raise ShapeError(f"embedding {embed} not divisible by {heads} heads")
        self.embed, self.heads = embed, heads
        self.head_dim = embed // heads
        self.w_q = kaiming_uniform(rng, (embed, embed), embed, dtype)
        self.w_k = kaiming_uniform(rng, (embed, embed), embed, dtype)
        self.w_v = kaiming_uniform(rng, (embed, embed), embed, dtype)
        self.w_o = kaiming_uniform(rng, (embed, embed), embed, dtype)

    def forward(self, tokens):
        return self_attention_forward(tokens, self)


def _project(tokens, block):
    B, n, E = tokens.shape
    if E != block.embed:
        raise ShapeError(f"token dimension {E} != block embedding {block.embed}")

    def heads(w):
        return T.transpose((tokens @ w).reshape(B, n, block.heads, block.head_dim), (0, 2, 1, 3))

    return heads(block.w_q), heads(block.w_k), heads(block.w_v)


def _attend(tokens, block):
    q, k, v = _project(tokens, block)
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(block.head_dim))
    return T.softmax(scores, axis=-1), v


def attention_weights(tokens, block: SelfAttentionBlock):
    """Per-head softmax weights ``[B, heads, T, T]``."""
    return _attend(as_tensor(tokens), block)[0]


def self_attention_forward(tokens, block: SelfAttentionBlock):
    tokens = as_tensor(tokens)
    B, n, E = tokens.shape
    attn, v = _attend(tokens, block)
    mixed = T.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, n, E)
    return tokens + mixed @ block.w_o


class SpatialSelfAttention(Module):
    """Attention over a feature map via a stride-2 token grid.

    The map is tokenized by a 3x3x3 stride-2 convolution, attended, put back
    on the half-resolution grid, upsampled and added to the input.
    """

    def __init__(self, channels, rng, heads=1, dtype=np.float32):
        self.tokenizer = Conv(channels, channels, 3, rng, stride=2, padding=1, dtype=dtype)
        self.attn = SelfAttentionBlock(channels, heads, rng, dtype=dtype)

    def forward(self, x):
        x = as_tensor(x)
        feat = self.tokenizer(x)
        out = self_attention_forward(grid_to_tokens(feat), self.attn)
        return x + trilinear_upsample(tokens_to_grid(out, feat.shape[2:]))
