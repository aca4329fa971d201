"""B-spline KAN layers and the tokenized KAN block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .module import Conv, Module, Norm, kaiming_uniform
from .nn_ops import ShapeError, convolve, normalize
from .tensor import Tensor, as_tensor, from_op


@dataclass(frozen=True)
class SplineGrid:
    lo: float = -1.0
    hi: float = 1.0
    intervals: int = 5
    order: int = 3

    def __post_init__(self):
        if self.intervals < 1 or self.order < 0 or not self.hi > self.lo:
            raise ValueError(f"invalid spline grid {self}")

    @property
    def step(self):
        return (self.hi - self.lo) / self.intervals

    @property
    def knots(self):
        """Uniform knots extended by ``order`` steps past each end."""
        k = self.order
        return self.lo + self.step * np.arange(-k, self.intervals + k + 1, dtype=np.float64)

    @property
    def num_basis(self):
        return self.intervals + self.order


def _basis_table(x, grid: SplineGrid, order):
    """Cox-de Boor values of all order-``order`` bases, shape ``x.shape + (n,)``."""
    t = grid.knots.astype(x.dtype)
    xe = x[..., None]
    bases = ((xe >= t[:-1]) & (xe < t[1:])).astype(x.dtype)
    if grid.order == 0 and order == 0:
        # close the last in-range interval so x == hi still gets a basis
        last = grid.intervals - 1
        bases[..., last] = np.where(x == grid.hi, 1.0, bases[..., last])
    for p in range(1, order + 1):
        left = (xe - t[: -(p + 1)]) / (t[p:-1] - t[: -(p + 1)])
        right = (t[p + 1 :] - xe) / (t[p + 1 :] - t[1:-p])
        bases = left * bases[..., :-1] + right * bases[..., 1:]
    return bases


def bspline_basis(x, grid: SplineGrid = SplineGrid()):
    """Order-``grid.order`` B-spline basis values, shape ``x.shape + (G + k,)``."""
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    return _basis_table(x, grid, grid.order)


def bspline_basis_derivative(x, grid: SplineGrid = SplineGrid()):
    k = grid.order
    if k == 0:
        return np.zeros(np.shape(x) + (grid.num_basis,), dtype=np.asarray(x).dtype)
    lower = _basis_table(x, grid, k - 1)
    t = grid.knots.astype(lower.dtype)
    n = grid.num_basis
    j = np.arange(n)
    a = k / (t[j + k] - t[j])
    b = k / (t[j + k + 1] - t[j + 1])
    return a * lower[..., j] - b * lower[..., j + 1]


def spline_features(x, grid: SplineGrid):
    """Differentiable basis expansion of every entry of ``x``."""
    x = as_tensor(x)
    v = x.data
    data = bspline_basis(v, grid).astype(v.dtype, copy=False)

    def vjp(g):
        d = bspline_basis_derivative(v, grid).astype(v.dtype, copy=False)
        return ((g * d).sum(axis=-1),)

    return from_op(np.ascontiguousarray(data), (x,), vjp)


class KanLayer(Module):
    """``d_out x d_in`` learnable edge functions: SiLU base path plus a spline path."""

    def __init__(self, d_in, d_out, rng, grid: SplineGrid = SplineGrid(), *, base=True, dtype=np.float32):
        self.d_in, self.d_out, self.grid = d_in, d_out, grid
        nb = grid.num_basis
        self.base_weight = kaiming_uniform(rng, (d_out, d_in), d_in, dtype) if base else None
        std = 0.1 / math.sqrt(nb)
        self.spline_coeffs = Tensor(rng.normal(0.0, std, size=(d_out, d_in, nb)), requires_grad=True, dtype=dtype)

    def forward(self, x):
        return kan_layer_forward(x, self)


def kan_layer_forward(x, layer: KanLayer):
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise ShapeError(f"expected [batch, {layer.d_in}], got {x.shape}")
    n = x.shape[0]
    nb = layer.grid.num_basis
    feats = spline_features(x, layer.grid).reshape(n, layer.d_in * nb)
    coeffs = layer.spline_coeffs.reshape(layer.d_out, layer.d_in * nb)
    out = feats @ T.transpose(coeffs)
    if layer.base_weight is not None:
        out = out + T.silu(x) @ T.transpose(layer.base_weight)
    return out


class TokKanBlock(Module):
    """Tokenizer conv, token-wise KAN, depth-wise 3x3x3 conv, residual, layer norm.

    ``stride=2`` halves each spatial extent (encoder side); the decoder uses
    ``stride=1`` after an explicit upsample.
    """

    def __init__(self, c_in, embed, rng, grid: SplineGrid = SplineGrid(), *, stride=2, dtype=np.float32):
        self.embed = embed
        self.stride = stride
        self.patch_conv = Conv(c_in, embed, 3, rng, stride=stride, padding=1, dtype=dtype)
        self.kan = KanLayer(embed, embed, rng, grid, dtype=dtype)
        self.dw_weight = kaiming_uniform(rng, (embed, 1, 3, 3, 3), 27, dtype)
        self.norm = Norm(embed, "layer", dtype=dtype)

    def forward(self, x):
        return tok_kan_block(x, self)


def _check_tokenizable(x, stride):
    if x.ndim != 5:
        raise ShapeError(f"expected [B,C,D,H,W], got {x.shape}")
    if any(n % stride for n in x.shape[2:]):
        raise ShapeError(f"spatial extents {x.shape[2:]} not divisible by stride {stride}")


def tokens_to_grid(tokens, spatial):
    B, _, E = tokens.shape
    return T.transpose(tokens, (0, 2, 1)).reshape((B, E) + tuple(spatial))


def grid_to_tokens(x):
    B, E = x.shape[:2]
    return T.transpose(x.reshape(B, E, -1), (0, 2, 1))


def tokenize(x, block: TokKanBlock):
    """``[B,C,D,H,W] -> [B, T, E]`` through the strided patch convolution."""
    x = as_tensor(x)
    _check_tokenizable(x, block.stride)
    return grid_to_tokens(block.patch_conv(x))


def tok_kan_block(x, block: TokKanBlock):
    x = as_tensor(x)
    _check_tokenizable(x, block.stride)
    feat = block.patch_conv(x)
    B, E = feat.shape[:2]
    spatial = feat.shape[2:]
    tokens = grid_to_tokens(feat)
    mixed = kan_layer_forward(tokens.reshape(-1, E), block.kan).reshape(B, -1, E)
    mixed = convolve(tokens_to_grid(mixed, spatial), block.dw_weight, None, padding=1, groups=E)
    return normalize(feat + mixed, "layer", block.norm.gain, block.norm.offset)
