"""Spatial kernels on channel-first tensors ``[B, C, *spatial]``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, _check_dtypes, as_tensor, from_op, note_branch, reduce


@dataclass(frozen=True)
class ConvSpec:
    spatial_rank: int = 3
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1

    @classmethod
    def make(cls, spatial_rank, stride=1, padding=0, groups=1):
        as_tuple = lambda v: tuple(v) if isinstance(v, (tuple, list)) else (int(v),) * spatial_rank
        return cls(spatial_rank, as_tuple(stride), as_tuple(padding), int(groups))


def conv_output_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def convolve(x, weight, bias=None, spec: ConvSpec | None = None, *, stride=1, padding=0, groups=1):
    """Cross-correlation with zero padding.

    ``weight`` is ``[C_out, C_in / groups, *kernel]``. The kernel is applied
    one offset at a time, so memory stays at one shifted copy of the input.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    params = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        params.append(bias)
    _check_dtypes(*params)
    rank = weight.ndim - 2
    if spec is None:
        spec = ConvSpec.make(rank, stride, padding, groups)
    if spec.spatial_rank != rank or x.ndim != rank + 2:
        raise ShapeError(f"input {x.shape} / weight {weight.shape} do not match spatial rank {spec.spatial_rank}")
    B, c_in = x.shape[:2]
    c_out, c_in_g = weight.shape[:2]
    g = spec.groups
    if c_in % g or c_out % g or c_in // g != c_in_g:
        raise ShapeError(f"channels {c_in}->{c_out} incompatible with groups={g} and weight {weight.shape}")
    ks = weight.shape[2:]
    in_sp = x.shape[2:]
    for n, k, p in zip(in_sp, ks, spec.padding):
        if k > n + 2 * p:
            raise ShapeError(f"kernel {ks} larger than padded input {in_sp}")
    out_sp = tuple(conv_output_extent(n, k, s, p) for n, k, s, p in zip(in_sp, ks, spec.stride, spec.padding))

    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in spec.padding])
    w = weight.data
    depthwise = c_in_g == 1 and c_out == c_in == g

    def window(offs):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offs, spec.stride, out_sp)
        )

    offsets = list(itertools.product(*(range(k) for k in ks)))
    # accumulate as [C_out, B, *out] so each tensordot result adds in place
    acc = np.zeros((c_out, B) + out_sp, dtype=xp.dtype)
    for offs in offsets:
        xs = xp[window(offs)]
        wk = w[(slice(None), slice(None)) + offs]
        if depthwise:
            acc += wk[:, 0].reshape((c_out, 1) + (1,) * rank) * np.swapaxes(xs, 0, 1)
        elif g == 1:
            acc += np.tensordot(wk, xs, axes=([1], [1]))
        else:
            xg = xs.reshape((B, g, c_in_g) + out_sp)
            wg = wk.reshape(g, c_out // g, c_in_g)
            part = np.einsum("goc,bgc...->gob...", wg, xg)
            acc += part.reshape((c_out, B) + out_sp)
    out = np.ascontiguousarray(np.swapaxes(acc, 0, 1))
    if bias is not None:
        out += bias.data.reshape((1, c_out) + (1,) * rank)

    def vjp(gout):
        gacc = np.swapaxes(gout, 0, 1)  # [C_out, B, *out]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        sp_axes = tuple(range(2, 2 + rank))
        for offs in offsets:
            win = window(offs)
            xs = xp[win]
            wk = w[(slice(None), slice(None)) + offs]
            if depthwise:
                gw[(slice(None), 0) + offs] = (gacc * np.swapaxes(xs, 0, 1)).reshape(c_out, -1).sum(axis=1)
                gxp[win] += np.swapaxes(wk[:, 0].reshape((c_out, 1) + (1,) * rank) * gacc, 0, 1)
            elif g == 1:
                gw[(slice(None), slice(None)) + offs] = np.tensordot(
                    gacc, xs, axes=([1] + [a for a in sp_axes], [0] + [a for a in sp_axes])
                )
                gxp[win] += np.swapaxes(np.tensordot(wk, gacc, axes=([0], [0])), 0, 1)
            else:
                xg = xs.reshape((B, g, c_in_g) + out_sp)
                gg = gacc.reshape((g, c_out // g, B) + out_sp)
                wg = wk.reshape(g, c_out // g, c_in_g)
                sp_sum = list(range(2, 2 + rank))
                gw[(slice(None), slice(None)) + offs] = np.concatenate(
                    [np.tensordot(gg[i], xg[:, i], axes=([1] + sp_sum, [0] + sp_sum)) for i in range(g)]
                )
                gx = np.einsum("goc,gob...->bgc...", wg, gg)
                gxp[win] += gx.reshape((B, c_in) + out_sp)
        crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(spec.padding, in_sp))
        grads = [gxp[crop], gw]
        if bias is not None:
            grads.append(gout.sum(axis=(0,) + sp_axes))
        return tuple(grads)

    macs = c_out * c_in_g * int(np.prod(ks)) * B * int(np.prod(out_sp))
    flops = 2 * macs + (out.size if bias is not None else 0)
    return from_op(out, tuple(params), vjp, flops=flops)


def max_pool3d(x, window=2):
    x = as_tensor(x)
    if window != 2:
        raise ValueError("only window 2 is supported")
    if x.ndim != 5:
        raise ShapeError(f"max_pool3d expects [B,C,D,H,W], got {x.shape}")
    B, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"spatial extents {x.shape[2:]} must be even")
    v = x.data.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
    v = v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, D // 2, H // 2, W // 2, 8)
    idx = v.argmax(axis=-1)
    note_branch(idx)
    data = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gv = np.zeros_like(v)
        np.put_along_axis(gv, idx[..., None], g[..., None], axis=-1)
        gv = gv.reshape(B, C, D // 2, H // 2, W // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gv.reshape(B, C, D, H, W),)

    return from_op(np.ascontiguousarray(data), (x,), vjp)


def _upsample_axis(v, axis):
    # align_corners=False at factor 2: even outputs sit at i - 1/4, odd at i + 1/4,
    # neighbours clamped at the edges
    n = v.shape[axis]
    prev = np.take(v, np.maximum(np.arange(n) - 1, 0), axis=axis)
    nxt = np.take(v, np.minimum(np.arange(n) + 1, n - 1), axis=axis)
    even = 0.75 * v + 0.25 * prev
    odd = 0.75 * v + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(v.shape)
    shape[axis] = 2 * n
    return out.reshape(shape).astype(v.dtype, copy=False)


def _upsample_axis_vjp(g, axis):
    n2 = g.shape[axis]
    n = n2 // 2
    shape = list(g.shape)
    shape[axis : axis + 1] = [n, 2]
    gg = g.reshape(shape)
    ge = np.take(gg, 0, axis=axis + 1)
    go = np.take(gg, 1, axis=axis + 1)
    out = 0.75 * (ge + go)
    out = np.moveaxis(out, axis, 0).copy()
    cp = np.moveaxis(0.25 * ge, axis, 0)
    cn = np.moveaxis(0.25 * go, axis, 0)
    # even outputs read the clamped previous sample, odd outputs the clamped next one
    out[0] += cp[0]
    out[: n - 1] += cp[1:]
    out[1:] += cn[: n - 1]
    out[n - 1] += cn[n - 1]
    return np.moveaxis(out, 0, axis).astype(g.dtype, copy=False)


def trilinear_upsample(x, factor=2):
    x = as_tensor(x)
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    axes = tuple(range(2, x.ndim))
    data = x.data
    for ax in axes:
        data = _upsample_axis(data, ax)

    def vjp(g):
        for ax in reversed(axes):
            g = _upsample_axis_vjp(g, ax)
        return (g,)

    return from_op(np.ascontiguousarray(data), (x,), vjp)


def global_avg_pool(x):
    x = as_tensor(x)
    return reduce(x, "mean", tuple(range(2, x.ndim)))


def _standardize(x, axes, eps):
    v = x.data
    mu = v.mean(axis=axes, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + v.dtype.type(eps))
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return from_op(y.astype(v.dtype, copy=False), (x,), vjp)


def normalize(x, kind, gain, offset, epsilon=1e-5):
    """Layer norm over the channel axis (axis 1) or instance norm over spatial axes.

    ``gain`` and ``offset`` have one entry per channel.
    """
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    if x.ndim < 2:
        raise ShapeError("normalize expects a channel axis at position 1")
    C = x.shape[1]
    if gain.shape != (C,) or offset.shape != (C,):
        raise ShapeError(f"gain/offset must have shape ({C},), got {gain.shape} and {offset.shape}")
    if kind == "layer":
        axes = (1,)
    elif kind == "instance":
        if x.ndim < 3:
            raise ShapeError("instance norm needs spatial axes")
        axes = tuple(range(2, x.ndim))
    else:
        raise ValueError(f"unknown normalization {kind!r}")
    y = _standardize(x, axes, epsilon)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    return y * gain.reshape(bshape) + offset.reshape(bshape)
