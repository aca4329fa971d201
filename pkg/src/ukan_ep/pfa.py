"""Top-down pyramid feature aggregation over three encoder levels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from . import tensor as T
from .attention import eca_forward, esa_forward
from .nn_ops import ShapeError, trilinear_upsample
from .tensor import Tensor

MODES = ("eca_after_pfa", "eca_before_pfa", "no_eca", "esa_after_pfa", "eca_and_esa", "self_attention")


@dataclass
class PyramidFeatures:
    """Encoder maps from shallowest (index 0) to deepest (index 2)."""

    levels: Sequence[Tensor]

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ShapeError(f"expected 3 pyramid levels, got {len(self.levels)}")
        for shallow, deep in zip(self.levels[:-1], self.levels[1:]):
            if shallow.shape[0] != deep.shape[0]:
                raise ShapeError("batch sizes differ across levels")
            if any(s != 2 * d for s, d in zip(shallow.shape[2:], deep.shape[2:])):
                raise ShapeError(f"levels {shallow.shape} and {deep.shape} are not dyadic")


def fused_width(channels):
    """Channel counts of the fused skips ``(level 1, level 2)`` for widths ``(C1, C2, C3)``."""
    c1, c2, c3 = channels
    return c3 + c2 + c1, c3 + c2


def pfa_fuse(
    feats: PyramidFeatures,
    mode: str = "eca_after_pfa",
    eca: Mapping[int, object] | None = None,
    esa: Mapping[int, object] | None = None,
    attention: Mapping[int, Callable] | None = None,
):
    """Return the fused skips ``(level 1, level 2)``.

    Attention modules are keyed by level (1 or 2). ``eca_before_pfa`` applies
    ECA to the encoder map before it is concatenated; every other mode
    applies its op to the concatenated map.
    """
    if mode not in MODES:
        raise ValueError(f"unknown PFA mode {mode!r}")
    if not isinstance(feats, PyramidFeatures):
        feats = PyramidFeatures(list(feats))

    def recalibrate(level, x):
        if mode == "eca_after_pfa":
            return eca_forward(x, eca[level])
        if mode == "esa_after_pfa":
            return esa_forward(x, esa[level])
        if mode == "eca_and_esa":
            return esa_forward(eca_forward(x, eca[level]), esa[level])
        if mode == "self_attention":
            return attention[level](x)
        return x

    fused = {3: feats.levels[2]}
    for level in (2, 1):
        deep = trilinear_upsample(fused[level + 1])
        enc = feats.levels[level - 1]
        if deep.shape[2:] != enc.shape[2:]:
            raise ShapeError(f"upsampled {deep.shape} does not match encoder level {level} {enc.shape}")
        if mode == "eca_before_pfa":
            enc = eca_forward(enc, eca[level])
        fused[level] = recalibrate(level, T.concat([deep, enc], axis=1))
    return fused[1], fused[2]
