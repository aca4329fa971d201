"""UKAN-EP and its ablation variants built from one configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import EcaModule, EsaModule, SpatialSelfAttention, eca_forward, esa_forward
from .kan import SplineGrid, TokKanBlock
from .module import Conv, Module, Norm
from .nn_ops import ShapeError, max_pool3d, trilinear_upsample
from .pfa import PyramidFeatures, fused_width, pfa_fuse
from .tensor import as_tensor, counting_flops, flop_scope, no_grad

# variant -> (PFA mode or None, attention after each encoder block, attention on raw skips)
VARIANTS = {
    "ukan": (None, None, None),
    "ukan_ep_eca_after_pfa": ("eca_after_pfa", None, None),
    "ukan_ep_eca_before_pfa": ("eca_before_pfa", None, None),
    "ukan_pfa": ("no_eca", None, None),
    "ukan_eca_after_conv": (None, "eca", None),
    "ukan_eca_after_skip": (None, None, "eca"),
    "ukan_pfa_esa": ("esa_after_pfa", None, None),
    "ukan_esa": (None, "esa", None),
    "ukan_pfa_eca_esa": ("eca_and_esa", None, None),
    "ukan_eca_esa": (None, "eca_esa", None),
    "ukan_pfa_selfattn": ("self_attention", None, None),
    "ukan_selfattn": (None, "selfattn", None),
}
DOWNSAMPLE = 16


@dataclass
class ModelConfig:
    variant: str = "ukan_ep_eca_after_pfa"
    in_channels: int = 4
    num_classes: int = 5
    encoder_channels: tuple = (8, 16, 32)
    token_dims: tuple = (64, 96)
    spline_intervals: int = 5
    spline_order: int = 3
    attention_heads: int = 1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.token_dims = tuple(int(c) for c in self.token_dims)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        ch = self.encoder_channels
        if len(ch) != 3 or not ch[0] < ch[1] < ch[2]:
            raise ValueError(f"encoder_channels must be 3 strictly increasing widths, got {ch}")
        if len(self.token_dims) != 2:
            raise ValueError(f"token_dims must have 2 entries, got {self.token_dims}")
        if min(ch + self.token_dims) < 1 or self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("dimensions must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def grid(self):
        return SplineGrid(-1.0, 1.0, self.spline_intervals, self.spline_order)

    def to_dict(self):
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["token_dims"] = list(self.token_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys {sorted(unknown)}")
        return cls(**d)


class ConvBlock(Module):
    """(3x3x3 conv -> instance norm -> ReLU) twice."""

    def __init__(self, c_in, c_out, rng, dtype):
        self.conv1 = Conv(c_in, c_out, 3, rng, padding=1, dtype=dtype)
        self.norm1 = Norm(c_out, "instance", dtype)
        self.conv2 = Conv(c_out, c_out, 3, rng, padding=1, dtype=dtype)
        self.norm2 = Norm(c_out, "instance", dtype)
        self.c_out = c_out

    def forward(self, x):
        x = T.relu(self.norm1(self.conv1(x)))
        return T.relu(self.norm2(self.conv2(x)))


def _attention_stack(kind, channels, rng, heads, dtype):
    mods = {}
    if kind in ("eca", "eca_esa"):
        mods["eca"] = EcaModule(channels, rng, dtype=dtype)
    if kind in ("esa", "eca_esa"):
        mods["esa"] = EsaModule(rng, dtype=dtype)
    if kind == "selfattn":
        mods["selfattn"] = SpatialSelfAttention(channels, rng, heads=heads, dtype=dtype)
    return mods


def _apply_stack(mods, x):
    # channel weighting first, then spatial
    if "eca" in mods:
        x = eca_forward(x, mods["eca"])
    if "esa" in mods:
        x = esa_forward(x, mods["esa"])
    if "selfattn" in mods:
        x = mods["selfattn"](x)
    return x


class _Stack(Module):
    def __init__(self, mods):
        for key, mod in mods.items():
            setattr(self, key, mod)

    def forward(self, x):
        return _apply_stack(vars(self), x)


class UKanEP(Module):
    """Encoder (3 conv levels), Tok-KAN bottleneck (2 down, 2 up), skip-fused decoder."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        grid = config.grid
        c1, c2, c3 = config.encoder_channels
        e1, e2 = config.token_dims
        pfa_mode, enc_attn, skip_attn = VARIANTS[config.variant]
        self.pfa_mode = pfa_mode
        heads = config.attention_heads

        self.enc1 = ConvBlock(config.in_channels, c1, rng, dtype)
        self.enc2 = ConvBlock(c1, c2, rng, dtype)
        self.enc3 = ConvBlock(c2, c3, rng, dtype)
        self.enc_attn = {}
        if enc_attn:
            for lvl, c in zip("123", (c1, c2, c3)):
                self.enc_attn[lvl] = _Stack(_attention_stack(enc_attn, c, rng, heads, dtype))

        self.tok1 = TokKanBlock(c3, e1, rng, grid, stride=2, dtype=dtype)
        self.tok2 = TokKanBlock(e1, e2, rng, grid, stride=2, dtype=dtype)
        self.dtok1 = TokKanBlock(e2 + e1, e1, rng, grid, stride=1, dtype=dtype)
        self.dtok2 = TokKanBlock(e1 + c3, c3, rng, grid, stride=1, dtype=dtype)

        self.pfa_eca, self.pfa_esa, self.pfa_attn = {}, {}, {}
        if pfa_mode is None:
            s1, s2 = c1, c2
        else:
            s1, s2 = fused_width((c1, c2, c3))
            widths = {"1": s1, "2": s2}
            if pfa_mode == "eca_before_pfa":
                widths = {"1": c1, "2": c2}
            if pfa_mode in ("eca_after_pfa", "eca_before_pfa", "eca_and_esa"):
                self.pfa_eca = {k: EcaModule(w, rng, dtype=dtype) for k, w in widths.items()}
            if pfa_mode in ("esa_after_pfa", "eca_and_esa"):
                self.pfa_esa = {k: EsaModule(rng, dtype=dtype) for k in widths}
            if pfa_mode == "self_attention":
                self.pfa_attn = {k: SpatialSelfAttention(w, rng, heads=heads, dtype=dtype) for k, w in widths.items()}
        self.skip_eca = {"1": EcaModule(c1, rng, dtype=dtype), "2": EcaModule(c2, rng, dtype=dtype)} if skip_attn else {}

        self.dec2 = ConvBlock(c3 + s2, (c3 + s2) // 2, rng, dtype)
        self.dec1 = ConvBlock(self.dec2.c_out + s1, (self.dec2.c_out + s1) // 2, rng, dtype)
        self.head = Conv(self.dec1.c_out, config.num_classes, 1, rng, dtype=dtype)

    def forward(self, x):
        return model_forward(self, x)

    def describe(self):
        """Ordered ``(parameter name, shape)`` table."""
        return [(name, p.shape) for name, p in self.named_parameters()]

    def attention_modules(self, kind):
        return [m for m in self.modules() if isinstance(m, kind)]


NetworkGraph = UKanEP


def build_model(config: ModelConfig) -> UKanEP:
    return UKanEP(config)


def model_forward(graph: UKanEP, volume):
    x = as_tensor(volume)
    cfg = graph.config
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected [B,{cfg.in_channels},D,H,W], got {x.shape}")
    if any(n % DOWNSAMPLE for n in x.shape[2:]):
        raise ShapeError(f"spatial extents {x.shape[2:]} must be divisible by {DOWNSAMPLE}")

    def encode(name, block, inp):
        with flop_scope(name):
            out = block(inp)
        lvl = name[-1]
        if lvl in graph.enc_attn:
            with flop_scope(f"{name}.attn"):
                out = graph.enc_attn[lvl](out)
        return out

    x1 = encode("enc1", graph.enc1, x)
    with flop_scope("pool1"):
        p = max_pool3d(x1)
    x2 = encode("enc2", graph.enc2, p)
    with flop_scope("pool2"):
        p = max_pool3d(x2)
    x3 = encode("enc3", graph.enc3, p)

    with flop_scope("tok1"):
        t1 = graph.tok1(x3)
    with flop_scope("tok2"):
        t2 = graph.tok2(t1)
    with flop_scope("dtok1"):
        d = graph.dtok1(T.concat([trilinear_upsample(t2), t1], axis=1))
    with flop_scope("dtok2"):
        d = graph.dtok2(T.concat([trilinear_upsample(d), x3], axis=1))

    with flop_scope("skips"):
        if graph.pfa_mode is not None:
            s1, s2 = pfa_fuse(
                PyramidFeatures([x1, x2, x3]),
                graph.pfa_mode,
                eca={int(k): m for k, m in graph.pfa_eca.items()},
                esa={int(k): m for k, m in graph.pfa_esa.items()},
                attention={int(k): m for k, m in graph.pfa_attn.items()},
            )
        else:
            s1, s2 = x1, x2
        if graph.skip_eca:
            s1 = eca_forward(s1, graph.skip_eca["1"])
            s2 = eca_forward(s2, graph.skip_eca["2"])

    with flop_scope("dec2"):
        d = graph.dec2(T.concat([trilinear_upsample(d), s2], axis=1))
    with flop_scope("dec1"):
        d = graph.dec1(T.concat([trilinear_upsample(d), s1], axis=1))
    with flop_scope("head"):
        return graph.head(d)


def count_params(graph) -> int:
    return int(sum(p.size for p in graph.parameters()))


def flop_breakdown(graph, input_shape):
    """FLOPs per top-level stage for one forward pass on ``input_shape``."""
    dtype = np.dtype(graph.config.dtype) if hasattr(graph, "config") else np.float64
    x = np.zeros(input_shape, dtype=dtype)
    with no_grad(), counting_flops() as counter:
        graph(x)
    return dict(counter.by_scope)


def count_flops(graph, input_shape) -> int:
    """Twice the multiply-accumulates of contractions plus one per elementwise output."""
    return int(sum(flop_breakdown(graph, input_shape).values()))
