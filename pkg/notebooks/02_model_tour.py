# %% [markdown]
# Variants, parameter counts and FLOPs of the default desk-scale network.

# %%
import numpy as np

from ukan_ep import tensor as T
from ukan_ep.attention import EcaModule, eca_kernel_size
from ukan_ep.model import VARIANTS, ModelConfig, build_model, count_flops, count_params, flop_breakdown, model_forward

SHAPE = (1, 4, 32, 32, 32)

# %%
rows = []
for v in sorted(VARIANTS):
    g = build_model(ModelConfig(variant=v))
    rows.append((v, count_params(g), count_flops(g, SHAPE)))
for v, p, f in rows:
    print(f"{v:26s} {p:>10,d} params {f / 1e9:8.3f} GFLOPs")

# %%
# the two ECA modules sit on the fused skips (56 and 48 channels) and cost one kernel each
ep = build_model(ModelConfig())
print([m.conv1d_weight.shape for m in ep.attention_modules(EcaModule)])
print("k(56) =", eca_kernel_size(56), " k(48) =", eca_kernel_size(48))

# %%
for stage, n in flop_breakdown(ep, SHAPE).items():
    print(f"{stage:10s} {n:>15,d}")

# %%
# a forward pass on noise; logits come back at full resolution
x = np.random.default_rng(0).normal(size=SHAPE).astype(np.float32)
with T.no_grad():
    logits = model_forward(ep, x)
probs = T.softmax(logits, axis=1).data
print(logits.shape, probs.sum(axis=1).min(), probs.sum(axis=1).max())
