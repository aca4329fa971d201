# %% [markdown]
# B-spline bases and a single KAN layer.
#
# Run cell by cell in an editor that understands `# %%`, or top to bottom
# with `python notebooks/01_splines_and_kan.py`.

# %%
import numpy as np

from ukan_ep import tensor as T
from ukan_ep.kan import KanLayer, SplineGrid, bspline_basis, kan_layer_forward

np.set_printoptions(precision=4, suppress=True)

# %%
# cubic basis on 5 intervals over [-1, 1]: 8 functions, knots extend 3 steps past each end
grid = SplineGrid(intervals=5, order=3)
print("knots", grid.knots)
x = np.linspace(-1, 1, 9)
B = bspline_basis(x, grid)
print(B)
print("row sums", B.sum(axis=1))

# %%
# each function lives on order+1 intervals and is zero elsewhere
for j in range(grid.num_basis):
    xs = np.linspace(-1.5, 1.5, 601)
    nz = xs[bspline_basis(xs, grid)[:, j] > 0]
    print(f"B_{j}: support ({nz.min():+.2f}, {nz.max():+.2f})")

# %%
# least-squares fit of sin(pi x) in the span of the basis
xs = np.linspace(-1, 1, 400)
for g in (5, 10, 20):
    Bg = bspline_basis(xs, SplineGrid(intervals=g, order=3))
    coef, *_ = np.linalg.lstsq(Bg, np.sin(np.pi * xs), rcond=None)
    print(f"G={g:2d}  max error {np.abs(Bg @ coef - np.sin(np.pi * xs)).max():.2e}")

# %%
# a KAN layer: every edge is silu(x) * w_base + sum_j c_j B_j(x)
rng = np.random.default_rng(0)
layer = KanLayer(3, 2, rng, grid=grid, dtype=np.float64)
tokens = T.Tensor(rng.uniform(-1, 1, size=(4, 3)))
out = kan_layer_forward(tokens, layer)
print(out.shape)

# %%
# gradients flow into both the base weights and the spline coefficients
grads = T.backward(out.sum())
for name, p in layer.named_parameters():
    print(name, p.shape, float(np.abs(grads[p]).sum()))
