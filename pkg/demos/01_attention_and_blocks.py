"""A tour of the attention and enhancement blocks on random inputs.

Run with ``python demos/01_attention_and_blocks.py``.
"""
# %%
import numpy as np

from faenet import blocks as B
from faenet import gradsuite
from faenet.blocks import ParamFactory
from faenet.tensor import Tensor

rng = np.random.default_rng(0)

# %% [markdown]
# The spatial-attention gate squeezes one map to a single channel, mixes
# every location with a fully connected layer and squashes the result
# into (0, 1).  The gate then scales a second map location by location.

# %%
sa = B.make_sa(ParamFactory(0), channels=8, height=6, width=6)
x = Tensor(rng.standard_normal((1, 8, 6, 6)))
y = Tensor(rng.standard_normal((1, 8, 6, 6)))
gate = B.sa_gate(x, sa).data[0]
print("gate range:", gate.min().round(3), "to", gate.max().round(3))
z = B.sa_block(x, y, sa).data
print("|z| <= |y| everywhere:", bool(np.all(np.abs(z) <= np.abs(y.data))))

# with zero fc weights the gate is exactly one half
sa.fc_weight.data[:] = 0.0
print("zero weights give 0.5*y:", np.array_equal(B.sa_block(x, y, sa).data, 0.5 * y.data))

# %% [markdown]
# The shallow enhancement block keeps its input shape; the aggregation
# module fuses a stride-8 map with a stride-16 map at either resolution.

# %%
sfe = B.make_sfe(ParamFactory(1), 16, se_reduction=4)
print("sfe:", B.sfe_block(Tensor(rng.standard_normal((2, 16, 12, 12))), sfe).shape)

for variant in ("v1", "v2"):
    fam = B.make_fam(ParamFactory(2), variant, 16, 32, 8, 16, (12, 12))
    out = B.fam(Tensor(rng.standard_normal((2, 16, 12, 12))), Tensor(rng.standard_normal((2, 32, 6, 6))), fam)
    print(f"fam {variant}:", out.shape)

# %% [markdown]
# The dual-path unit returns a residual state and a growing dense state.

# %%
dfe = B.make_dfe(ParamFactory(3), residual_in=16, dense_in=0, residual_width=16, growth=4, stride=2)
res, dense = B.dfe_block(Tensor(rng.standard_normal((1, 16, 10, 10))), None, dfe)
print("dfe residual", res.shape, "dense", dense.shape)

# %% [markdown]
# Every block passes a central-difference gradient check.

# %%
for r in gradsuite.run_suite(1e-4, ["sa_block", "se_recalibrate", "sfe_block", "dfe_block", "fam_v1", "fam_v2"]):
    print(f"{r.name:16s} max rel err {r.report.max_error:.1e}")
