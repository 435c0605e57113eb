# %% [markdown]
# # Growing the expert pool by merging dissimilar parents
#
# Each new expert merges the two current experts whose expert-layer deltas
# (relative to the base) are least alike. DARE drops a random share of each
# delta and rescales the rest, which keeps it unbiased.

# %%
import numpy as np

from upit import ExpertSet, MergeConfig, ModelConfig, RngState, dare, expand_experts, init_dense_state
from upit.expansion import pairwise_similarity

delta = np.ones(10)
print("DARE p=0.5:", dare(delta, 0.5, RngState(0)))
means = np.mean([dare(np.ones(1000), 0.9, RngState(s)) for s in range(2000)], axis=0)
print("mean over 2000 draws at p=0.9:", means.mean().round(3))

# %%
cfg = ModelConfig(vocab_size=16, d_h=8, n_layers=2, n_heads=2, d_ff=12, max_seq=16)
base = init_dense_state(cfg, RngState(0))
gen = np.random.default_rng(0)
experts = []
for _ in range(4):
    e = {k: v.copy() for k, v in base.items()}
    for name in e:
        if ".ffn." in name:
            e[name] = e[name] + gen.normal(size=e[name].shape)
    experts.append(e)
pool = ExpertSet(cfg, base, experts)
print(pairwise_similarity(pool).round(3))

# %% [markdown]
# A child sits between its parents in delta space, so the same extreme pair
# can keep winning until other children pull the picture apart.

# %%
pairs = []
grown = expand_experts(pool, 8, MergeConfig(seed=1), chosen_pairs=pairs)
print("parents chosen:", pairs)
for rec in grown.provenance[4:]:
    print(rec)
