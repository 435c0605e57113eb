# %% [markdown]
# # Top-k routing and the dense/MoE identity
#
# A router scores every expert per token; the top k are kept and their
# weights renormalized. If every expert is the same FFN the mixture collapses
# back to the dense model, whatever the router says.

# %%
import numpy as np

from upit import DenseModel, ModelConfig, RngState, init_dense_state, vanilla_upcycle
from upit.model import top_k_gate

scores = np.array([2.0, -1.0, 2.0, 0.5])
chosen, weights = top_k_gate(scores, k=2)
print("chosen", chosen, "weights", weights.round(3))  # ties go to the lower index

# %%
cfg = ModelConfig(vocab_size=16, d_h=8, n_layers=2, n_heads=2, d_ff=12, max_seq=16)
state = init_dense_state(cfg, RngState(1))
dense = DenseModel(cfg, state)
prompt = np.array([3, 1, 4, 1, 5, 9, 2, 6])
for n in (2, 4, 8):
    moe = vanilla_upcycle(state, cfg, n, k=2, rng=RngState(n))
    diff = np.abs(moe.forward(prompt).data - dense.forward(prompt).data).max()
    print(f"n={n}: max |moe - dense| = {diff:.1e}")

# %% [markdown]
# Per-layer routing decisions come back with `return_routing=True`.

# %%
_, routing = moe.forward(prompt, return_routing=True)
scores, selected = routing[0]
print(selected.astype(int))
