# %% [markdown]
# # Picking each expert's own training data
#
# A small seed set is scored by every expert. Each sample goes to the expert
# with the lowest perplexity on it, unless that expert's bucket is full.

# %%
import numpy as np

from upit import PerplexityTable, assign_buckets
from upit.selection import default_capacity

table = PerplexityTable([10, 11, 12, 13], [[2.0, 9.0], [3.0, 8.0], [4.0, 4.5], [1.0, 1.0]])
out = assign_buckets(table, capacity=default_capacity(4, 2))
for b in out.buckets:
    print(f"expert {b.expert_index}: {b.sample_ids}")
print("dropped", out.dropped)

# %% [markdown]
# With real models, the table comes from `build_ppl_table`.

# %%
from upit import CorpusSpec, DenseModel, ModelConfig, RngState, gen_corpus, init_dense_state
from upit.selection import build_ppl_table, sample_seed

train, _ = gen_corpus(CorpusSpec(n_train=300, n_eval=0, seq_len=12, vocab_size=16))
cfg = ModelConfig(vocab_size=16, d_h=8, n_layers=2, n_heads=2, d_ff=12, max_seq=16)
models = [DenseModel(cfg, init_dense_state(cfg, RngState(s))) for s in range(3)]
seed = sample_seed(train, 0.05, RngState(7))
ppl = build_ppl_table(models, seed)
print(np.round(ppl.values[:5], 2))
print([len(b.sample_ids) for b in assign_buckets(ppl, default_capacity(len(seed), 3)).buckets])
