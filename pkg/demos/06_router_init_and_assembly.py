# %% [markdown]
# # Pre-training routing vectors and assembling the MoE
#
# Every expert gets a routing vector per layer. On the expert's own bucket the
# vector is trained to fire (a sigmoid target of 1) while the expert layer keeps
# its language-modelling loss. The vectors are then stacked into routers.

# %%
import numpy as np

from upit import CorpusSpec, DenseModel, ExpertSet, ModelConfig, RngState, TrainConfig, UpcycleConfig, gen_corpus, init_dense_state
from upit.training import pretrain_dense
from upit.upcycle import assemble_moe, assemble_router, init_routing_vectors, preoptimize_expert

train, _ = gen_corpus(CorpusSpec(n_train=200, n_eval=0, seq_len=12, vocab_size=16))
cfg = ModelConfig(vocab_size=16, d_h=8, n_layers=2, n_heads=2, d_ff=12, max_seq=16)
base = pretrain_dense(DenseModel(cfg, init_dense_state(cfg, RngState(0))), train, TrainConfig(epochs=2, batch_size=8))

vectors = init_routing_vectors(4, cfg, RngState(1))
buckets = [[s for s in train if s.domain == d][:5] for d in range(4)]
experts, trained = [], []
for d in range(4):
    log = []
    state, rv = preoptimize_expert(base.state_dict(), cfg, vectors[d], buckets[d], TrainConfig(epochs=4, batch_size=1, learning_rate=3e-4), log)
    print(f"expert {d}: aux {log[0]['aux']:.4f} -> {log[-1]['aux']:.4f}")
    experts.append(state)
    trained.append(rv)

# %%
routers = assemble_router(trained)
moe = assemble_moe(ExpertSet(cfg, base.state_dict(), experts), routers, UpcycleConfig(n_experts=4, k=2))
_, routing = moe.forward(np.array([s.tokens for s in train[:8]]), return_routing=True)
print("router shape", routers[0].shape)
print(routing[1][1].astype(int)[:12])
