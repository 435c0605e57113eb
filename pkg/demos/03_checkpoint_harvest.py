# %% [markdown]
# # Harvesting expert candidates from one training run
#
# A base model is pre-trained on the mixed corpus, then fine-tuned further
# while checkpoints are saved along the way. Different checkpoints end up
# better at different domains; those are the raw material for experts.

# %%
from upit import CorpusSpec, DenseModel, ModelConfig, RngState, TrainConfig, gen_corpus, init_dense_state
from upit.corpus import domain_ppl, task_for
from upit.training import pretrain_dense, train_dense_with_checkpoints

spec = CorpusSpec(n_train=400, n_eval=80, seq_len=12, vocab_size=16)
train, evals = gen_corpus(spec)
print([task_for(d) for d in range(spec.n_domains)])
print("sample", train[0])

cfg = ModelConfig(vocab_size=16, d_h=16, n_layers=2, n_heads=2, d_ff=32, max_seq=16)
model = DenseModel(cfg, init_dense_state(cfg, RngState(0)))
pretrain_dense(model, train, TrainConfig(epochs=3, batch_size=8))
print("after pre-training", domain_ppl(model, evals).round(2))

# %%
harvested = train_dense_with_checkpoints(model, train, TrainConfig(epochs=2, batch_size=8, checkpoint_interval=25))
for ckpt, meta in harvested:
    print(f"step {meta.step:4d}  per-domain ppl {domain_ppl(ckpt.model(), evals).round(2)}")
