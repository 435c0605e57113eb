# %% [markdown]
# # Reverse-mode gradients on a toy transformer
#
# Everything trains through a small numpy autodiff engine. Here we build a
# tiny model, take one backward pass and compare it with central differences.

# %%
import numpy as np

from upit import DenseModel, ModelConfig, RngState, init_dense_state
from upit.numerics import Parameter, backward, finite_difference_grad, relative_error
from upit.training import next_token_loss

cfg = ModelConfig(vocab_size=8, d_h=4, n_layers=1, n_heads=2, d_ff=6, max_seq=8)
model = DenseModel(cfg, init_dense_state(cfg, RngState(0)))
batch = np.array([[1, 2, 3, 4, 5], [7, 6, 5, 4, 3]])


def loss():
    return next_token_loss(model.forward(batch), batch)


print("loss", loss().item())

# %%
params = list(model.params.values())
grads = backward(loss(), params)
for p in params:
    fd = finite_difference_grad(lambda _: loss().item(), p)
    print(f"{p.name:28s} rel err {relative_error(grads[p.name], fd):.1e}")

# %% [markdown]
# The engine is small enough to poke at directly.

# %%
w = Parameter([1.0, -2.0, 0.5], "w")
y = (w * w).sum() + w.log_sigmoid().mean()
print(backward(y, [w])["w"])
