"""Losses, the Adam optimizer and the three training loops.

* dense instruction tuning that harvests interval checkpoints,
* expert pre-optimization (driven from :mod:`upit.upcycle`),
* MoE post-training with a load-balancing term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import DenseModel, ModelConfig, MoEModel, is_lora_name
from .numerics import Parameter, RngState, Tensor, as_tensor, backward, pick

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 2
    batch_size: int = 16
    checkpoint_interval: int = 25
    alpha: float = 0.5
    load_balance_coeff: float = 0.01
    seed: int = 0
    clip_norm: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.load_balance_coeff < 0:
            raise ValueError("load_balance_coeff must be >= 0")

    @property
    def rng(self) -> RngState:
        return RngState(self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    lm: float
    aux: float = 0.0
    load_balance: float = 0.0
    total: float = 0.0


@dataclass
class CheckpointMeta:
    step: int
    epoch: float
    loss: float
    tag: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DenseCheckpoint:
    """Named-tensor snapshot of a dense model."""

    config: ModelConfig
    state: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def model(self) -> DenseModel:
        return DenseModel(self.config, self.state)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def lm_loss(logits: Tensor, targets) -> Tensor:
    """Mean categorical cross-entropy of ``logits [..., V]`` against ``targets [...]``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} do not match targets {targets.shape}")
    if targets.size == 0:
        raise ValueError("no target positions")
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise IndexError("target out of range")
    return -pick(logits.log_softmax(axis=-1), targets).mean()


def next_token_loss(logits: Tensor, tokens) -> Tensor:
    """Causal LM loss: position t predicts token t+1."""
    tokens = np.asarray(tokens, dtype=np.int64)
    return lm_loss(logits[..., :-1, :], tokens[..., 1:])


def aux_router_loss(router_logits) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logit)`` against an all-ones target."""
    x = as_tensor(router_logits)
    if x.data.size == 0:
        raise ValueError("aux loss needs at least one token position")
    return -x.log_sigmoid().mean()


def combined_preopt_loss(lm, aux, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return lm * alpha + aux * (1.0 - alpha)


def dispatch_fractions(selected: np.ndarray, k: int) -> np.ndarray:
    """Fraction of top-k slots given to each expert; sums to 1."""
    selected = np.asarray(selected, dtype=bool).reshape(-1, selected.shape[-1])
    return selected.sum(axis=0) / (selected.shape[0] * k)


def mean_router_probs(scores: Tensor) -> Tensor:
    s = as_tensor(scores)
    return s.reshape(-1, s.shape[-1]).softmax(axis=-1).mean(axis=0)


def load_balance_loss(f, P, n: int, tol: float = 1e-6):
    """``n * sum_i f_i * P_i``; returns a Tensor when ``P`` is one."""
    f_arr = np.asarray(f, dtype=np.float64)
    P_val = P.data if isinstance(P, Tensor) else np.asarray(P, dtype=np.float64)
    if f_arr.shape != (n,) or P_val.shape != (n,):
        raise ValueError(f"expected f and P of length {n}, got {f_arr.shape} and {P_val.shape}")
    if abs(f_arr.sum() - 1.0) > tol or abs(P_val.sum() - 1.0) > tol:
        raise ValueError("dispatch fractions and router probabilities must each sum to 1")
    if isinstance(P, Tensor):
        return (P * f_arr).sum() * float(n)
    return float(n * np.dot(f_arr, P_val))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with a constant learning rate and an optional global-norm clip."""

    def __init__(self, params: Sequence[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = 1.0):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        """Apply one update from the current ``.grad`` fields; returns the pre-clip grad norm."""
        grads = [p.grad for p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
            grads = [g * scale for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------


def as_token_matrix(corpus) -> np.ndarray:
    """Stack a corpus (token lists or objects with ``.tokens``) into an int matrix."""
    rows = [np.asarray(getattr(s, "tokens", s), dtype=np.int64) for s in corpus]
    if not rows:
        raise ValueError("empty corpus")
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError("training samples must share one sequence length")
    return np.stack(rows)


def epoch_batches(n: int, batch_size: int, rng: RngState, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the last partial batch is dropped.

    When the data is smaller than one batch, the whole (shuffled) set is a batch.
    """
    order = rng.derive("shuffle", epoch).generator().permutation(n)
    bs = min(batch_size, n)
    return [order[i : i + bs] for i in range(0, n - bs + 1, bs)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return n // min(batch_size, n)


def run_training(
    params: Sequence[Parameter],
    data: np.ndarray,
    cfg: TrainConfig,
    loss_fn: Callable[[np.ndarray], tuple[Tensor, LossBreakdown]],
    on_step: Callable[[int, float, LossBreakdown], None] | None = None,
    rng: RngState | None = None,
) -> list[LossBreakdown]:
    """Generic loop: shuffle, compute loss, backprop into ``params``, Adam step."""
    rng = rng or cfg.rng
    opt = Adam(params, cfg.learning_rate, clip_norm=cfg.clip_norm)
    per_epoch = steps_per_epoch(len(data), cfg.batch_size)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(len(data), cfg.batch_size, rng, epoch):
            loss, parts = loss_fn(data[idx])
            backward(loss, params)
            opt.step()
            step += 1
            history.append(parts)
            if on_step is not None:
                on_step(step, step / per_epoch, parts)
    return history


# ---------------------------------------------------------------------------
# Dense instruction tuning with checkpoint harvesting
# ---------------------------------------------------------------------------


def checkpoint_steps(total_steps: int, interval: int) -> list[int]:
    steps = list(range(interval, total_steps + 1, interval))
    if total_steps > 0 and (not steps or steps[-1] != total_steps):
        steps.append(total_steps)
    return steps


def train_dense_with_checkpoints(
    model: DenseModel,
    corpus,
    cfg: TrainConfig,
    loss_log: list | None = None,
    tag: str = "prepare",
    save_steps: Sequence[int] | None = None,
) -> list[tuple[DenseCheckpoint, CheckpointMeta]]:
    """Fine-tune ``model`` in place with the LM loss, snapshotting every ``checkpoint_interval`` steps.

    ``save_steps`` replaces the interval schedule with explicit step numbers.
    """
    data = as_token_matrix(corpus)
    params = [model.params[n] for n in model.trainable_names()]
    per_epoch = steps_per_epoch(len(data), cfg.batch_size)
    if save_steps is None:
        save_at = set(checkpoint_steps(per_epoch * cfg.epochs, cfg.checkpoint_interval))
    else:
        save_at = set(int(s) for s in save_steps)
    out: list[tuple[DenseCheckpoint, CheckpointMeta]] = []

    def loss_fn(batch):
        loss = next_token_loss(model.forward(batch), batch)
        v = loss.item()
        return loss, LossBreakdown(lm=v, total=v)

    def on_step(step, epoch, parts):
        if loss_log is not None:
            loss_log.append({"step": step, "epoch": epoch, **asdict(parts)})
        if step in save_at:
            meta = CheckpointMeta(step=step, epoch=epoch, loss=parts.total, tag=tag)
            out.append((DenseCheckpoint(model.config, model.state_dict(), meta.to_dict()), meta))
            log.debug("checkpoint at step %d (loss %.4f)", step, parts.total)

    run_training(params, data, cfg, loss_fn, on_step)
    return out


def pretrain_dense(model: DenseModel, corpus, cfg: TrainConfig, loss_log: list | None = None) -> DenseModel:
    """Train every non-LoRA parameter with the LM loss, producing the shared base.

    LoRA factors are left alone: with ``B = 0`` they receive no gradient anyway.
    """
    data = as_token_matrix(corpus)
    params = [p for n, p in model.params.items() if not is_lora_name(n)]

    def loss_fn(batch):
        loss = next_token_loss(model.forward(batch), batch)
        v = loss.item()
        return loss, LossBreakdown(lm=v, total=v)

    def on_step(step, epoch, parts):
        if loss_log is not None:
            loss_log.append({"step": step, "epoch": epoch, **asdict(parts)})

    run_training(params, data, cfg, loss_fn, on_step)
    return model


# ---------------------------------------------------------------------------
# MoE post-training
# ---------------------------------------------------------------------------


def moe_loss(moe: MoEModel, batch: np.ndarray, load_balance_coeff: float) -> tuple[Tensor, LossBreakdown]:
    """LM loss plus ``load_balance_coeff`` times the load-balance loss averaged over layers."""
    logits, routing = moe.forward(batch, return_routing=True)
    lm = next_token_loss(logits, batch)
    lb = None
    for scores, selected in routing:
        term = load_balance_loss(dispatch_fractions(selected, moe.k), mean_router_probs(scores), moe.n_experts)
        lb = term if lb is None else lb + term
    lb = lb * (1.0 / len(routing))
    total = lm + lb * load_balance_coeff if load_balance_coeff else lm
    return total, LossBreakdown(lm=lm.item(), load_balance=lb.item(), total=total.item())


def posttrain_moe(moe: MoEModel, corpus, cfg: TrainConfig, loss_log: list | None = None) -> MoEModel:
    """Fine-tune the assembled MoE (router included) on the full corpus."""
    data = as_token_matrix(corpus)
    params = [moe.params[n] for n in moe.trainable_names()]

    def on_step(step, epoch, parts):
        if loss_log is not None:
            loss_log.append({"step": step, "epoch": epoch, **asdict(parts)})

    run_training(params, data, cfg, lambda b: moe_loss(moe, b, cfg.load_balance_coeff), on_step)
    return moe


def evaluate_lm(model, corpus, batch_size: int = 64) -> float:
    """Mean next-token loss over a corpus, without building a graph for training."""
    data = as_token_matrix(corpus)
    total, count = 0.0, 0
    for i in range(0, len(data), batch_size):
        batch = data[i : i + batch_size]
        total += next_token_loss(model.forward(batch), batch).item() * len(batch)
        count += len(batch)
    return total / count
