"""Router pre-optimization, MoE assembly and the vanilla-upcycling baseline."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .expansion import ExpertSet
from .model import FFN_MATS, DenseModel, ModelConfig, MoEModel, expert_layer_names, is_expert_name, lora_shapes
from .numerics import Parameter, RngState, Tensor, stack
from .training import (
    LossBreakdown,
    TrainConfig,
    as_token_matrix,
    aux_router_loss,
    combined_preopt_loss,
    next_token_loss,
    run_training,
)

log = logging.getLogger(__name__)

ROUTER_INIT_STD = 0.02


@dataclass(frozen=True)
class UpcycleConfig:
    mode: str = "ffn"
    n_experts: int = 8
    k: int = 2
    preopt: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=3e-4, epochs=4, batch_size=1))
    backbone_merge: str = "auto"
    gate_mode: str = "topk_softmax"

    def __post_init__(self):
        if self.mode not in ("ffn", "lora"):
            raise ValueError(f"unknown upcycling mode {self.mode!r}")
        merge = self.backbone_merge
        if merge == "auto":
            merge = "frozen-base" if self.mode == "lora" else "uniform-average"
            object.__setattr__(self, "backbone_merge", merge)
        if merge not in ("uniform-average", "frozen-base"):
            raise ValueError(f"unknown backbone merge {merge!r}")
        if self.mode == "lora" and merge != "frozen-base":
            raise ValueError("LoRA upcycling keeps the frozen base backbone")
        if not 1 <= self.k <= self.n_experts:
            raise ValueError("need 1 <= k <= n_experts")


@dataclass
class RoutingVectors:
    """One expert's routing vector at every MoE layer."""

    expert_index: int
    vectors: list[np.ndarray]


def init_routing_vectors(n: int, config: ModelConfig, rng: RngState, std: float = ROUTER_INIT_STD) -> list[RoutingVectors]:
    out = []
    for i in range(n):
        gen = rng.derive("routing-vector", i).generator()
        out.append(RoutingVectors(i, [gen.normal(0.0, std, config.d_h) for _ in range(config.n_layers)]))
    return out


# ---------------------------------------------------------------------------
# Pre-optimization
# ---------------------------------------------------------------------------


def router_logits(hidden: Sequence[Tensor], routes: Sequence[Tensor]) -> Tensor:
    """Per-token ``r_l . h_l`` at every layer, stacked to ``[L, ..., T]``."""
    return stack([h @ r for h, r in zip(hidden, routes)])


def preopt_loss(model: DenseModel, routes: Sequence[Tensor], batch: np.ndarray, alpha: float) -> tuple[Tensor, LossBreakdown]:
    logits, hidden = model.forward(batch, return_hidden=True)
    lm = next_token_loss(logits, batch)
    aux = aux_router_loss(router_logits(hidden, routes))
    total = combined_preopt_loss(lm, aux, alpha)
    return total, LossBreakdown(lm=lm.item(), aux=aux.item(), total=total.item())


def preoptimize_expert(
    expert: Mapping[str, np.ndarray],
    config: ModelConfig,
    vectors: RoutingVectors,
    bucket_samples,
    cfg: TrainConfig,
    loss_log: list | None = None,
) -> tuple[dict[str, np.ndarray], RoutingVectors]:
    """Train the expert layer and its routing vectors on the expert's bucket.

    The backbone stays frozen. Returns new state and vectors; inputs are not
    modified. An empty bucket leaves both unchanged (with a warning).
    """
    if len(bucket_samples) == 0:
        msg = f"expert {vectors.expert_index}: empty bucket, routing vector kept at initialization"
        log.warning(msg)
        warnings.warn(msg, stacklevel=2)
        return {k: np.array(v) for k, v in expert.items()}, RoutingVectors(vectors.expert_index, [v.copy() for v in vectors.vectors])
    model = DenseModel(config, expert)
    routes = [Parameter(v, f"layer.{l}.route") for l, v in enumerate(vectors.vectors)]
    params = [model.params[n] for n in expert_layer_names(config, list(model.params))] + routes
    data = as_token_matrix(bucket_samples)

    def on_step(step, epoch, parts):
        if loss_log is not None:
            loss_log.append({"step": step, "epoch": epoch, "expert": vectors.expert_index, **parts.__dict__})

    run_training(params, data, cfg, lambda b: preopt_loss(model, routes, b, cfg.alpha), on_step)
    return model.state_dict(), RoutingVectors(vectors.expert_index, [r.data.copy() for r in routes])


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def assemble_router(vectors: Sequence[RoutingVectors]) -> list[np.ndarray]:
    """Stack routing vectors as columns: one ``[d_h, n]`` router per layer."""
    if not vectors:
        raise ValueError("no routing vectors")
    ordered = sorted(vectors, key=lambda v: v.expert_index)
    if [v.expert_index for v in ordered] != list(range(len(ordered))):
        raise ValueError("routing vectors missing for some experts")
    n_layers = len(ordered[0].vectors)
    routers = []
    for l in range(n_layers):
        cols = []
        for v in ordered:
            if len(v.vectors) != n_layers:
                raise ValueError(f"expert {v.expert_index} lacks a vector for layer {l}")
            cols.append(np.asarray(v.vectors[l]))
        if len({c.shape for c in cols}) != 1 or cols[0].ndim != 1:
            raise ValueError("routing vectors differ in dimension")
        routers.append(np.stack(cols, axis=1))
    return routers


def average_backbone(experts: Sequence[Mapping[str, np.ndarray]], weights: Sequence[float]) -> dict[str, np.ndarray]:
    """Weighted sum of the backbone (non-expert) parameters."""
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(experts) or not experts:
        raise ValueError("one weight per expert required")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("backbone weights must sum to 1")
    names = sorted(n for n in experts[0] if not is_expert_name(n))
    out = {}
    for n in names:
        shapes = {np.shape(e[n]) for e in experts}
        if len(shapes) != 1:
            raise ValueError(f"shape mismatch for {n}")
        acc = w[0] * np.asarray(experts[0][n])
        for wi, e in zip(w[1:], experts[1:]):
            acc = acc + wi * np.asarray(e[n])
        out[n] = acc
    return out


def assemble_moe(expert_set: ExpertSet, routers: Sequence[np.ndarray], cfg: UpcycleConfig) -> MoEModel:
    config = expert_set.config
    n = len(expert_set)
    if cfg.n_experts != n:
        raise ValueError(f"config wants {cfg.n_experts} experts, set has {n}")
    if (cfg.mode == "lora") != config.lora:
        raise ValueError("upcycling mode does not match the model's LoRA setting")
    if len(routers) != config.n_layers:
        raise ValueError("need one router per layer")
    if cfg.backbone_merge == "frozen-base":
        state = {k: np.array(v) for k, v in expert_set.base.items() if not is_expert_name(k)}
    else:
        state = average_backbone(expert_set.experts, [1.0 / n] * n)
    for l in range(config.n_layers):
        r = np.asarray(routers[l])
        if r.shape != (config.d_h, n):
            raise ValueError(f"router {l} has shape {r.shape}, expected {(config.d_h, n)}")
        state[f"layer.{l}.router"] = r.copy()
        for i, e in enumerate(expert_set.experts):
            for mat in FFN_MATS:
                if config.lora:
                    for f in ("lora_A", "lora_B"):
                        state[f"layer.{l}.expert.{i}.{mat}.{f}"] = np.array(e[f"layer.{l}.ffn.{mat}.{f}"])
                else:
                    state[f"layer.{l}.expert.{i}.{mat}"] = np.array(e[f"layer.{l}.ffn.{mat}"])
        if config.lora:
            for mat in FFN_MATS:
                state[f"layer.{l}.ffn.{mat}"] = np.array(expert_set.base[f"layer.{l}.ffn.{mat}"])
    return MoEModel(config, n, cfg.k, state, cfg.gate_mode)


def random_routers(config: ModelConfig, n: int, rng: RngState, std: float = ROUTER_INIT_STD) -> list[np.ndarray]:
    gen = rng.generator()
    return [gen.normal(0.0, std, (config.d_h, n)) for _ in range(config.n_layers)]


def vanilla_upcycle(
    final_state: Mapping[str, np.ndarray],
    config: ModelConfig,
    n: int,
    k: int,
    rng: RngState,
    gate_mode: str = "topk_softmax",
) -> MoEModel:
    """Replicate the dense FFN ``n`` times behind a randomly initialized router.

    In LoRA mode the experts are fresh adapters with zero ``B`` over the
    checkpoint's FFN weights.
    """
    if n < 1:
        raise ValueError("need at least one expert")
    state = {k_: np.array(v) for k_, v in final_state.items() if not is_expert_name(k_)}
    routers = random_routers(config, n, rng.derive("router"))
    for l in range(config.n_layers):
        state[f"layer.{l}.router"] = routers[l]
        if config.lora:
            for mat in FFN_MATS:
                state[f"layer.{l}.ffn.{mat}"] = np.array(final_state[f"layer.{l}.ffn.{mat}"])
            for i in range(n):
                gen = rng.derive("lora", l, i).generator()
                for name, shape in lora_shapes(config, f"layer.{l}.expert.{i}").items():
                    if name.endswith("lora_B"):
                        state[name] = np.zeros(shape)
                    else:
                        state[name] = gen.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
        else:
            for i in range(n):
                for mat in FFN_MATS:
                    state[f"layer.{l}.expert.{i}.{mat}"] = np.array(final_state[f"layer.{l}.ffn.{mat}"])
    return MoEModel(config, n, k, state, gate_mode)
