"""Toy causal transformer, its top-k routed MoE variant, and perplexity.

Both models keep their parameters in a flat ``{name: Parameter}`` dict.
Dense names::

    embed.tok [V, d]            embed.pos [max_seq, d]
    layer.{l}.attn_norm [d]     layer.{l}.attn.{wq,wk,wv,wo} [d, d]
    layer.{l}.ffn_norm [d]      layer.{l}.ffn.{gate,up} [d_ff, d]   layer.{l}.ffn.down [d, d_ff]
    layer.{l}.ffn.{gate,up,down}.lora_{A,B}   (only when lora_rank > 0)
    final_norm [d]              lm_head [V, d]

Linear weights are stored ``[d_out, d_in]``. The MoE model keeps the same
backbone names, adds ``layer.{l}.router [d, n]`` and stores experts as
``layer.{l}.expert.{i}.{gate,up,down}`` (FFN mode) or as per-expert LoRA
factors ``layer.{l}.expert.{i}.{gate,up,down}.lora_{A,B}`` over the shared
``layer.{l}.ffn.*`` weights (LoRA mode).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .numerics import (
    Parameter,
    RngState,
    Tensor,
    as_tensor,
    embedding,
    linear,
    masked_fill,
)

FFN_MATS = ("gate", "up", "down")
GATE_MODES = ("topk_softmax", "softmax_topk")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_h: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_seq: int = 64
    lora_rank: int = 0
    lora_alpha: float = 8.0

    def __post_init__(self):
        for field in ("vocab_size", "d_h", "n_layers", "n_heads", "d_ff", "max_seq"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0")
        if self.d_h % self.n_heads:
            raise ValueError("d_h must be divisible by n_heads")

    @property
    def lora(self) -> bool:
        return self.lora_rank > 0

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank if self.lora_rank else 0.0

    def ffn_shape(self, mat: str) -> tuple[int, int]:
        return (self.d_h, self.d_ff) if mat == "down" else (self.d_ff, self.d_h)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


def backbone_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_h
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (cfg.vocab_size, d),
        "embed.pos": (cfg.max_seq, d),
    }
    for l in range(cfg.n_layers):
        shapes[f"layer.{l}.attn_norm"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"layer.{l}.attn.{w}"] = (d, d)
        shapes[f"layer.{l}.ffn_norm"] = (d,)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (cfg.vocab_size, d)
    return shapes


def lora_shapes(cfg: ModelConfig, prefix: str) -> dict[str, tuple[int, int]]:
    out = {}
    for mat in FFN_MATS:
        d_out, d_in = cfg.ffn_shape(mat)
        out[f"{prefix}.{mat}.lora_A"] = (cfg.lora_rank, d_in)
        out[f"{prefix}.{mat}.lora_B"] = (d_out, cfg.lora_rank)
    return out


def dense_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = backbone_shapes(cfg)
    for l in range(cfg.n_layers):
        for mat in FFN_MATS:
            shapes[f"layer.{l}.ffn.{mat}"] = cfg.ffn_shape(mat)
        if cfg.lora:
            shapes.update(lora_shapes(cfg, f"layer.{l}.ffn"))
    return shapes


def is_expert_name(name: str) -> bool:
    """Expert-capable parameters: FFN weights, their LoRA factors, MoE experts."""
    return ".ffn." in name or ".expert." in name


def is_lora_name(name: str) -> bool:
    return name.endswith(".lora_A") or name.endswith(".lora_B")


def expert_layer_names(cfg: ModelConfig, names: Sequence[str]) -> list[str]:
    """Names that make up the expert layer of a dense model: FFN or LoRA factors."""
    if cfg.lora:
        return sorted(n for n in names if is_expert_name(n) and is_lora_name(n))
    return sorted(n for n in names if is_expert_name(n) and not is_lora_name(n))


def _init_value(name: str, shape: tuple[int, ...], cfg: ModelConfig, gen: np.random.Generator) -> np.ndarray:
    if name.endswith("_norm") or name == "final_norm":
        return np.ones(shape)
    if name.startswith("embed."):
        return gen.normal(0.0, 1.0, shape)
    if name.endswith(".lora_B"):
        return np.zeros(shape)
    fan_in = shape[-1]
    std = 1.0 / math.sqrt(fan_in)
    if name.endswith(".wo") or name.endswith(".down"):
        std /= math.sqrt(2 * cfg.n_layers)
    return gen.normal(0.0, std, shape)


def init_dense_state(cfg: ModelConfig, rng: RngState) -> dict[str, np.ndarray]:
    gen = rng.generator()
    shapes = dense_shapes(cfg)
    return {name: _init_value(name, shapes[name], cfg, gen) for name in sorted(shapes)}


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


@dataclass
class LoRAAdapter:
    A: np.ndarray  # [r, d_in]
    B: np.ndarray  # [d_out, r]
    scaling: float = 1.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)


def lora_effective_delta(adapter: LoRAAdapter) -> np.ndarray:
    A, B = adapter.A, adapter.B
    if A.ndim != 2 or B.ndim != 2 or B.shape[1] != A.shape[0]:
        raise ValueError(f"incompatible LoRA shapes A{A.shape} B{B.shape}")
    return (B @ A) * adapter.scaling


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * (ms + eps) ** -0.5 * weight


def _lora_linear(x: Tensor, w: Tensor, lora: tuple[Tensor, Tensor, float] | None) -> Tensor:
    out = linear(x, w)
    if lora is not None:
        A, B, scale = lora
        out = out + linear(linear(x, A), B) * scale
    return out


class FFNExpert:
    """SwiGLU feed-forward block, optionally with LoRA factors on each matrix."""

    def __init__(self, weights: Mapping[str, Tensor], lora: Mapping[str, tuple[Tensor, Tensor, float]] | None = None):
        self.weights = {m: as_tensor(weights[m]) for m in FFN_MATS}
        self.lora = lora or {}

    def __call__(self, h: Tensor) -> Tensor:
        w, lo = self.weights, self.lora
        g = _lora_linear(h, w["gate"], lo.get("gate"))
        u = _lora_linear(h, w["up"], lo.get("up"))
        return _lora_linear(g.silu() * u, w["down"], lo.get("down"))


def causal_attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    B, T, d = x.shape
    hd = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, n_heads, hd).transpose(0, 2, 1, 3)

    q = heads(linear(x, p[f"{prefix}.wq"]))
    k = heads(linear(x, p[f"{prefix}.wk"]))
    v = heads(linear(x, p[f"{prefix}.wv"]))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    att = masked_fill(scores, future).softmax(axis=-1)
    y = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return linear(y, p[f"{prefix}.wo"])


def _as_batch(tokens, cfg: ModelConfig) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError("tokens must be a non-empty sequence or a 2-d batch")
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError("tokens must be integers")
    if arr.shape[1] > cfg.max_seq:
        raise ValueError(f"sequence length {arr.shape[1]} exceeds max_seq {cfg.max_seq}")
    if arr.min() < 0 or arr.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    return arr.astype(np.int64), single


def _embed(p: Mapping[str, Tensor], ids: np.ndarray) -> Tensor:
    T = ids.shape[1]
    return embedding(p["embed.tok"], ids) + p["embed.pos"][:T]


# ---------------------------------------------------------------------------
# Gating
# ---------------------------------------------------------------------------


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k largest scores, ties to the lower index, sorted ascending."""
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def top_k_gate(scores, k: int, gate_mode: str = "topk_softmax") -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("scores must be a non-empty vector")
    if not 1 <= k <= s.size:
        raise ValueError(f"k={k} out of range for {s.size} experts")
    idx = top_k_indices(s, k)
    if gate_mode == "topk_softmax":
        sel = s[idx]
        e = np.exp(sel - sel.max())
        w = e / e.sum()
    elif gate_mode == "softmax_topk":
        e = np.exp(s - s.max())
        w = (e / e.sum())[idx]
    else:
        raise ValueError(f"unknown gate_mode {gate_mode!r}")
    return idx, w


def gate_weights(scores: Tensor, k: int, gate_mode: str = "topk_softmax") -> tuple[Tensor, np.ndarray]:
    """Dense ``[..., n]`` gate weights (zero off the top-k) and the boolean selection mask."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} experts")
    idx = top_k_indices(scores.data, k)
    selected = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(selected, idx, True, axis=-1)
    if gate_mode == "topk_softmax":
        w = masked_fill(scores, ~selected).softmax(axis=-1)
    elif gate_mode == "softmax_topk":
        w = scores.softmax(axis=-1) * selected.astype(np.float64)
    else:
        raise ValueError(f"unknown gate_mode {gate_mode!r}")
    return w, selected


def moe_layer_forward(
    h,
    router,
    experts: Sequence[Callable[[Tensor], Tensor]],
    k: int,
    gate_mode: str = "topk_softmax",
    routing: list | None = None,
) -> Tensor:
    """Route ``h`` (``[d]`` or ``[..., d]``) through the top-k experts.

    ``o = sum_{i in topk} w_i * E_i(h)`` with scores ``router.T @ h``.
    If ``routing`` is a list, a ``(scores, selected)`` pair is appended to it.
    """
    h, router = as_tensor(h), as_tensor(router)
    if router.ndim != 2 or router.shape[0] != h.shape[-1]:
        raise ValueError(f"router shape {router.shape} does not match hidden size {h.shape[-1]}")
    if router.shape[1] != len(experts):
        raise ValueError(f"router has {router.shape[1]} columns for {len(experts)} experts")
    scores = h @ router
    w, selected = gate_weights(scores, k, gate_mode)
    if routing is not None:
        routing.append((scores, selected))
    out = None
    for i, expert in enumerate(experts):
        if not selected[..., i].any():
            continue
        term = expert(h) * w[..., i : i + 1]
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class _ParamModel:
    config: ModelConfig
    params: dict[str, Parameter]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: self.params[name].data.copy() for name in sorted(self.params)}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise KeyError(f"state mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, value in state.items():
            if np.shape(value) != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name].data[...] = value

    def parameters(self) -> list[Parameter]:
        return [self.params[n] for n in sorted(self.params)]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def __call__(self, tokens):
        return self.forward(tokens)


class DenseModel(_ParamModel):
    """Pre-norm causal transformer with SwiGLU FFNs (and optional LoRA on them)."""

    def __init__(self, config: ModelConfig, state: Mapping[str, np.ndarray] | None = None, rng: RngState | None = None):
        self.config = config
        if state is None:
            state = init_dense_state(config, rng or RngState(0))
        shapes = dense_shapes(config)
        if set(state) != set(shapes):
            raise KeyError("state does not match the dense layout for this config")
        self.params = {}
        for name in sorted(shapes):
            value = np.array(state[name], dtype=np.float64)
            if value.shape != shapes[name]:
                raise ValueError(f"{name}: expected shape {shapes[name]}, got {value.shape}")
            self.params[name] = Parameter(value, name)

    def backbone_names(self) -> list[str]:
        return sorted(n for n in self.params if not is_expert_name(n))

    def expert_names(self) -> list[str]:
        return sorted(n for n in self.params if is_expert_name(n))

    def trainable_names(self) -> list[str]:
        """Full fine-tuning without LoRA; only the LoRA factors with it."""
        if self.config.lora:
            return sorted(n for n in self.params if is_lora_name(n))
        return sorted(self.params)

    def ffn(self, l: int) -> FFNExpert:
        p = self.params
        pre = f"layer.{l}.ffn"
        lora = None
        if self.config.lora:
            s = self.config.lora_scaling
            lora = {m: (p[f"{pre}.{m}.lora_A"], p[f"{pre}.{m}.lora_B"], s) for m in FFN_MATS}
        return FFNExpert({m: p[f"{pre}.{m}"] for m in FFN_MATS}, lora)

    def forward(self, tokens, return_hidden: bool = False):
        """Logits ``[T, V]`` for one sequence or ``[B, T, V]`` for a batch.

        With ``return_hidden`` also returns, per layer, the normalized FFN
        input (the hidden state a router at that layer would see).
        """
        cfg, p = self.config, self.params
        ids, single = _as_batch(tokens, cfg)
        x = _embed(p, ids)
        hidden = []
        for l in range(cfg.n_layers):
            x = x + causal_attention(rms_norm(x, p[f"layer.{l}.attn_norm"]), p, f"layer.{l}.attn", cfg.n_heads)
            h = rms_norm(x, p[f"layer.{l}.ffn_norm"])
            hidden.append(h)
            x = x + self.ffn(l)(h)
        logits = linear(rms_norm(x, p["final_norm"]), p["lm_head"])
        if single:
            logits = logits.reshape(logits.shape[1:])
            hidden = [h.reshape(h.shape[1:]) for h in hidden]
        return (logits, hidden) if return_hidden else logits


def moe_shapes(cfg: ModelConfig, n_experts: int) -> dict[str, tuple[int, ...]]:
    shapes = backbone_shapes(cfg)
    for l in range(cfg.n_layers):
        shapes[f"layer.{l}.router"] = (cfg.d_h, n_experts)
        if cfg.lora:
            for mat in FFN_MATS:
                shapes[f"layer.{l}.ffn.{mat}"] = cfg.ffn_shape(mat)
            for i in range(n_experts):
                shapes.update(lora_shapes(cfg, f"layer.{l}.expert.{i}"))
        else:
            for i in range(n_experts):
                for mat in FFN_MATS:
                    shapes[f"layer.{l}.expert.{i}.{mat}"] = cfg.ffn_shape(mat)
    return shapes


class MoEModel(_ParamModel):
    """Every block's FFN replaced by ``n_experts`` routed experts, ``k`` active per token."""

    def __init__(
        self,
        config: ModelConfig,
        n_experts: int,
        k: int,
        state: Mapping[str, np.ndarray],
        gate_mode: str = "topk_softmax",
    ):
        if not 1 <= k <= n_experts:
            raise ValueError(f"need 1 <= k <= n_experts, got k={k}, n={n_experts}")
        if gate_mode not in GATE_MODES:
            raise ValueError(f"unknown gate_mode {gate_mode!r}")
        self.config = config
        self.n_experts = n_experts
        self.k = k
        self.gate_mode = gate_mode
        shapes = moe_shapes(config, n_experts)
        if set(state) != set(shapes):
            missing = sorted(set(shapes) - set(state))[:3]
            extra = sorted(set(state) - set(shapes))[:3]
            raise KeyError(f"state does not match the MoE layout: missing={missing} extra={extra}")
        self.params = {}
        for name in sorted(shapes):
            value = np.array(state[name], dtype=np.float64)
            if value.shape != shapes[name]:
                raise ValueError(f"{name}: expected shape {shapes[name]}, got {value.shape}")
            self.params[name] = Parameter(value, name)

    def router(self, l: int) -> Parameter:
        return self.params[f"layer.{l}.router"]

    def experts(self, l: int) -> list[FFNExpert]:
        p, cfg = self.params, self.config
        if cfg.lora:
            shared = {m: p[f"layer.{l}.ffn.{m}"] for m in FFN_MATS}
            s = cfg.lora_scaling
            out = []
            for i in range(self.n_experts):
                pre = f"layer.{l}.expert.{i}"
                lora = {m: (p[f"{pre}.{m}.lora_A"], p[f"{pre}.{m}.lora_B"], s) for m in FFN_MATS}
                out.append(FFNExpert(shared, lora))
            return out
        return [FFNExpert({m: p[f"layer.{l}.expert.{i}.{m}"] for m in FFN_MATS}) for i in range(self.n_experts)]

    def trainable_names(self) -> list[str]:
        """Everything in FFN mode; routers and LoRA factors in LoRA mode."""
        if self.config.lora:
            return sorted(n for n in self.params if is_lora_name(n) or n.endswith(".router"))
        return sorted(self.params)

    def forward(self, tokens, return_routing: bool = False):
        """Logits like :meth:`DenseModel.forward`.

        With ``return_routing`` also returns, per layer, ``(scores, selected)``
        over the flattened token positions: scores ``[B*T, n]`` (a Tensor) and
        the boolean top-k membership mask.
        """
        cfg, p = self.config, self.params
        ids, single = _as_batch(tokens, cfg)
        B, T = ids.shape
        x = _embed(p, ids)
        routing: list = []
        for l in range(cfg.n_layers):
            x = x + causal_attention(rms_norm(x, p[f"layer.{l}.attn_norm"]), p, f"layer.{l}.attn", cfg.n_heads)
            h = rms_norm(x, p[f"layer.{l}.ffn_norm"]).reshape(B * T, cfg.d_h)
            o = moe_layer_forward(h, self.router(l), self.experts(l), self.k, self.gate_mode, routing)
            x = x + o.reshape(B, T, cfg.d_h)
        logits = linear(rms_norm(x, p["final_norm"]), p["lm_head"])
        if single:
            logits = logits.reshape(logits.shape[1:])
        return (logits, routing) if return_routing else logits


# ---------------------------------------------------------------------------
# Perplexity
# ---------------------------------------------------------------------------


def _logits_array(model, batch: np.ndarray) -> np.ndarray:
    out = model.forward(batch)
    return out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)


def sequence_nll(model, batch) -> np.ndarray:
    """Mean next-token negative log-likelihood of each row of an equal-length batch."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[1] < 2:
        raise ValueError("perplexity needs samples of length >= 2")
    logits = _logits_array(model, batch)[:, :-1]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    target_logp = np.take_along_axis(logp, batch[:, 1:, None], axis=-1)[..., 0]
    return -target_logp.mean(axis=1)


def perplexity(model, sample) -> float:
    return float(np.exp(sequence_nll(model, np.asarray(sample)[None, :])[0]))


def batch_perplexity(model, samples: Sequence[Sequence[int]], batch_size: int = 64) -> np.ndarray:
    """Per-sample perplexities; samples of equal length are batched together."""
    samples = [np.asarray(s, dtype=np.int64) for s in samples]
    out = np.empty(len(samples))
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_len.setdefault(len(s), []).append(i)
    for idxs in by_len.values():
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start : start + batch_size]
            out[chunk] = np.exp(sequence_nll(model, np.stack([samples[i] for i in chunk])))
    return out
