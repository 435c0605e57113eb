"""Genetic expert expansion: grow m experts to n by merging dissimilar parents.

Each iteration picks the two experts whose expert-layer deltas (relative to
the shared base) have the lowest cosine similarity, draws a convex weight,
drop-and-rescales each parent's delta, and appends the weighted merge.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import LoRAAdapter, ModelConfig, expert_layer_names, lora_effective_delta
from .numerics import RngState

log = logging.getLogger(__name__)

State = Mapping[str, np.ndarray]


class DegenerateExpertWarning(UserWarning):
    """An expert has an all-zero delta, so its similarities are undefined."""


@dataclass(frozen=True)
class MergeConfig:
    drop_rate: float = 0.5
    seed: int = 0
    weight_low: float = 0.0
    weight_high: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")
        if not 0.0 <= self.weight_low < self.weight_high <= 1.0:
            raise ValueError("need 0 <= weight_low < weight_high <= 1")


@dataclass
class ExpertSet:
    """The shared base plus an ordered list of expert states."""

    config: ModelConfig
    base: dict[str, np.ndarray]
    experts: list[dict[str, np.ndarray]]
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        names = set(self.base)
        for i, e in enumerate(self.experts):
            if set(e) != names:
                raise ValueError(f"expert {i} does not share the base parameter names")
        if not self.provenance:
            self.provenance = [{"kind": "checkpoint"} for _ in self.experts]
        if len(self.provenance) != len(self.experts):
            raise ValueError("provenance must cover every expert")

    def __len__(self) -> int:
        return len(self.experts)

    def copy(self) -> ExpertSet:
        return ExpertSet(
            self.config,
            self.base,
            [dict(e) for e in self.experts],
            [dict(p) for p in self.provenance],
        )


# ---------------------------------------------------------------------------
# Deltas and similarity
# ---------------------------------------------------------------------------


def _lora_layer_prefixes(names) -> list[str]:
    return sorted({n.rsplit(".lora_", 1)[0] for n in names if n.endswith(".lora_A")})


def expert_delta(expert: State, base: State, config: ModelConfig, scope: str = "expert-layers") -> np.ndarray:
    """Flat ``expert - base`` over the chosen scope, in sorted name order.

    With LoRA, each adapted matrix contributes the difference of its
    effective ``B @ A * scaling`` instead of the raw factors.
    """
    if scope not in ("expert-layers", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    if set(expert) != set(base):
        raise ValueError("expert and base parameter names differ")
    for name in expert:
        if np.shape(expert[name]) != np.shape(base[name]):
            raise ValueError(f"shape mismatch for {name}")
    pieces = []
    if config.lora:
        s = config.lora_scaling
        for pre in _lora_layer_prefixes(expert):
            de = lora_effective_delta(LoRAAdapter(expert[f"{pre}.lora_A"], expert[f"{pre}.lora_B"], s))
            db = lora_effective_delta(LoRAAdapter(base[f"{pre}.lora_A"], base[f"{pre}.lora_B"], s))
            pieces.append((pre, (de - db).reshape(-1)))
        if scope == "all":
            for name in expert:
                if not name.endswith((".lora_A", ".lora_B")):
                    pieces.append((name, (np.asarray(expert[name]) - base[name]).reshape(-1)))
    else:
        names = expert_layer_names(config, list(expert)) if scope == "expert-layers" else list(expert)
        pieces = [(n, (np.asarray(expert[n]) - base[n]).reshape(-1)) for n in names]
    pieces.sort(key=lambda kv: kv[0])
    if not pieces:
        return np.zeros(0)
    return np.concatenate([v for _, v in pieces])


def cosine_matrix(vectors: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    """Pairwise cosine similarity; zero vectors get similarity 0 to everything else."""
    V = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    norms = np.linalg.norm(V, axis=1)
    zero = [i for i, nrm in enumerate(norms) if nrm == 0.0]
    safe = np.where(norms == 0.0, 1.0, norms)
    U = V / safe[:, None]
    sim = U @ U.T
    np.fill_diagonal(sim, 1.0)
    return sim, zero


def pairwise_similarity(expert_set: ExpertSet) -> np.ndarray:
    if len(expert_set) < 2:
        raise ValueError("need at least two experts")
    deltas = [expert_delta(e, expert_set.base, expert_set.config) for e in expert_set.experts]
    sim, zero = cosine_matrix(deltas)
    for i in zero:
        msg = f"expert {i} has a zero delta; its similarities are set to 0"
        log.warning(msg)
        warnings.warn(msg, DegenerateExpertWarning, stacklevel=2)
    return sim


def select_parents(sim: np.ndarray) -> tuple[int, int]:
    """Off-diagonal pair with minimum similarity; ties go to the smallest (j, k)."""
    sim = np.asarray(sim)
    n = sim.shape[0]
    if sim.ndim != 2 or n < 2 or sim.shape[1] != n:
        raise ValueError("similarity matrix must be square and at least 2x2")
    best, pair = np.inf, (0, 1)
    for j in range(n):
        for k in range(j + 1, n):
            if sim[j, k] < best:
                best, pair = sim[j, k], (j, k)
    return pair


# ---------------------------------------------------------------------------
# DARE and merging
# ---------------------------------------------------------------------------


def dare(delta, p: float, rng: RngState) -> np.ndarray:
    """Zero each coordinate with probability ``p`` and rescale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError("drop rate must lie in [0, 1)")
    delta = np.asarray(delta, dtype=np.float64)
    if p == 0.0:
        return delta.copy()
    keep = rng.generator().random(delta.shape) >= p
    return np.where(keep, delta / (1.0 - p), 0.0)


def draw_weight(gen: np.random.Generator, low: float, high: float) -> float:
    """Uniform draw on the open interval ``(low, high)``."""
    while True:
        a = float(gen.uniform(low, high))
        if low < a < high:
            return a


def _dare_params(expert: State, base: State, names: Sequence[str], p: float, rng: RngState) -> dict[str, np.ndarray]:
    """Parent parameters with DARE applied to their delta (exact copy when p == 0)."""
    if p == 0.0:
        return {n: np.asarray(expert[n]) for n in names}
    flat = np.concatenate([(np.asarray(expert[n]) - base[n]).reshape(-1) for n in names])
    dropped = dare(flat, p, rng)
    out, offset = {}, 0
    for n in names:
        size = np.size(base[n])
        out[n] = base[n] + dropped[offset : offset + size].reshape(np.shape(base[n]))
        offset += size
    return out


def merge_pair(
    expert_set: ExpertSet,
    j: int,
    k: int,
    alpha: float,
    p: float,
    rng_j: RngState,
    rng_k: RngState,
) -> dict[str, np.ndarray]:
    """``alpha * DARE(E_j) + (1 - alpha) * DARE(E_k)`` on the expert layers.

    Backbone parameters are convex-averaged with the same weights in FFN
    mode and left at the frozen base in LoRA mode.
    """
    cfg, base = expert_set.config, expert_set.base
    beta = 1.0 - alpha
    ej, ek = expert_set.experts[j], expert_set.experts[k]
    names = expert_layer_names(cfg, list(base))
    pj = _dare_params(ej, base, names, p, rng_j)
    pk = _dare_params(ek, base, names, p, rng_k)
    new = {n: alpha * pj[n] + beta * pk[n] for n in names}
    for n in base:
        if n in new:
            continue
        if cfg.lora:
            new[n] = np.array(base[n])
        else:
            new[n] = alpha * ej[n] + beta * ek[n]
    return new


def expand_experts(
    expert_set: ExpertSet,
    n: int,
    cfg: MergeConfig,
    parent_selection: str = "genetic",
    chosen_pairs: list | None = None,
) -> ExpertSet:
    """Append ``n - m`` merged experts; the original experts are left untouched.

    ``parent_selection="random"`` draws the parent pair uniformly instead of
    taking the least-similar pair. Chosen pairs are appended to
    ``chosen_pairs`` when given.
    """
    m = len(expert_set)
    if n < m:
        raise ValueError(f"target {n} is below the current expert count {m}")
    if parent_selection not in ("genetic", "random"):
        raise ValueError(f"unknown parent selection {parent_selection!r}")
    out = expert_set.copy()
    root = RngState(cfg.seed)
    for it in range(n - m):
        if len(out) < 2:
            raise ValueError("expansion needs at least two experts")
        rng = root.derive("expand", it)
        if parent_selection == "genetic":
            j, k = select_parents(pairwise_similarity(out))
        else:
            j, k = sorted(int(x) for x in rng.derive("parents").generator().choice(len(out), 2, replace=False))
        alpha = draw_weight(rng.derive("weight").generator(), cfg.weight_low, cfg.weight_high)
        rng_j, rng_k = rng.derive("dare", "j"), rng.derive("dare", "k")
        out.experts.append(merge_pair(out, j, k, alpha, cfg.drop_rate, rng_j, rng_k))
        out.provenance.append(
            {
                "kind": "merged",
                "parents": [j, k],
                "alpha": alpha,
                "p": cfg.drop_rate,
                "seed": rng.seed,
                "selection": parent_selection,
            }
        )
        if chosen_pairs is not None:
            chosen_pairs.append((j, k))
        log.info("expert %d <- merge(%d, %d, alpha=%.3f)", len(out) - 1, j, k, alpha)
    return out
