"""Expert-specific data selection for router initialization.

A small seed set is drawn from the corpus, every expert's perplexity on every
seed sample is tabulated, and samples are handed out greedily: each goes to
its lowest-perplexity expert that still has room in its bucket.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import DenseModel, batch_perplexity
from .numerics import RngState

log = logging.getLogger(__name__)


@dataclass
class SeedDataset:
    sample_ids: list[int]
    samples: list[tuple[int, ...]]
    source_fraction: float

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass
class PerplexityTable:
    sample_ids: list[int]
    values: np.ndarray  # [n_samples, n_experts]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.sample_ids):
            raise ValueError("table must have one row per sample id")
        if not (np.isfinite(self.values).all() and (self.values > 0).all()):
            raise ValueError("perplexities must be positive and finite")


@dataclass
class ExpertBucket:
    expert_index: int
    capacity: int
    sample_ids: list[int] = field(default_factory=list)

    def full(self) -> bool:
        return len(self.sample_ids) >= self.capacity


@dataclass
class Assignment:
    buckets: list[ExpertBucket]
    dropped: list[int]

    @property
    def dropped_count(self) -> int:
        return len(self.dropped)


def sample_seed(corpus, fraction: float, rng: RngState) -> SeedDataset:
    """Uniform draw without replacement of ``max(1, round(fraction * |corpus|))`` samples."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    size = max(1, int(round(fraction * len(corpus))))
    picks = rng.generator().permutation(len(corpus))[:size]
    ids, samples = [], []
    for i in picks:
        s = corpus[int(i)]
        ids.append(int(getattr(s, "sample_id", i)))
        samples.append(tuple(int(t) for t in getattr(s, "tokens", s)))
    return SeedDataset(ids, samples, fraction)


def build_ppl_table(experts, seed: SeedDataset) -> PerplexityTable:
    """Perplexity of every expert on every seed sample.

    ``experts`` is a list of models (anything :func:`perplexity` accepts) or an
    :class:`~upit.expansion.ExpertSet`.
    """
    models = _as_models(experts)
    if not models:
        raise ValueError("need at least one expert")
    cols = [batch_perplexity(m, seed.samples) for m in models]
    return PerplexityTable(list(seed.sample_ids), np.stack(cols, axis=1))


def _as_models(experts) -> list:
    if hasattr(experts, "experts") and hasattr(experts, "config"):
        return [DenseModel(experts.config, e) for e in experts.experts]
    return list(experts)


def default_capacity(n_samples: int, n_experts: int) -> int:
    return max(1, math.ceil(n_samples / n_experts))


def assign_buckets(table: PerplexityTable, capacity: int) -> Assignment:
    """Greedy capacity-bounded assignment in seed order; overflow is dropped."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    n = table.values.shape[1]
    buckets = [ExpertBucket(j, capacity) for j in range(n)]
    dropped = []
    for sid, row in zip(table.sample_ids, table.values):
        for j in np.argsort(row, kind="stable"):
            if not buckets[j].full():
                buckets[j].sample_ids.append(sid)
                break
        else:
            dropped.append(sid)
    if dropped:
        log.info("%d seed samples dropped: every bucket was full", len(dropped))
    return Assignment(buckets, dropped)


def assign_random(sample_ids: Sequence[int], n_experts: int, capacity: int, rng: RngState) -> Assignment:
    """Ablation: each sample goes to a uniformly drawn expert among those with room."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    gen = rng.generator()
    buckets = [ExpertBucket(j, capacity) for j in range(n_experts)]
    dropped = []
    for sid in sample_ids:
        open_ = [b for b in buckets if not b.full()]
        if not open_:
            dropped.append(sid)
            continue
        open_[int(gen.integers(len(open_)))].sample_ids.append(sid)
    return Assignment(buckets, dropped)


def buckets_to_json(assignment: Assignment) -> list[dict]:
    """One record per bucket; ``dropped_count`` is the run-wide tally."""
    return [
        {
            "expert_index": b.expert_index,
            "capacity": b.capacity,
            "sample_ids": list(b.sample_ids),
            "dropped_count": assignment.dropped_count,
        }
        for b in assignment.buckets
    ]


def write_buckets(assignment: Assignment, path: Path) -> None:
    Path(path).write_text(json.dumps(buckets_to_json(assignment), indent=1, sort_keys=True) + "\n")


def read_buckets(path: Path) -> tuple[list[ExpertBucket], int]:
    """Buckets and the dropped-sample tally from a bucket JSON file."""
    records = json.loads(Path(path).read_text())
    buckets = [ExpertBucket(int(r["expert_index"]), int(r["capacity"]), [int(x) for x in r["sample_ids"]]) for r in records]
    return buckets, int(records[0]["dropped_count"]) if records else 0
