"""Synthetic multi-domain token corpus.

Each domain is a small formal task living in its own band of token ids
(``band = vocab_size // n_domains``):

* ``copy``     - random first half, second half repeats it
* ``reverse``  - random first half, second half is it reversed
* ``modadd``   - triples ``a, b, (a + b) mod band``
* ``sorted``   - a non-decreasing run of random tokens

Domains beyond the fourth cycle through the same tasks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import batch_perplexity
from .numerics import RngState

TASKS = ("copy", "reverse", "modadd", "sorted")


@dataclass(frozen=True)
class CorpusSpec:
    n_domains: int = 4
    ratios: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    n_train: int = 2000
    n_eval: int = 400
    seq_len: int = 32
    vocab_size: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.n_domains < 1:
            raise ValueError("need at least one domain")
        if len(self.ratios) != self.n_domains or any(r <= 0 for r in self.ratios):
            raise ValueError("ratios must be positive, one per domain")
        if self.seq_len < 4:
            raise ValueError("seq_len must be >= 4")
        if self.vocab_size // self.n_domains < 2:
            raise ValueError("vocab too small for the number of domains")
        if self.n_train < 1 or self.n_eval < 0:
            raise ValueError("need n_train >= 1 and n_eval >= 0")

    @property
    def band(self) -> int:
        return self.vocab_size // self.n_domains

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d


@dataclass(frozen=True)
class TaggedSample:
    tokens: tuple[int, ...]
    domain: int
    sample_id: int

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "domain": self.domain, "tokens": list(self.tokens)}


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Split ``total`` into integer counts proportional to ``ratios``."""
    r = np.asarray(ratios, dtype=np.float64)
    exact = total * r / r.sum()
    counts = np.floor(exact).astype(int)
    remainder = exact - counts
    # stable sort: ties go to the lower domain index
    for i in np.argsort(-remainder, kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def task_for(domain: int) -> str:
    return TASKS[domain % len(TASKS)]


def gen_sample(domain: int, spec: CorpusSpec, gen: np.random.Generator) -> list[int]:
    band, T = spec.band, spec.seq_len
    lo = domain * band
    task = task_for(domain)
    if task in ("copy", "reverse"):
        half = (T + 1) // 2
        x = gen.integers(0, band, half)
        tail = x if task == "copy" else x[::-1]
        seq = np.concatenate([x, tail])[:T]
    elif task == "modadd":
        n_triples = -(-T // 3)
        a = gen.integers(0, band, n_triples)
        b = gen.integers(0, band, n_triples)
        seq = np.stack([a, b, (a + b) % band], axis=1).reshape(-1)[:T]
    else:
        seq = np.sort(gen.integers(0, band, T))
    return (seq + lo).astype(int).tolist()


def gen_corpus(spec: CorpusSpec) -> tuple[list[TaggedSample], list[TaggedSample]]:
    """Generate (train, eval) splits; ids ``0..n_train-1`` train, the rest eval."""
    rng = RngState(spec.seed)
    train_counts = largest_remainder(spec.n_train, spec.ratios)
    eval_counts = largest_remainder(spec.n_eval, spec.ratios)
    splits = []
    next_id = 0
    for name, counts in (("train", train_counts), ("eval", eval_counts)):
        rows: list[tuple[list[int], int]] = []
        for d, c in enumerate(counts):
            gen = rng.derive(name, "domain", d).generator()
            rows.extend((gen_sample(d, spec, gen), d) for _ in range(c))
        order = rng.derive(name, "order").generator().permutation(len(rows))
        split = []
        for i in order:
            tokens, d = rows[i]
            split.append(TaggedSample(tuple(tokens), d, next_id))
            next_id += 1
        splits.append(split)
    return splits[0], splits[1]


def domain_ppl(model, eval_split: Sequence[TaggedSample], n_domains: int | None = None) -> np.ndarray:
    """Mean per-sample perplexity for each domain id ``0..n_domains-1``."""
    if not eval_split:
        raise ValueError("empty eval split")
    domains = np.array([s.domain for s in eval_split])
    n = int(domains.max()) + 1 if n_domains is None else n_domains
    ppl = batch_perplexity(model, [s.tokens for s in eval_split])
    out = np.empty(n)
    for d in range(n):
        mask = domains == d
        if not mask.any():
            raise ValueError(f"no eval samples for domain {d}")
        out[d] = ppl[mask].mean()
    return out


def mixed_ppl(model, eval_split: Sequence[TaggedSample]) -> float:
    """Mean per-sample perplexity over the whole split."""
    return float(batch_perplexity(model, [s.tokens for s in eval_split]).mean())


def write_records(samples: Iterable[TaggedSample], path: Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")


def read_records(path: Path) -> list[TaggedSample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append(TaggedSample(tuple(r["tokens"]), int(r["domain"]), int(r["sample_id"])))
    return out
