"""Stage orchestration for the full upcycling run.

Stages read and write artifacts under one output directory::

    gen-data        corpus/{train,eval}.jsonl
    prepare         prepare/base.upck, prepare/ckpt_<step>.upck, prepare/selected.json
    expand          experts/expert_<i>.upck
    select          select/{selection,seed,ppl_table,buckets}.json
    init-router     router_init/expert_<i>.upck, router_init/routing_vectors.upck
    upcycle         moe/upcycled.upck
    posttrain       moe/final.upck
    baseline        baseline/{dense_full,vanilla_step0,vanilla_final}.upck
    eval            eval/metrics.json
    analyze-routing analysis/routing.{csv,json}

Every stage writes a :class:`StageRecord` to ``records/<stage>.json`` with
sha256 hashes of what it read and wrote. All randomness is derived from the
single top-level ``seed``.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint as ckpt
from .corpus import CorpusSpec, TaggedSample, domain_ppl, gen_corpus, mixed_ppl, read_records, write_records
from .expansion import ExpertSet, MergeConfig, expand_experts
from .model import DenseModel, ModelConfig, MoEModel, init_dense_state
from .numerics import RngState
from .selection import (
    assign_buckets,
    assign_random,
    build_ppl_table,
    default_capacity,
    read_buckets,
    sample_seed,
    write_buckets,
)
from .training import TrainConfig, posttrain_moe, pretrain_dense, train_dense_with_checkpoints
from .upcycle import (
    RoutingVectors,
    UpcycleConfig,
    assemble_moe,
    assemble_router,
    init_routing_vectors,
    preoptimize_expert,
    random_routers,
    vanilla_upcycle,
)

log = logging.getLogger(__name__)

STAGES = (
    "gen-data",
    "prepare",
    "expand",
    "select",
    "init-router",
    "upcycle",
    "posttrain",
    "baseline",
    "eval",
    "analyze-routing",
)
CHECKPOINT_STRATEGIES = ("front-half", "uniform", "back-half")
SELECTION_STRATEGIES = ("skilled", "random", "off")


class PipelineError(RuntimeError):
    pass


class MissingArtifactError(PipelineError):
    pass


class ConfigError(PipelineError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrepareConfig:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=2))
    m: int = 4
    strategy: str = "back-half"
    pretrain_epochs: int = 8


@dataclass(frozen=True)
class ExpansionConfig:
    merge: MergeConfig = field(default_factory=MergeConfig)
    n: int = 8
    parent_selection: str = "genetic"


@dataclass(frozen=True)
class SelectionConfig:
    fraction: float = 0.01
    capacity: int | None = None
    strategy: str = "skilled"


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    prepare: PrepareConfig = field(default_factory=PrepareConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    upcycle: UpcycleConfig = field(default_factory=UpcycleConfig)
    posttrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=2))
    baseline: str = "vanilla"
    seed: int = 0
    analysis_layer: int | None = None

    def __post_init__(self):
        m, n = self.prepare.m, self.expansion.n
        if not n >= m >= 1:
            raise ConfigError(f"need n >= m >= 1, got m={m}, n={n}")
        if self.prepare.strategy not in CHECKPOINT_STRATEGIES:
            raise ConfigError(f"unknown checkpoint strategy {self.prepare.strategy!r}")
        if self.selection.strategy not in SELECTION_STRATEGIES:
            raise ConfigError(f"unknown selection strategy {self.selection.strategy!r}")
        if self.expansion.parent_selection not in ("genetic", "random"):
            raise ConfigError(f"unknown parent selection {self.expansion.parent_selection!r}")
        if self.baseline not in ("none", "vanilla"):
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        if self.upcycle.n_experts != n:
            raise ConfigError(f"upcycle.n_experts={self.upcycle.n_experts} must equal expansion.n={n}")
        if (self.upcycle.mode == "lora") != self.model.lora:
            raise ConfigError("LoRA upcycling needs model.lora_rank >= 1, FFN upcycling needs lora_rank == 0")
        if self.corpus.seq_len > self.model.max_seq or self.corpus.vocab_size != self.model.vocab_size:
            raise ConfigError("corpus seq_len/vocab must fit the model")
        if not 0.0 < self.selection.fraction <= 1.0:
            raise ConfigError("selection fraction must lie in (0, 1]")
        if self.analysis_layer is not None and not 0 <= self.analysis_layer < self.model.n_layers:
            raise ConfigError("analysis_layer out of range")

    @property
    def rng(self) -> RngState:
        return RngState(self.seed)

    @property
    def middle_layer(self) -> int:
        return self.model.n_layers // 2 if self.analysis_layer is None else self.analysis_layer

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"]["ratios"] = list(self.corpus.ratios)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> PipelineConfig:
        d = dict(d)
        kw: dict = {}
        if "model" in d:
            kw["model"] = ModelConfig(**d["model"])
        if "corpus" in d:
            c = dict(d["corpus"])
            if "ratios" in c:
                c["ratios"] = tuple(c["ratios"])
            kw["corpus"] = CorpusSpec(**c)
        if "prepare" in d:
            p = dict(d["prepare"])
            if "train" in p:
                p["train"] = TrainConfig(**{**asdict(PrepareConfig().train), **p["train"]})
            kw["prepare"] = PrepareConfig(**p)
        if "expansion" in d:
            e = dict(d["expansion"])
            if "merge" in e:
                e["merge"] = MergeConfig(**e["merge"])
            kw["expansion"] = ExpansionConfig(**e)
        if "selection" in d:
            kw["selection"] = SelectionConfig(**d["selection"])
        n = kw.get("expansion", ExpansionConfig()).n
        u = dict(d.get("upcycle", {}))
        u.setdefault("n_experts", n)
        if "mode" not in u and kw.get("model", ModelConfig()).lora:
            u["mode"] = "lora"
        if "preopt" in u:
            u["preopt"] = TrainConfig(**{**asdict(UpcycleConfig().preopt), **u["preopt"]})
        kw["upcycle"] = UpcycleConfig(**u)
        if "posttrain" in d:
            kw["posttrain"] = TrainConfig(**{**asdict(PipelineConfig().posttrain), **d["posttrain"]})
        for key in ("baseline", "seed", "analysis_layer"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> PipelineConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_seed(self, seed: int) -> PipelineConfig:
        return dataclasses.replace(self, seed=int(seed))

    def seeded(self) -> PipelineConfig:
        """Copy with every nested seed derived from the top-level seed."""
        rng = self.rng
        s = lambda *label: rng.derive(*label).seed  # noqa: E731
        return dataclasses.replace(
            self,
            corpus=dataclasses.replace(self.corpus, seed=s("corpus")),
            prepare=dataclasses.replace(self.prepare, train=dataclasses.replace(self.prepare.train, seed=s("prepare"))),
            expansion=dataclasses.replace(self.expansion, merge=dataclasses.replace(self.expansion.merge, seed=s("expand"))),
            upcycle=dataclasses.replace(self.upcycle, preopt=dataclasses.replace(self.upcycle.preopt, seed=s("preopt"))),
            posttrain=dataclasses.replace(self.posttrain, seed=s("posttrain")),
        )


@dataclass
class StageRecord:
    stage: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    wall_time: float
    seed: int
    status: str = "ok"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_jsonl(path: Path, rows: Sequence[Mapping]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


@contextlib.contextmanager
def _locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def harvest_steps(total_steps: int, m: int) -> list[int]:
    """``2m`` evenly spaced save points over a run (fewer if the run is short)."""
    return sorted({max(1, round(total_steps * j / (2 * m))) for j in range(1, 2 * m + 1)})


def choose_checkpoints(steps: Sequence[int], m: int, strategy: str) -> list[int]:
    """Pick ``m`` of the harvested checkpoint steps."""
    steps = sorted(steps)
    if len(steps) < m:
        raise PipelineError(f"only {len(steps)} checkpoints harvested, {m} needed")
    if strategy == "front-half":
        return steps[:m]
    if strategy == "back-half":
        return steps[-m:]
    if strategy == "uniform":
        idx = np.round(np.linspace(0, len(steps) - 1, m)).astype(int)
        return [steps[i] for i in idx]
    raise ConfigError(f"unknown checkpoint strategy {strategy!r}")


def analyze_routing(moe: MoEModel, eval_split: Sequence[TaggedSample], layer: int, batch_size: int = 64) -> np.ndarray:
    """Per-domain share of (token, selected slot) pairs sent to each expert at ``layer``.

    Rows are domains ``0..max_domain`` and sum to 1.
    """
    if not eval_split:
        raise ValueError("empty eval split")
    if not 0 <= layer < moe.config.n_layers:
        raise ValueError(f"layer {layer} out of range")
    n_domains = max(s.domain for s in eval_split) + 1
    counts = np.zeros((n_domains, moe.n_experts))
    by_len: dict[int, list[TaggedSample]] = {}
    for s in eval_split:
        by_len.setdefault(len(s.tokens), []).append(s)
    for group in by_len.values():
        for i in range(0, len(group), batch_size):
            chunk = group[i : i + batch_size]
            toks = np.array([s.tokens for s in chunk])
            _, routing = moe.forward(toks, return_routing=True)
            selected = routing[layer][1].reshape(len(chunk), toks.shape[1], moe.n_experts)
            for s, sel in zip(chunk, selected):
                counts[s.domain] += sel.sum(axis=0)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def write_routing(props: np.ndarray, out_dir: Path, stem: str, layer: int, k: int) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "expert", "proportion"])
        for d, row in enumerate(props):
            for e, v in enumerate(row):
                w.writerow([d, e, f"{v:.6f}"])
    json_path = out_dir / f"{stem}.json"
    _write_json(
        json_path,
        {
            "layer": layer,
            "k": k,
            "n_experts": props.shape[1],
            "proportions": props.round(12).tolist(),
            "top_expert": props.argmax(axis=1).tolist(),
            "top_proportion": props.max(axis=1).round(12).tolist(),
        },
    )
    return [csv_path, json_path]


# ---------------------------------------------------------------------------
# The pipeline
# ---------------------------------------------------------------------------


class Pipeline:
    """Runs stages against one output directory."""

    def __init__(self, config: PipelineConfig, out_dir):
        self.config = config.seeded()
        self.out = Path(out_dir)
        self._inputs: dict[str, str] = {}

    # -- paths and artifact access -------------------------------------------

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def _need(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifactError(f"missing prerequisite artifact {p.relative_to(self.out)}")
        self._inputs[str(p.relative_to(self.out))] = _sha(p)
        return p

    def _corpus(self) -> tuple[list[TaggedSample], list[TaggedSample]]:
        return read_records(self._need("corpus", "train.jsonl")), read_records(self._need("corpus", "eval.jsonl"))

    def _load(self, *parts):
        return ckpt.load_checkpoint(self._need(*parts))

    def _expert_files(self, folder: str) -> list[Path]:
        files = sorted(self.path(folder).glob("expert_*.upck"))
        if not files:
            raise MissingArtifactError(f"no expert checkpoints in {folder}/")
        for f in files:
            self._need(folder, f.name)
        return files

    # -- driver --------------------------------------------------------------

    def run_stage(self, stage: str) -> StageRecord:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
        with _locked(self.out):
            return self._run_unlocked(stage)

    def run_all(self, stages: Sequence[str] = STAGES) -> list[StageRecord]:
        with _locked(self.out):
            return [self._run_unlocked(s) for s in stages]

    def _run_unlocked(self, stage: str) -> StageRecord:
        self._inputs = {"config": hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode()).hexdigest()}
        t0 = time.perf_counter()
        log.info("stage %s", stage)
        result = getattr(self, "_stage_" + stage.replace("-", "_"))()
        status, outputs = result if isinstance(result, tuple) else ("ok", result)
        record = StageRecord(
            stage=stage,
            inputs=dict(sorted(self._inputs.items())),
            outputs={str(p.relative_to(self.out)): _sha(p) for p in sorted(outputs)},
            wall_time=time.perf_counter() - t0,
            seed=self.config.seed,
            status=status,
        )
        _write_json(self.path("records", f"{stage}.json"), record.to_dict())
        log.info("stage %s: %s, %d outputs, %.1fs", stage, status, len(record.outputs), record.wall_time)
        return record

    # -- stages --------------------------------------------------------------

    def _stage_gen_data(self) -> list[Path]:
        train, evals = gen_corpus(self.config.corpus)
        paths = [self.path("corpus", "train.jsonl"), self.path("corpus", "eval.jsonl")]
        paths[0].parent.mkdir(parents=True, exist_ok=True)
        write_records(train, paths[0])
        write_records(evals, paths[1])
        return paths

    def _base_model(self) -> DenseModel:
        cfg = self.config
        return DenseModel(cfg.model, init_dense_state(cfg.model, cfg.rng.derive("init")))

    def _pretrained_base(self, train) -> DenseModel:
        cfg = self.config
        model = self._base_model()
        if cfg.prepare.pretrain_epochs:
            seed = cfg.rng.derive("pretrain").seed
            pre_cfg = dataclasses.replace(cfg.prepare.train, epochs=cfg.prepare.pretrain_epochs, seed=seed)
            pretrain_dense(model, train, pre_cfg)
        return model

    def _stage_prepare(self) -> list[Path]:
        cfg = self.config
        train, _ = self._corpus()
        model = self._pretrained_base(train)
        outputs = [self.path("prepare", "base.upck")]
        ckpt.save_checkpoint(model, {"tag": "base", "pretrain_epochs": cfg.prepare.pretrain_epochs}, outputs[0])
        model, _ = ckpt.load_checkpoint(outputs[0])  # continue from the stored (f32) values
        train_cfg = cfg.prepare.train
        total = (len(train) // min(train_cfg.batch_size, len(train))) * train_cfg.epochs
        save_at = harvest_steps(total, cfg.prepare.m)
        loss_log: list = []
        harvested = train_dense_with_checkpoints(model, train, train_cfg, loss_log, save_steps=save_at)
        steps = []
        for dc, meta in harvested:
            p = self.path("prepare", f"ckpt_{meta.step:06d}.upck")
            ckpt.save_checkpoint(dc, None, p)
            outputs.append(p)
            steps.append(meta.step)
        chosen = choose_checkpoints(steps, cfg.prepare.m, cfg.prepare.strategy)
        sel = self.path("prepare", "selected.json")
        _write_json(sel, {"strategy": cfg.prepare.strategy, "steps": chosen, "harvested": steps, "final_step": max(steps)})
        log_path = self.path("prepare", "loss.jsonl")
        _write_jsonl(log_path, loss_log)
        return outputs + [sel, log_path]

    def _prepared(self) -> ExpertSet:
        base, _ = self._load("prepare", "base.upck")
        sel = json.loads(self._need("prepare", "selected.json").read_text())
        experts, prov = [], []
        for step in sel["steps"]:
            m, meta = self._load("prepare", f"ckpt_{step:06d}.upck")
            experts.append(m.state_dict())
            prov.append({"kind": "checkpoint", "step": step, "epoch": meta.get("epoch")})
        return ExpertSet(base.config, base.state_dict(), experts, prov)

    def _stage_expand(self) -> list[Path]:
        cfg = self.config
        pairs: list = []
        expanded = expand_experts(self._prepared(), cfg.expansion.n, cfg.expansion.merge, cfg.expansion.parent_selection, pairs)
        outputs = []
        for i, (state, prov) in enumerate(zip(expanded.experts, expanded.provenance)):
            p = self.path("experts", f"expert_{i:02d}.upck")
            ckpt.save_checkpoint(DenseModel(expanded.config, state), {"index": i, "provenance": prov}, p)
            outputs.append(p)
        pp = self.path("experts", "pairs.json")
        _write_json(pp, {"parent_selection": cfg.expansion.parent_selection, "pairs": [list(x) for x in pairs]})
        return outputs + [pp]

    def _expanded(self, folder: str = "experts") -> tuple[list[DenseModel], list[dict]]:
        models, metas = [], []
        for f in self._expert_files(folder):
            m, meta = self._load(folder, f.name)
            models.append(m)
            metas.append(meta)
        return models, metas

    def _stage_select(self) -> list[Path]:
        cfg = self.config
        strategy = cfg.selection.strategy
        info = self.path("select", "selection.json")
        if strategy == "off":
            _write_json(info, {"strategy": "off"})
            return [info]
        train, _ = self._corpus()
        models, _ = self._expanded()
        seed = sample_seed(train, cfg.selection.fraction, cfg.rng.derive("seed-data"))
        capacity = cfg.selection.capacity or default_capacity(len(seed), len(models))
        if strategy == "skilled":
            table = build_ppl_table(models, seed)
            assignment = assign_buckets(table, capacity)
            table_path = self.path("select", "ppl_table.json")
            _write_json(table_path, {"sample_ids": table.sample_ids, "perplexity": table.values.tolist()})
            extra = [table_path]
        else:
            assignment = assign_random(seed.sample_ids, len(models), capacity, cfg.rng.derive("random-buckets"))
            extra = []
        _write_json(info, {"strategy": strategy, "capacity": capacity, "dropped": assignment.dropped})
        seed_path = self.path("select", "seed.json")
        _write_json(seed_path, {"fraction": seed.source_fraction, "sample_ids": seed.sample_ids})
        buckets = self.path("select", "buckets.json")
        write_buckets(assignment, buckets)
        return [info, seed_path, buckets] + extra

    def _stage_init_router(self):
        cfg = self.config
        info = json.loads(self._need("select", "selection.json").read_text())
        if info["strategy"] == "off":
            log.info("router initialization skipped (selection strategy off)")
            return "skipped", []
        train, _ = self._corpus()
        by_id = {s.sample_id: s for s in train}
        buckets, _ = read_buckets(self._need("select", "buckets.json"))
        models, metas = self._expanded()
        vectors = init_routing_vectors(len(models), cfg.model, cfg.rng.derive("routing-init"))
        outputs, trained, loss_log = [], [], []
        for i, (model, meta) in enumerate(zip(models, metas)):
            samples = [by_id[sid] for sid in buckets[i].sample_ids]
            preopt = dataclasses.replace(cfg.upcycle.preopt, seed=RngState(cfg.upcycle.preopt.seed).derive(i).seed)
            state, rv = preoptimize_expert(model.state_dict(), cfg.model, vectors[i], samples, preopt, loss_log)
            trained.append(rv)
            p = self.path("router_init", f"expert_{i:02d}.upck")
            keep = {k: v for k, v in meta.items() if k != "model"}
            ckpt.save_checkpoint(DenseModel(cfg.model, state), {**keep, "preoptimized": bool(samples)}, p)
            outputs.append(p)
        rv_path = self.path("router_init", "routing_vectors.upck")
        tensors = {f"expert.{v.expert_index}.layer.{l}": vec for v in trained for l, vec in enumerate(v.vectors)}
        rv_path.write_bytes(ckpt.encode(tensors, {"kind": "routing_vectors", "n_experts": len(trained)}))
        log_path = self.path("router_init", "loss.jsonl")
        _write_jsonl(log_path, loss_log)
        return outputs + [rv_path, log_path]

    def _stage_upcycle(self) -> list[Path]:
        cfg = self.config
        base, _ = self._load("prepare", "base.upck")
        info = json.loads(self._need("select", "selection.json").read_text())
        if info["strategy"] == "off":
            models, metas = self._expanded("experts")
            routers = random_routers(cfg.model, len(models), cfg.rng.derive("router-random"))
        else:
            models, metas = self._expanded("router_init")
            tensors, _ = ckpt.read_checkpoint(self._need("router_init", "routing_vectors.upck"))
            vecs = [
                RoutingVectors(i, [tensors[f"expert.{i}.layer.{l}"] for l in range(cfg.model.n_layers)])
                for i in range(len(models))
            ]
            routers = assemble_router(vecs)
        experts = ExpertSet(cfg.model, base.state_dict(), [m.state_dict() for m in models], [m.get("provenance", {}) for m in metas])
        moe = assemble_moe(experts, routers, cfg.upcycle)
        p = self.path("moe", "upcycled.upck")
        ckpt.save_checkpoint(moe, {"tag": "upcycled", "router_init": info["strategy"]}, p)
        return [p]

    def _stage_posttrain(self) -> list[Path]:
        cfg = self.config
        train, _ = self._corpus()
        moe, meta = self._load("moe", "upcycled.upck")
        loss_log: list = []
        posttrain_moe(moe, train, cfg.posttrain, loss_log)
        p = self.path("moe", "final.upck")
        ckpt.save_checkpoint(moe, {"tag": "posttrained", "router_init": meta.get("router_init")}, p)
        lp = self.path("moe", "posttrain_loss.jsonl")
        _write_jsonl(lp, loss_log)
        return [p, lp]

    def _stage_baseline(self):
        cfg = self.config
        if cfg.baseline == "none":
            return "skipped", []
        train, _ = self._corpus()
        sel = json.loads(self._need("prepare", "selected.json").read_text())
        final, _ = self._load("prepare", f"ckpt_{sel['final_step']:06d}.upck")
        outputs = []

        # dense model trained for the same total number of epochs from the same base
        dense, _ = self._load("prepare", "base.upck")
        full_cfg = dataclasses.replace(cfg.prepare.train, epochs=cfg.prepare.train.epochs + cfg.posttrain.epochs)
        dense_log: list = []
        train_dense_with_checkpoints(dense, train, full_cfg, dense_log, save_steps=[])
        p = self.path("baseline", "dense_full.upck")
        ckpt.save_checkpoint(dense, {"tag": "dense_full", "epochs": full_cfg.epochs}, p)
        outputs.append(p)

        vanilla = vanilla_upcycle(
            final.state_dict(), cfg.model, cfg.upcycle.n_experts, cfg.upcycle.k, cfg.rng.derive("vanilla"), cfg.upcycle.gate_mode
        )
        p = self.path("baseline", "vanilla_step0.upck")
        ckpt.save_checkpoint(vanilla, {"tag": "vanilla_step0"}, p)
        outputs.append(p)
        vlog: list = []
        posttrain_moe(vanilla, train, cfg.posttrain, vlog)
        p = self.path("baseline", "vanilla_final.upck")
        ckpt.save_checkpoint(vanilla, {"tag": "vanilla_final"}, p)
        outputs.append(p)
        for name, rows in (("dense_loss.jsonl", dense_log), ("vanilla_loss.jsonl", vlog)):
            lp = self.path("baseline", name)
            _write_jsonl(lp, rows)
            outputs.append(lp)
        return outputs

    def _stage_eval(self) -> list[Path]:
        _, evals = self._corpus()
        n_domains = self.config.corpus.n_domains
        candidates = {
            "upit": ("moe", "final.upck"),
            "upit_step0": ("moe", "upcycled.upck"),
            "dense_full": ("baseline", "dense_full.upck"),
            "vanilla_final": ("baseline", "vanilla_final.upck"),
            "vanilla_step0": ("baseline", "vanilla_step0.upck"),
        }
        metrics = {}
        for name, parts in candidates.items():
            if not self.path(*parts).exists():
                continue
            model, _ = self._load(*parts)
            metrics[name] = {
                "mixed_ppl": mixed_ppl(model, evals),
                "domain_ppl": domain_ppl(model, evals, n_domains).tolist(),
            }
        if "upit" not in metrics:
            raise MissingArtifactError("missing prerequisite artifact moe/final.upck")
        p = self.path("eval", "metrics.json")
        _write_json(p, metrics)
        return [p]

    def _stage_analyze_routing(self) -> list[Path]:
        _, evals = self._corpus()
        layer = self.config.middle_layer
        outputs = []
        for stem, parts in (("routing", ("moe", "final.upck")), ("routing_vanilla_step0", ("baseline", "vanilla_step0.upck"))):
            if stem != "routing" and not self.path(*parts).exists():
                continue
            moe, _ = self._load(*parts)
            props = analyze_routing(moe, evals, layer)
            outputs += write_routing(props, self.path("analysis"), stem, layer, moe.k)
        return outputs


def run_stage(config: PipelineConfig, stage: str, out_dir) -> StageRecord:
    return Pipeline(config, out_dir).run_stage(stage)


def run_pipeline(config: PipelineConfig, out_dir, stages: Sequence[str] = STAGES) -> list[StageRecord]:
    return Pipeline(config, out_dir).run_all(stages)
