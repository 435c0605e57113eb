"""Upcycling a dense instruction-tuned model into a mixture of experts."""

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CorpusSpec, TaggedSample, domain_ppl, gen_corpus, mixed_ppl
from .expansion import ExpertSet, MergeConfig, dare, expand_experts, pairwise_similarity, select_parents
from .model import DenseModel, ModelConfig, MoEModel, init_dense_state, perplexity, top_k_gate
from .numerics import RngState, Tensor
from .pipeline import PipelineConfig, StageRecord, analyze_routing, run_pipeline, run_stage
from .selection import PerplexityTable, assign_buckets, build_ppl_table, sample_seed
from .training import TrainConfig, posttrain_moe, train_dense_with_checkpoints
from .upcycle import UpcycleConfig, assemble_moe, preoptimize_expert, vanilla_upcycle

__version__ = "0.1.0"

__all__ = [
    "CorpusSpec",
    "DenseModel",
    "ExpertSet",
    "MergeConfig",
    "ModelConfig",
    "MoEModel",
    "PerplexityTable",
    "PipelineConfig",
    "RngState",
    "StageRecord",
    "TaggedSample",
    "Tensor",
    "TrainConfig",
    "UpcycleConfig",
    "analyze_routing",
    "assemble_moe",
    "assign_buckets",
    "build_ppl_table",
    "dare",
    "domain_ppl",
    "expand_experts",
    "gen_corpus",
    "init_dense_state",
    "load_checkpoint",
    "mixed_ppl",
    "pairwise_similarity",
    "perplexity",
    "posttrain_moe",
    "preoptimize_expert",
    "run_pipeline",
    "run_stage",
    "sample_seed",
    "save_checkpoint",
    "select_parents",
    "top_k_gate",
    "train_dense_with_checkpoints",
    "vanilla_upcycle",
]
