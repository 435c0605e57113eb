import numpy as np
import pytest

from upit.corpus import CorpusSpec, gen_corpus
from upit.model import ModelConfig
from upit.pipeline import PipelineConfig

TINY_MODEL = dict(vocab_size=16, d_h=8, n_layers=2, n_heads=2, d_ff=12, max_seq=16)


def tiny_pipeline_dict(**overrides) -> dict:
    """A pipeline small enough to run every stage in a couple of seconds."""
    d = {
        "model": dict(TINY_MODEL),
        "corpus": {"n_train": 96, "n_eval": 32, "seq_len": 12, "vocab_size": 16},
        "prepare": {"m": 2, "pretrain_epochs": 1, "train": {"epochs": 1, "batch_size": 8}},
        "expansion": {"n": 3},
        "selection": {"fraction": 0.1},
        "upcycle": {"k": 2, "preopt": {"epochs": 2, "batch_size": 1}},
        "posttrain": {"epochs": 1, "batch_size": 8},
        "seed": 7,
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            d.setdefault(key, {}).update(value)
        else:
            d[key] = value
    return d


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_lora_config() -> ModelConfig:
    return ModelConfig(**TINY_MODEL, lora_rank=2)


@pytest.fixture
def tiny_corpus():
    return gen_corpus(CorpusSpec(n_train=64, n_eval=32, seq_len=12, vocab_size=16, seed=3))


@pytest.fixture
def tiny_pipeline() -> PipelineConfig:
    return PipelineConfig.from_dict(tiny_pipeline_dict())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance results: criterion id -> (passed, detail). Filled by test_acceptance.py.
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(key: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[key] = (bool(passed), detail)
    print(f"criterion {key}: {'PASS' if passed else 'FAIL'} ({detail})")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} ({detail})")
