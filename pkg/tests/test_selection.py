import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upit.model import DenseModel, ModelConfig, init_dense_state
from upit.numerics import RngState
from upit.selection import (
    PerplexityTable,
    SeedDataset,
    assign_buckets,
    assign_random,
    build_ppl_table,
    buckets_to_json,
    default_capacity,
    read_buckets,
    sample_seed,
    write_buckets,
)


def straight_line_assign(rows, capacity):
    """Step-by-step greedy pass: plain lists, selection sort, explicit tie rule."""
    n = len(rows[0])
    buckets = [[] for _ in range(n)]
    dropped = []
    for i, row in enumerate(rows):
        order = []
        remaining = list(range(n))
        while remaining:
            best = remaining[0]
            for j in remaining:
                if row[j] < row[best]:
                    best = j
            order.append(best)
            remaining.remove(best)
        placed = False
        for j in order:
            if len(buckets[j]) < capacity:
                buckets[j].append(i)
                placed = True
                break
        if not placed:
            dropped.append(i)
    return buckets, dropped


def uniform_model(vocab=64):
    cfg = ModelConfig(vocab_size=vocab, d_h=8, n_layers=1, n_heads=2, d_ff=8, max_seq=8)
    state = init_dense_state(cfg, RngState(0))
    state["lm_head"] = np.zeros_like(state["lm_head"])
    return DenseModel(cfg, state)


# -- seed sampling -----------------------------------------------------------


def test_seed_size_one_percent_of_500():
    corpus = [(i % 7, 1, 2) for i in range(500)]
    assert len(sample_seed(corpus, 0.01, RngState(0))) == 5


def test_seed_full_fraction_is_permutation():
    corpus = list(range(40))
    seed = sample_seed([(i,) for i in corpus], 1.0, RngState(1))
    assert sorted(seed.sample_ids) == corpus
    assert seed.sample_ids != corpus


def test_seed_is_deterministic_and_unique(tiny_corpus):
    a = sample_seed(tiny_corpus[0], 0.3, RngState(4))
    b = sample_seed(tiny_corpus[0], 0.3, RngState(4))
    assert a.sample_ids == b.sample_ids
    assert len(set(a.sample_ids)) == len(a)
    by_id = {s.sample_id: tuple(s.tokens) for s in tiny_corpus[0]}
    assert all(by_id[i] == s for i, s in zip(a.sample_ids, a.samples))


def test_seed_minimum_one():
    assert len(sample_seed([(1, 2)] * 10, 0.001, RngState(0))) == 1


@pytest.mark.parametrize("fraction", [0.0, -0.5, 1.01])
def test_seed_fraction_bounds(fraction):
    with pytest.raises(ValueError):
        sample_seed([(1,)], fraction, RngState(0))


def test_seed_empty_corpus():
    with pytest.raises(ValueError):
        sample_seed([], 0.5, RngState(0))


# -- perplexity table ----------------------------------------------------------


def test_uniform_model_table_is_vocab_size():
    seed = SeedDataset([0, 1, 2], [(1, 5, 9, 63), (0, 0, 0), (7, 3)], 1.0)
    table = build_ppl_table([uniform_model()], seed)
    assert table.values.shape == (3, 1)
    np.testing.assert_allclose(table.values, 64.0, rtol=1e-12)


def test_table_shape_and_duplicate_rows(tiny_config):
    models = [DenseModel(tiny_config, init_dense_state(tiny_config, RngState(s))) for s in range(3)]
    seed = SeedDataset([10, 11, 12], [(1, 2, 3, 4), (5, 6, 7), (1, 2, 3, 4)], 1.0)
    table = build_ppl_table(models, seed)
    assert table.values.shape == (3, 3)
    assert table.values[0].tolist() == table.values[2].tolist()
    assert table.sample_ids == [10, 11, 12]


def test_table_needs_experts():
    with pytest.raises(ValueError):
        build_ppl_table([], SeedDataset([0], [(1, 2)], 1.0))


@pytest.mark.parametrize("bad", [[[0.0, 1.0]], [[np.inf, 1.0]], [[np.nan, 2.0]], [[-1.0, 2.0]]])
def test_table_rejects_invalid_entries(bad):
    with pytest.raises(ValueError):
        PerplexityTable([0], bad)


# -- greedy assignment ---------------------------------------------------------


def test_single_expert_takes_everything():
    table = PerplexityTable([3, 1, 2], [[5.0], [2.0], [9.0]])
    out = assign_buckets(table, 3)
    assert out.buckets[0].sample_ids == [3, 1, 2] and out.dropped_count == 0


def test_hand_trace_capacity_one():
    table = PerplexityTable([1, 2], [[2.0, 9.0], [3.0, 8.0]])
    out = assign_buckets(table, 1)
    assert out.buckets[0].sample_ids == [1]
    assert out.buckets[1].sample_ids == [2]


def test_third_sample_dropped():
    table = PerplexityTable([1, 2, 3], [[2.0, 9.0], [3.0, 8.0], [1.0, 1.0]])
    out = assign_buckets(table, 1)
    assert out.dropped == [3]


def test_ties_go_to_lower_index():
    out = assign_buckets(PerplexityTable([0, 1], [[4.0, 4.0, 4.0], [4.0, 4.0, 4.0]]), 1)
    assert [b.sample_ids for b in out.buckets] == [[0], [1], []]


def test_capacity_must_be_positive():
    with pytest.raises(ValueError):
        assign_buckets(PerplexityTable([0], [[1.0]]), 0)


def test_default_capacity():
    assert default_capacity(20, 8) == 3
    assert default_capacity(16, 8) == 2
    assert default_capacity(0, 4) == 1


tables = st.integers(1, 4).flatmap(
    lambda n: st.tuples(
        st.lists(st.lists(st.sampled_from([1.0, 1.5, 2.0, 3.0, 7.5, 64.0]), min_size=n, max_size=n), min_size=1, max_size=20),
        st.integers(1, 8),
    )
)


@settings(max_examples=200, deadline=None)
@given(tables)
def test_matches_straight_line_oracle(data):
    rows, cap = data
    out = assign_buckets(PerplexityTable(list(range(len(rows))), rows), cap)
    buckets, dropped = straight_line_assign(rows, cap)
    assert [b.sample_ids for b in out.buckets] == buckets
    assert out.dropped == dropped


@settings(max_examples=200, deadline=None)
@given(tables)
def test_partition_property(data):
    rows, cap = data
    out = assign_buckets(PerplexityTable(list(range(len(rows))), rows), cap)
    placed = [s for b in out.buckets for s in b.sample_ids]
    assert len(placed) == len(set(placed))
    assert all(len(b.sample_ids) <= cap for b in out.buckets)
    assert len(placed) + out.dropped_count == len(rows)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(1.0, 100.0), min_size=3, max_size=3), min_size=1, max_size=10))
def test_ample_capacity_means_argmin(rows):
    out = assign_buckets(PerplexityTable(list(range(len(rows))), rows), len(rows))
    owner = {s: b.expert_index for b in out.buckets for s in b.sample_ids}
    assert all(owner[i] == int(np.argmin(r)) for i, r in enumerate(rows))


def test_random_assignment_respects_capacity():
    out = assign_random(list(range(10)), 3, 3, RngState(0))
    sizes = [len(b.sample_ids) for b in out.buckets]
    assert max(sizes) <= 3 and sum(sizes) == 9 and out.dropped_count == 1
    again = assign_random(list(range(10)), 3, 3, RngState(0))
    assert [b.sample_ids for b in again.buckets] == [b.sample_ids for b in out.buckets]


def test_bucket_json_round_trip(tmp_path):
    out = assign_buckets(PerplexityTable([5, 6, 7], [[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]), 1)
    path = tmp_path / "buckets.json"
    write_buckets(out, path)
    buckets, dropped = read_buckets(path)
    assert dropped == 1
    assert [(b.expert_index, b.capacity, b.sample_ids) for b in buckets] == [(0, 1, [5]), (1, 1, [6])]
    assert buckets_to_json(out)[0]["dropped_count"] == 1
