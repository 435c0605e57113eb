import hashlib

import numpy as np
import pytest

from upit.checkpoint import load_checkpoint, save_checkpoint
from upit.corpus import CorpusSpec, gen_corpus
from upit.expansion import ExpertSet
from upit.model import DenseModel, ModelConfig, MoEModel, expert_layer_names, init_dense_state
from upit.numerics import Parameter, RngState, Tensor, backward, finite_difference_grad, relative_error
from upit.training import TrainConfig, aux_router_loss, pretrain_dense
from upit.upcycle import (
    RoutingVectors,
    UpcycleConfig,
    assemble_moe,
    assemble_router,
    average_backbone,
    init_routing_vectors,
    preoptimize_expert,
    random_routers,
    router_logits,
    vanilla_upcycle,
)


def backbone_digest(state, cfg):
    expert = set(expert_layer_names(cfg, list(state)))
    h = hashlib.sha256()
    for n in sorted(state):
        if n not in expert:
            h.update(n.encode() + np.ascontiguousarray(state[n]).tobytes())
    return h.hexdigest()


def bucket(n=4, seed=0):
    train, _ = gen_corpus(CorpusSpec(n_train=n, n_eval=0, seq_len=12, vocab_size=16, seed=seed))
    return [s.tokens for s in train]


@pytest.fixture
def expert_state(tiny_config):
    return init_dense_state(tiny_config, RngState(21))


def test_config_rules():
    assert UpcycleConfig().backbone_merge == "uniform-average"
    assert UpcycleConfig(mode="lora").backbone_merge == "frozen-base"
    with pytest.raises(ValueError):
        UpcycleConfig(mode="lora", backbone_merge="uniform-average")
    with pytest.raises(ValueError):
        UpcycleConfig(n_experts=2, k=3)
    with pytest.raises(ValueError):
        UpcycleConfig(mode="moe")


# -- pre-optimization ----------------------------------------------------------


def test_alpha_one_leaves_routing_vectors_unchanged(tiny_config, expert_state):
    vec = init_routing_vectors(1, tiny_config, RngState(0))[0]
    state, out = preoptimize_expert(expert_state, tiny_config, vec, bucket(), TrainConfig(alpha=1.0, epochs=3, batch_size=2))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(vec.vectors, out.vectors))
    assert any(not np.array_equal(state[n], expert_state[n]) for n in expert_layer_names(tiny_config, list(state)))


def test_alpha_zero_routing_gradient(tiny_config, expert_state):
    model = DenseModel(tiny_config, expert_state)
    _, hidden = model.forward(np.array(bucket(3)), return_hidden=True)
    hs = [Tensor(h.data) for h in hidden]  # frozen activations
    gen = np.random.default_rng(0)
    routes = [Parameter(gen.normal(0, 0.5, tiny_config.d_h), f"r{l}") for l in range(tiny_config.n_layers)]

    def loss():
        return aux_router_loss(router_logits(hs, routes))

    grads = backward(loss(), routes)
    for l, r in enumerate(routes):
        fd = finite_difference_grad(lambda _: loss().item(), r)
        assert relative_error(grads[r.name], fd) < 1e-4
        # closed form: d/dr mean softplus(-r.h) over every (layer, token)
        h = hs[l].data.reshape(-1, tiny_config.d_h)
        analytic = -(h * (1 / (1 + np.exp(h @ r.data)))[:, None]).sum(0) / (h.shape[0] * len(routes))
        np.testing.assert_allclose(grads[r.name], analytic, rtol=1e-10, atol=1e-14)


def test_alpha_half_aux_decreases_for_ten_steps(tiny_config, expert_state):
    vec = init_routing_vectors(1, tiny_config, RngState(3))[0]
    log: list = []
    data = bucket(4, seed=1)
    preoptimize_expert(expert_state, tiny_config, vec, data, TrainConfig(alpha=0.5, epochs=10, batch_size=4, learning_rate=3e-3), log)
    aux = [r["aux"] for r in log[:10]]
    assert len(aux) == 10
    assert all(b < a for a, b in zip(aux, aux[1:])), aux


def test_preopt_never_touches_backbone(tiny_config, expert_state):
    before = backbone_digest(expert_state, tiny_config)
    snapshot = {k: v.copy() for k, v in expert_state.items()}
    vec = init_routing_vectors(1, tiny_config, RngState(0))[0]
    state, _ = preoptimize_expert(expert_state, tiny_config, vec, bucket(), TrainConfig(epochs=2, batch_size=1))
    assert backbone_digest(state, tiny_config) == before
    assert all(np.array_equal(snapshot[k], expert_state[k]) for k in snapshot)


def test_preopt_lora_trains_only_adapters(tiny_lora_config):
    state0 = init_dense_state(tiny_lora_config, RngState(2))
    vec = init_routing_vectors(1, tiny_lora_config, RngState(0))[0]
    state, _ = preoptimize_expert(state0, tiny_lora_config, vec, bucket(), TrainConfig(epochs=2, batch_size=2))
    changed = {n for n in state if not np.array_equal(state[n], state0[n])}
    assert changed and all(n.endswith(("lora_A", "lora_B")) for n in changed)


def test_empty_bucket_warns_and_keeps_init(tiny_config, expert_state):
    vec = init_routing_vectors(1, tiny_config, RngState(0))[0]
    with pytest.warns(UserWarning, match="empty bucket"):
        state, out = preoptimize_expert(expert_state, tiny_config, vec, [], TrainConfig())
    assert all(np.array_equal(a, b) for a, b in zip(vec.vectors, out.vectors))
    assert all(np.array_equal(state[n], expert_state[n]) for n in state)


def test_own_bucket_logit_rises(tiny_config):
    spec = CorpusSpec(n_train=96, n_eval=0, seq_len=12, vocab_size=16, seed=5)
    train, _ = gen_corpus(spec)
    base = pretrain_dense(DenseModel(tiny_config, init_dense_state(tiny_config, RngState(0))), train, TrainConfig(epochs=2, batch_size=8))
    own = [s.tokens for s in train if s.domain == 0][:6]
    vec = init_routing_vectors(1, tiny_config, RngState(9))[0]

    def mean_logit(state, vectors):
        _, hidden = DenseModel(tiny_config, state).forward(np.array(own), return_hidden=True)
        return np.mean([h.data @ v for h, v in zip(hidden, vectors)])

    state, out = preoptimize_expert(base.state_dict(), tiny_config, vec, own, TrainConfig(epochs=4, batch_size=1, learning_rate=3e-4))
    assert mean_logit(state, out.vectors) > mean_logit(base.state_dict(), vec.vectors)


def test_routing_vector_init_is_seeded(tiny_config):
    a = init_routing_vectors(3, tiny_config, RngState(1))
    b = init_routing_vectors(3, tiny_config, RngState(1))
    assert all(np.array_equal(x, y) for va, vb in zip(a, b) for x, y in zip(va.vectors, vb.vectors))
    assert [len(v.vectors) for v in a] == [tiny_config.n_layers] * 3


# -- router and backbone -----------------------------------------------------


def test_router_single_column():
    v = np.array([0.25, -1.0, 3.0])
    (r,) = assemble_router([RoutingVectors(0, [v])])
    assert r.shape == (3, 1) and r[:, 0].tobytes() == v.tobytes()


def test_router_identity_example():
    (r,) = assemble_router([RoutingVectors(1, [np.array([0.0, 1.0])]), RoutingVectors(0, [np.array([1.0, 0.0])])])
    assert r.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    assert (np.array([3.0, 5.0]) @ r).tolist() == [3.0, 5.0]


def test_router_columns_round_trip():
    gen = np.random.default_rng(0)
    vecs = [RoutingVectors(i, [gen.normal(size=5) for _ in range(2)]) for i in range(4)]
    routers = assemble_router(vecs)
    h = gen.normal(size=5)
    for l, r in enumerate(routers):
        for i in range(4):
            assert r[:, i].tobytes() == vecs[i].vectors[l].tobytes()
            assert (h @ r)[i] == pytest.approx(h @ vecs[i].vectors[l], abs=1e-15)


@pytest.mark.parametrize(
    "vecs",
    [
        [],
        [RoutingVectors(0, [np.ones(2)]), RoutingVectors(2, [np.ones(2)])],
        [RoutingVectors(0, [np.ones(2)]), RoutingVectors(1, [np.ones(3)])],
        [RoutingVectors(0, [np.ones(2), np.ones(2)]), RoutingVectors(1, [np.ones(2)])],
    ],
)
def test_router_errors(vecs):
    with pytest.raises(ValueError):
        assemble_router(vecs)


def test_average_backbone_examples():
    a = {"s": np.array(2.0), "layer.0.ffn.up": np.ones(2)}
    b = {"s": np.array(4.0), "layer.0.ffn.up": np.zeros(2)}
    assert average_backbone([a, b], [0.5, 0.5]) == {"s": 3.0}
    assert average_backbone([a, b], [0.0, 1.0])["s"] == 4.0
    assert average_backbone([a, a], [0.3, 0.7])["s"] == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ValueError):
        average_backbone([a, b], [0.5, 0.6])
    with pytest.raises(ValueError):
        average_backbone([a, {"s": np.ones(2), "layer.0.ffn.up": np.ones(2)}], [0.5, 0.5])


# -- assembly ----------------------------------------------------------------


def identical_set(cfg, n, seed=0):
    base = init_dense_state(cfg, RngState(seed))
    return ExpertSet(cfg, base, [{k: v.copy() for k, v in base.items()} for _ in range(n)])


def test_identical_experts_match_dense(tiny_config):
    s = identical_set(tiny_config, 3)
    moe = assemble_moe(s, random_routers(tiny_config, 3, RngState(1), std=1.0), UpcycleConfig(n_experts=3, k=2))
    tokens = np.random.default_rng(0).integers(0, 16, (5, 10))
    diff = np.abs(moe.forward(tokens).data - DenseModel(tiny_config, s.base).forward(tokens).data).max()
    assert diff < 1e-9


def test_lora_zero_adapters_match_base(tiny_lora_config):
    s = identical_set(tiny_lora_config, 2)
    for e in s.experts:
        for n in e:
            if n.endswith("lora_A"):
                e[n] = e[n] + 1.0
    moe = assemble_moe(s, random_routers(tiny_lora_config, 2, RngState(1), std=1.0), UpcycleConfig(mode="lora", n_experts=2, k=1))
    cfg_plain = ModelConfig(**{**tiny_lora_config.to_dict(), "lora_rank": 0})
    plain = {n: v for n, v in s.base.items() if not n.endswith(("lora_A", "lora_B"))}
    tokens = np.random.default_rng(1).integers(0, 16, (4, 8))
    diff = np.abs(moe.forward(tokens).data - DenseModel(cfg_plain, plain).forward(tokens).data).max()
    assert diff < 1e-9


def test_assembled_save_load_forward(tmp_path, tiny_config):
    gen = np.random.default_rng(0)
    base = init_dense_state(tiny_config, RngState(0))
    experts = [{k: v + 0.1 * gen.normal(size=v.shape) for k, v in base.items()} for _ in range(3)]
    moe = assemble_moe(ExpertSet(tiny_config, base, experts), random_routers(tiny_config, 3, RngState(2)), UpcycleConfig(n_experts=3, k=2))
    f32 = {k: v.astype(np.float32).astype(np.float64) for k, v in moe.state_dict().items()}
    moe = MoEModel(tiny_config, 3, 2, f32)
    save_checkpoint(moe, {}, tmp_path / "moe.upck")
    back, _ = load_checkpoint(tmp_path / "moe.upck")
    tokens = gen.integers(0, 16, (3, 9))
    assert back.forward(tokens).data.tobytes() == moe.forward(tokens).data.tobytes()


def test_assembly_uses_average_backbone_and_own_ffn(tiny_config):
    gen = np.random.default_rng(3)
    base = init_dense_state(tiny_config, RngState(0))
    experts = [{k: v + gen.normal(size=v.shape) for k, v in base.items()} for _ in range(2)]
    moe = assemble_moe(ExpertSet(tiny_config, base, experts), random_routers(tiny_config, 2, RngState(2)), UpcycleConfig(n_experts=2, k=1))
    st = moe.state_dict()
    np.testing.assert_allclose(st["lm_head"], (experts[0]["lm_head"] + experts[1]["lm_head"]) / 2, atol=1e-15)
    assert np.array_equal(st["layer.1.expert.1.up"], experts[1]["layer.1.ffn.up"])


def test_assembly_consistency_errors(tiny_config):
    s = identical_set(tiny_config, 2)
    routers = random_routers(tiny_config, 2, RngState(0))
    with pytest.raises(ValueError):
        assemble_moe(s, routers, UpcycleConfig(n_experts=3, k=1))
    with pytest.raises(ValueError):
        assemble_moe(s, routers, UpcycleConfig(mode="lora", n_experts=2, k=1))
    with pytest.raises(ValueError):
        assemble_moe(s, routers[:1], UpcycleConfig(n_experts=2, k=1))
    with pytest.raises(ValueError):
        assemble_moe(s, [r.T for r in routers], UpcycleConfig(n_experts=2, k=1))


# -- vanilla baseline ------------------------------------------------------------


@pytest.mark.parametrize("lora", [False, True])
def test_vanilla_matches_dense(tiny_config, tiny_lora_config, lora):
    cfg = tiny_lora_config if lora else tiny_config
    state = init_dense_state(cfg, RngState(4))
    moe = vanilla_upcycle(state, cfg, 4, 2, RngState(0))
    tokens = np.random.default_rng(2).integers(0, 16, (3, 11))
    assert np.abs(moe.forward(tokens).data - DenseModel(cfg, state).forward(tokens).data).max() < 1e-9


def test_vanilla_router_seeded(tiny_config):
    state = init_dense_state(tiny_config, RngState(4))
    a = vanilla_upcycle(state, tiny_config, 4, 2, RngState(7)).state_dict()
    b = vanilla_upcycle(state, tiny_config, 4, 2, RngState(7)).state_dict()
    assert a["layer.0.router"].tobytes() == b["layer.0.router"].tobytes()
    with pytest.raises(ValueError):
        vanilla_upcycle(state, tiny_config, 0, 1, RngState(7))


def test_router_entry_mean():
    cfg = ModelConfig(vocab_size=8, d_h=100, n_layers=1, n_heads=4, d_ff=4, max_seq=4)
    (r,) = random_routers(cfg, 100, RngState(11))
    assert r.size == 10_000
    assert abs(r.mean()) <= 4 * 0.02 / 100
    assert r.std() == pytest.approx(0.02, rel=0.05)


@pytest.mark.parametrize("lora", [False, True])
def test_upit_and_vanilla_same_architecture(tiny_config, tiny_lora_config, lora):
    cfg = tiny_lora_config if lora else tiny_config
    s = identical_set(cfg, 4)
    upit = assemble_moe(s, random_routers(cfg, 4, RngState(0)), UpcycleConfig(mode="lora" if lora else "ffn", n_experts=4, k=2))
    vanilla = vanilla_upcycle(s.base, cfg, 4, 2, RngState(0))
    shapes = lambda m: {k: v.shape for k, v in m.state_dict().items()}
    assert shapes(upit) == shapes(vanilla)
    assert sum(v.size for v in upit.state_dict().values()) == sum(v.size for v in vanilla.state_dict().values())
