"""Attention normalization, inference-network semantics, the model loss
against a hand-assembled oracle, and model training on scripted data."""

import numpy as np
import pytest

from causalmac import graph as cg
from causalmac.distributions import Categorical, Gaussian
from causalmac.env import Decision, EnvConfig
from causalmac.errors import ContractError, UsageError
from causalmac.inference import (
    CausalWorldModel,
    InferenceNetwork,
    TargetSpec,
    attention_weights,
    write_attention_csv,
)
from causalmac.nn import MLP, ParameterStore

from conftest import collect_mixture, rng_from


# ---------------------------------------------------------------------------
# attention weights
# ---------------------------------------------------------------------------


def test_symmetric_two_state_scores():
    alphas, alpha_a = attention_weights([0.0, 0.0])
    assert np.allclose(alphas, [1 / 3, 1 / 3], atol=1e-15)
    assert abs(alpha_a - 1 / 3) < 1e-15


def test_log2_score():
    alphas, alpha_a = attention_weights([np.log(2.0)])
    assert abs(alphas[0] - 2 / 3) < 1e-12
    assert abs(alpha_a - 1 / 3) < 1e-12


def test_large_scores_stay_normalized():
    alphas, alpha_a = attention_weights([50.0, 50.0])
    assert np.all(np.isfinite(alphas))
    assert abs(alphas.sum() + alpha_a - 1.0) < 1e-9


def test_against_extended_precision_oracle():
    rng = rng_from(0)
    for _ in range(500):
        scores = rng.uniform(-50, 50, size=int(rng.integers(1, 9)))
        alphas, alpha_a = attention_weights(scores)
        hi = np.exp(np.asarray(scores, dtype=np.longdouble))
        denom = 1.0 + hi.sum()
        assert np.max(np.abs(alphas - (hi / denom).astype(float))) < 1e-12
        assert abs(alpha_a - float(1.0 / denom)) < 1e-12


def test_normalization_many_random_vectors():
    rng = rng_from(1)
    for _ in range(2000):
        scores = rng.uniform(-50, 50, size=int(rng.integers(1, 9)))
        alphas, alpha_a = attention_weights(scores)
        assert abs(alphas.sum() + alpha_a - 1.0) < 1e-9


def test_empty_state_set_gives_all_weight_to_actions():
    alphas, alpha_a = attention_weights([])
    assert alphas.size == 0
    assert alpha_a == 1.0


# ---------------------------------------------------------------------------
# toy networks
# ---------------------------------------------------------------------------


def make_toy_net(kind="gaussian", out_size=1, state_parents=(("s0", "vec4"),),
                 seed=0):
    store = ParameterStore()
    rng = rng_from(seed)
    encoders = {"vec4": MLP(store, "enc/vec4", [4, 64, 64], rng),
                "act2": MLP(store, "enc/act2", [2, 64, 64], rng)}
    keys = {name: store.add(f"keys/{name}", rng.normal(0, 0.01, 32))
            for name, _ in state_parents}
    spec = TargetSpec("toy", kind, out_size, tuple(state_parents),
                      (("a0", "act2"),))
    return InferenceNetwork(spec, store, encoders, keys, rng), store


def toy_inputs(batch=1, n_states=1, seed=3):
    rng = rng_from(seed)
    inputs = {f"s{i}": rng.normal(0, 1, (batch, 4)) for i in range(n_states)}
    inputs["a0"] = rng.normal(0, 1, (batch, 2))
    return inputs


def test_fresh_init_outputs_near_zero_gaussian():
    net, _ = make_toy_net()
    dist, weights = net.distribution(toy_inputs())
    assert isinstance(dist, Gaussian)
    assert abs(float(dist.mean[0])) < 1.0
    assert abs(float(dist.log_std[0])) < 0.5
    assert abs(sum(weights.values()) - 1.0) < 1e-9


def test_no_state_parents_all_weight_on_actions():
    net, _ = make_toy_net(state_parents=())
    dist, weights = net.distribution({"a0": rng_from(0).normal(0, 1, (1, 2))})
    assert weights == {"<actions>": 1.0}


def test_weights_sum_to_one_for_many_inputs():
    net, store = make_toy_net(state_parents=(("s0", "vec4"), ("s1", "vec4")))
    rng = rng_from(9)
    for t in store.tensors():
        t.data = rng.normal(0, 0.5, t.data.shape)
    for i in range(50):
        _, weights = net.distribution(toy_inputs(n_states=2, seed=i))
        assert abs(sum(weights.values()) - 1.0) < 1e-9


def test_missing_parent_named_in_error():
    net, _ = make_toy_net()
    with pytest.raises(ContractError, match="s0"):
        net.forward({"a0": np.zeros((1, 2))})


def test_state_order_does_not_change_output():
    net, store = make_toy_net(state_parents=(("s0", "vec4"), ("s1", "vec4")))
    rng = rng_from(4)
    for t in store.tensors():
        t.data = rng.normal(0, 0.5, t.data.shape)
    base = toy_inputs(n_states=2, seed=8)
    forward_order = {k: base[k] for k in ["s0", "s1", "a0"]}
    reversed_order = {k: base[k] for k in ["a0", "s1", "s0"]}
    d1, _ = net.distribution(forward_order)
    d2, _ = net.distribution(reversed_order)
    assert np.array_equal(d1.mean, d2.mean)
    assert np.array_equal(d1.log_std, d2.log_std)


def test_key_mutation_visible_through_every_network():
    store = ParameterStore()
    rng = rng_from(0)
    encoders = {"vec4": MLP(store, "enc/vec4", [4, 64, 64], rng),
                "act2": MLP(store, "enc/act2", [2, 64, 64], rng)}
    keys = {"s0": store.add("keys/s0", rng.normal(0, 0.01, 32))}
    spec_a = TargetSpec("a", "gaussian", 1, (("s0", "vec4"),), (("a0", "act2"),))
    spec_b = TargetSpec("b", "categorical", 3, (("s0", "vec4"),), (("a0", "act2"),))
    net_a = InferenceNetwork(spec_a, store, encoders, keys, rng)
    net_b = InferenceNetwork(spec_b, store, encoders, keys, rng)
    for t in store.tensors():
        t.data = rng.normal(0, 0.5, t.data.shape)
    inputs = toy_inputs()
    _, before = net_b.distribution(inputs)
    net_a.keys["s0"].data += 5.0  # mutate through network a's handle
    _, after = net_b.distribution(inputs)
    assert before["s0"] != after["s0"]
    assert net_a.keys["s0"] is net_b.keys["s0"]


def test_gaussian_nll_at_mean_unit_std():
    net, store = make_toy_net()
    for name in store.names():
        if name.startswith("net/toy/decoder"):
            store[name].data = np.zeros_like(store[name].data)
    # decoder output is exactly zero: mean 0, log_std 0
    nll = net.nll(toy_inputs(), np.array([0.0]))
    assert abs(nll.data[0] - 0.5 * np.log(2 * np.pi)) < 1e-12


def test_categorical_certain_class_nll_zero():
    net, store = make_toy_net(kind="categorical", out_size=3)
    for name in store.names():
        if name.startswith("net/toy/decoder"):
            store[name].data = np.zeros_like(store[name].data)
    store["net/toy/decoder/l1/b"].data = np.array([500.0, 0.0, 0.0])
    nll = net.nll(toy_inputs(), np.array([0]))
    assert abs(nll.data[0]) < 1e-9


# ---------------------------------------------------------------------------
# the world model
# ---------------------------------------------------------------------------


def small_cfg(**kw):
    defaults = dict(num_nodes=1, buffer_capacity=1, max_steps=8, bler=0.0,
                    history_window=1)
    defaults.update(kw)
    return EnvConfig(**defaults)


def test_model_loss_matches_hand_oracle():
    cfg = small_cfg()
    model = CausalWorldModel(cfg, seed=0, l2=1e-3)
    rng = rng_from(2)
    for t in model.store.tensors():
        t.data = rng.normal(0, 0.3, t.data.shape)
    buffer = collect_mixture(cfg, episodes=2, seed=0)
    batch = buffer.transitions()[:2]

    # oracle: per-transition distributions -> scalar log arithmetic
    total = 0.0
    for tr in batch:
        dist_b, _ = model.infer("ob'", {
            "xb": tr.state_before["gateway"],
            "d1": tr.decisions[0],
        })
        dist_1, _ = model.infer("o1'", {
            "x1": tr.state_before["nodes"][0],
            "a1": tr.decisions[0].action,
        })
        total += -np.log(dist_b.probs[tr.gateway_obs])
        total += -np.log(dist_1.probs[tr.node_obs[0]])
    expected = total / len(batch)
    expected += 1e-3 * sum(float(np.sum(t.data ** 2))
                           for t in model.store.tensors())
    got = model.loss(batch).item()
    assert abs(got - expected) < 1e-10


def test_model_loss_empty_batch_raises():
    model = CausalWorldModel(small_cfg(), seed=0)
    with pytest.raises(UsageError):
        model.loss([])


def test_nonparent_perturbation_is_invisible():
    """Metamorphic check: o1' reads only its parents, so changing node 2's
    decision, the gateway window, or node 2's window leaves it bit-identical."""
    cfg = small_cfg(num_nodes=2, history_window=1)
    model = CausalWorldModel(cfg, seed=0)
    rng = rng_from(3)
    for t in model.store.tensors():
        t.data = rng.normal(0, 0.3, t.data.shape)
    buffer = collect_mixture(cfg, episodes=2, seed=1)
    base = buffer.transitions()[0]

    import copy
    perturbed = copy.deepcopy(base)
    perturbed.decisions = (base.decisions[0],
                           Decision(1 - base.decisions[1].ucm,
                                    (base.decisions[1].action + 1) % 3))
    other = buffer.transitions()[-1]
    perturbed.state_before = {
        "nodes": (base.state_before["nodes"][0], other.state_before["nodes"][1]),
        "gateway": other.state_before["gateway"],
    }
    perturbed.enc_cache = {}  # windows changed; stale encodings must not leak
    net = model.networks["o1'"]
    out1, _ = net.forward(model._batch_inputs([base]))
    out2, _ = net.forward(model._batch_inputs([perturbed]))
    assert np.array_equal(out1.data, out2.data)


def test_infer_missing_parent():
    from causalmac.env import pad_node_window

    model = CausalWorldModel(small_cfg(), seed=0)
    with pytest.raises(ContractError, match="a1"):
        model.infer("o1'", {"x1": pad_node_window(1)})


def test_categorical_nll_nonnegative():
    cfg = small_cfg()
    model = CausalWorldModel(cfg, seed=3)
    buffer = collect_mixture(cfg, episodes=3, seed=4)
    batch = buffer.transitions()[:4]
    loss = model.loss(batch, l2=0.0)
    assert loss.item() >= 0.0


def test_train_model_zero_steps_is_identity():
    cfg = small_cfg()
    model = CausalWorldModel(cfg, seed=0)
    buffer = collect_mixture(cfg, episodes=5, seed=0)
    before = model.store.snapshot()
    trace = model.train_model(buffer.transitions(), 0, 4, rng_from(0))
    assert trace == []
    after = model.store.snapshot()
    for k in before:
        assert np.array_equal(before[k], after[k])


def test_train_model_skips_small_buffer(caplog):
    cfg = small_cfg()
    model = CausalWorldModel(cfg, seed=0)
    buffer = collect_mixture(cfg, episodes=1, seed=0)
    with caplog.at_level("WARNING"):
        trace = model.train_model(buffer.transitions(), 5, 512, rng_from(0))
    assert trace == []
    assert "skipped" in caplog.text


def test_train_model_deterministic():
    cfg = small_cfg()
    buffer = collect_mixture(cfg, episodes=5, seed=0)

    def run():
        model = CausalWorldModel(cfg, seed=11)
        return model.train_model(buffer.transitions(), 10, 8, rng_from(5))

    assert run() == run()


def test_heldout_nll_decreases_in_trend():
    cfg = small_cfg(buffer_capacity=2)
    train_buf = collect_mixture(cfg, episodes=30, seed=0)
    held_buf = collect_mixture(cfg, episodes=10, seed=99)
    model = CausalWorldModel(cfg, seed=0)
    held = held_buf.transitions()
    before = model.heldout_nll(held)
    trace = model.train_model(train_buf.transitions(), 20, 32, rng_from(1))
    after = model.heldout_nll(held)
    assert after < before
    assert np.mean(trace[-5:]) < np.mean(trace[:5])


def test_attention_csv_format(tmp_path):
    cfg = small_cfg()
    model = CausalWorldModel(cfg, seed=0)
    buffer = collect_mixture(cfg, episodes=1, seed=0)
    tr = buffer.transitions()[0]
    _, _, rows = model.sample_slot(list(tr.state_before["nodes"]),
                                   tr.state_before["gateway"],
                                   list(tr.decisions), rng_from(0))
    path = tmp_path / "attn.csv"
    write_attention_csv(rows, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "target,parent,weight"
    assert len(lines) == 1 + len(rows)
    # each inference call contributed its parents plus the action row
    targets = {row.split(",")[0] for row in lines[1:]}
    assert targets == {"ob'", "o1'"}
