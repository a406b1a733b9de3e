"""Policy/value networks, GAE against a brute-force oracle, and the
clipped-surrogate update."""

import numpy as np
import pytest

from causalmac import autodiff as ad
from causalmac.agents import (
    AdvantageBatch,
    PolicyNetwork,
    ValueNetwork,
    act,
    clipped_surrogate_term,
    gae,
    ppo_update,
)
from causalmac.autodiff import Tensor, no_grad
from causalmac.errors import ContractError, UsageError
from causalmac.nn import Adam, ParameterStore

from conftest import rng_from
from test_autodiff import finite_diff_grad

ENC_DIM = 13


def make_policy(seed=0, zero=False):
    store = ParameterStore()
    policy = PolicyNetwork(store, "p", ENC_DIM, rng_from(seed))
    if zero:
        for t in store.tensors():
            t.data = np.zeros_like(t.data)
    return policy, store


def make_value(seed=0):
    store = ParameterStore()
    return ValueNetwork(store, "v", ENC_DIM, rng_from(seed)), store


# ---------------------------------------------------------------------------
# act
# ---------------------------------------------------------------------------


def test_zero_logits_uniform_joint_log_prob():
    policy, _ = make_policy(zero=True)
    state = rng_from(0).normal(0, 1, ENC_DIM)
    for seed in range(5):
        _, lp = act(policy, state, rng_from(seed))
        assert abs(lp - np.log(1 / 6)) < 1e-12


def test_argmax_mode_picks_peak():
    policy, store = make_policy(zero=True)
    store["p/action/b"].data = np.array([5.0, 0.0, 0.0])
    store["p/ucm/b"].data = np.array([0.0, 5.0])
    d, _ = act(policy, np.zeros(ENC_DIM), rng_from(0), argmax=True)
    assert (d.action, d.ucm) == (0, 1)


def test_sampled_frequencies_match_head_softmax():
    policy, store = make_policy(seed=3)
    rng = rng_from(7)
    for t in store.tensors():
        t.data = rng.normal(0, 0.4, t.data.shape)
    state = rng.normal(0, 1, ENC_DIM)
    with no_grad():
        a_logits, n_logits = policy.logits(Tensor(state[None, :]))

    def probs(row):
        e = np.exp(row - row.max())
        return e / e.sum()

    pa = probs(a_logits.data[0])
    pn = probs(n_logits.data[0])
    draw_rng = rng_from(11)
    actions = np.zeros(3)
    ucms = np.zeros(2)
    n = 10_000
    for _ in range(n):
        d, _ = act(policy, state, draw_rng)
        actions[d.action] += 1
        ucms[d.ucm] += 1
    assert np.max(np.abs(actions / n - pa)) < 0.02
    assert np.max(np.abs(ucms / n - pn)) < 0.02


def test_act_log_prob_consistent_with_reevaluation():
    policy, store = make_policy(seed=1)
    rng = rng_from(2)
    for t in store.tensors():
        t.data = rng.normal(0, 0.3, t.data.shape)
    for seed in range(20):
        state = rng.normal(0, 1, ENC_DIM)
        d, lp = act(policy, state, rng_from(seed))
        with no_grad():
            lp2 = policy.log_prob(Tensor(state[None, :]),
                                  np.array([d.ucm]), np.array([d.action]))
        assert abs(lp - float(lp2.data[0])) < 1e-12


def test_logit_shift_invariance():
    policy, store = make_policy(seed=5)
    state = rng_from(0).normal(0, 1, ENC_DIM)
    with no_grad():
        before, _ = policy.logits(Tensor(state[None, :]))
    p_before = np.exp(before.data - before.data.max())
    p_before /= p_before.sum()
    store["p/action/b"].data += 3.7  # constant shift on every logit
    with no_grad():
        after, _ = policy.logits(Tensor(state[None, :]))
    p_after = np.exp(after.data - after.data.max())
    p_after /= p_after.sum()
    assert np.max(np.abs(p_before - p_after)) < 1e-12


# ---------------------------------------------------------------------------
# gae
# ---------------------------------------------------------------------------


def gae_oracle(rewards, values, dones, gamma, lam):
    """O(T^2) definition: discounted sums of TD residuals, cut at done."""
    T = len(rewards)
    adv = np.zeros(T)
    for t in range(T):
        coef = 1.0
        for step in range(t, T):
            delta = (rewards[step]
                     + gamma * values[step + 1] * (1 - dones[step])
                     - values[step])
            adv[t] += coef * delta
            if dones[step]:
                break
            coef *= gamma * lam
    return adv


def test_single_terminal_step():
    adv, ret = gae([-1.0], [0.0, 0.0], [True], 0.99, 0.95)
    assert adv[0] == -1.0
    assert ret[0] == -1.0


def test_undiscounted_returns():
    adv, _ = gae([-1.0, -1.0], [0.0, 0.0, 0.0], [False, True], 1.0, 1.0)
    assert np.allclose(adv, [-2.0, -1.0], atol=1e-15)


def test_length_mismatch():
    with pytest.raises(ContractError):
        gae([1.0, 1.0], [0.0, 0.0], [False, False], 0.9, 0.9)


@pytest.mark.parametrize("seed", range(30))
def test_gae_matches_brute_force(seed):
    rng = rng_from(seed)
    T = 6
    rewards = rng.normal(0, 1, T)
    values = rng.normal(0, 1, T + 1)
    dones = [False] * (T - 1) + [bool(rng.integers(2))]
    gamma = float(rng.uniform(0.5, 1.0))
    lam = float(rng.uniform(0.5, 1.0))
    adv, ret = gae(rewards, values, dones, gamma, lam)
    want = gae_oracle(rewards, values, dones, gamma, lam)
    assert np.max(np.abs(adv - want)) < 1e-12
    assert np.max(np.abs(ret - (want + values[:T]))) < 1e-12


# ---------------------------------------------------------------------------
# ppo
# ---------------------------------------------------------------------------


def test_clip_arithmetic_positive_advantage():
    assert abs(clipped_surrogate_term(1.5, 1.0, 0.2) - 1.2) < 1e-15


def test_clip_arithmetic_negative_advantage():
    assert abs(clipped_surrogate_term(0.5, -1.0, 0.2) - (-0.8)) < 1e-15


def test_surrogate_never_rewards_beyond_clip_bound():
    """The objective term is bounded above by (1+eps)|A| everywhere; for
    positive advantages its magnitude is too. (For negative advantages the
    pessimistic min is intentionally unbounded below.)"""
    rng = rng_from(0)
    eps = 0.2
    for _ in range(5000):
        ratio = float(rng.uniform(0.0, 5.0))
        adv = float(rng.normal(0, 2.0))
        term = clipped_surrogate_term(ratio, adv, eps)
        assert term <= (1 + eps) * abs(adv) + 1e-12
        if adv > 0:
            assert abs(term) <= (1 + eps) * adv + 1e-12


def random_batch(policy, n=12, seed=0):
    rng = rng_from(seed)
    states = rng.normal(0, 1, (n, ENC_DIM))
    ucms = rng.integers(0, 2, n)
    actions = rng.integers(0, 3, n)
    with no_grad():
        old_lp = policy.log_prob(Tensor(states), ucms, actions).data.copy()
    adv = rng.normal(0, 1, n)
    returns = rng.normal(-3, 1, n)
    return AdvantageBatch(states, ucms, actions, old_lp, adv, returns)


def test_empty_batch_rejected():
    policy, pstore = make_policy()
    value, vstore = make_value()
    empty = AdvantageBatch(np.zeros((0, ENC_DIM)), np.zeros(0, int),
                           np.zeros(0, int), np.zeros(0), np.zeros(0),
                           np.zeros(0))
    with pytest.raises(UsageError):
        ppo_update(policy, value, empty, Adam(pstore), Adam(vstore), rng_from(0))


def test_ratio_one_gradient_equals_vanilla_policy_gradient():
    policy, store = make_policy(seed=2)
    rng = rng_from(1)
    for t in store.tensors():
        t.data = rng.normal(0, 0.3, t.data.shape)
    batch = random_batch(policy, seed=4)
    adv = Tensor(batch.advantages)

    store.zero_grad()
    lp = policy.log_prob(Tensor(batch.states), batch.ucms, batch.actions)
    ratio = ad.exp(lp - Tensor(batch.old_log_probs))
    surr = ad.minimum(ratio * adv, ad.clip(ratio, 0.8, 1.2) * adv)
    (-ad.tmean(surr)).backward()
    surrogate_grads = {k: store[k].grad.copy() for k in store.names()
                       if store[k].grad is not None}

    store.zero_grad()
    lp = policy.log_prob(Tensor(batch.states), batch.ucms, batch.actions)
    (-ad.tmean(lp * adv)).backward()
    for k, g in surrogate_grads.items():
        assert np.max(np.abs(g - store[k].grad)) < 1e-10


def test_single_update_increases_favored_decision_probability():
    policy, pstore = make_policy(seed=6)
    value, vstore = make_value(seed=7)
    rng = rng_from(8)
    states = rng.normal(0, 1, (4, ENC_DIM))
    ucms = np.array([1, 0, 0, 1])
    actions = np.array([1, 0, 2, 0])
    with no_grad():
        old_lp = policy.log_prob(Tensor(states), ucms, actions).data.copy()
    batch = AdvantageBatch(states, ucms, actions, old_lp,
                           np.array([1.0, 0.0, 0.0, 0.0]),
                           np.zeros(4))
    with no_grad():
        before = float(policy.log_prob(Tensor(states[:1]), ucms[:1],
                                       actions[:1]).data[0])
    ppo_update(policy, value, batch, Adam(pstore, lr=1e-2), Adam(vstore, lr=1e-2),
               rng_from(0), n_ppo=1, batch_size=4)
    with no_grad():
        after = float(policy.log_prob(Tensor(states[:1]), ucms[:1],
                                      actions[:1]).data[0])
    assert after > before


def test_ppo_diagnostics_fields():
    policy, pstore = make_policy(seed=9)
    value, vstore = make_value(seed=10)
    batch = random_batch(policy, n=32, seed=11)
    diag = ppo_update(policy, value, batch, Adam(pstore), Adam(vstore),
                      rng_from(0), n_ppo=3, batch_size=16)
    assert set(diag) == {"mean_ratio", "clip_fraction", "policy_loss",
                         "value_loss"}
    assert 0.0 <= diag["clip_fraction"] <= 1.0
    assert diag["mean_ratio"] == pytest.approx(1.0, abs=0.2)


def test_value_fits_constant_target():
    value, vstore = make_value(seed=12)
    policy, pstore = make_policy(seed=13)
    rng = rng_from(14)
    states = rng.normal(0, 1, (16, ENC_DIM))
    batch = AdvantageBatch(states, np.zeros(16, int), np.zeros(16, int),
                           np.zeros(16), np.zeros(16), np.full(16, -4.0))
    opt = Adam(vstore, lr=1e-2)
    for _ in range(300):
        ppo_update(policy, value, batch, Adam(pstore, lr=0.0), opt, rng_from(0),
                   n_ppo=1, batch_size=16, normalize_advantages=False)
    assert np.max(np.abs(value.values(states) - (-4.0))) < 0.5


@pytest.mark.parametrize("seed", range(5))
def test_policy_head_gradients(seed):
    policy, store = make_policy(seed=seed)
    rng = rng_from(seed + 50)
    for t in store.tensors():
        t.data = rng.normal(0, 0.3, t.data.shape)
    states = rng.normal(0, 1, (3, ENC_DIM))
    ucms = rng.integers(0, 2, 3)
    actions = rng.integers(0, 3, 3)

    def run_loss():
        return ad.tmean(ad.square(policy.log_prob(Tensor(states), ucms, actions)))

    store.zero_grad()
    run_loss().backward()
    for name in store.names():
        t = store[name]
        base = t.data.copy()

        def f(arr, t=t, base=base):
            t.data = arr
            with no_grad():
                out = float(run_loss().data)
            t.data = base
            return out

        fd = finite_diff_grad(f, base.copy())
        got = t.grad if t.grad is not None else np.zeros_like(base)
        rel = np.max(np.abs(got - fd) / np.maximum(np.abs(fd), 1e-3))
        assert rel < 1e-4, f"{name}: rel {rel}"


@pytest.mark.parametrize("seed", range(3))
def test_value_gradients(seed):
    value, store = make_value(seed=seed)
    rng = rng_from(seed + 70)
    for t in store.tensors():
        t.data = rng.normal(0, 0.3, t.data.shape)
    states = rng.normal(0, 1, (4, ENC_DIM))
    targets = rng.normal(-3, 1, 4)

    def run_loss():
        return ad.tmean(ad.square(value.forward(Tensor(states)) - Tensor(targets)))

    store.zero_grad()
    run_loss().backward()
    for name in store.names():
        t = store[name]
        base = t.data.copy()

        def f(arr, t=t, base=base):
            t.data = arr
            with no_grad():
                out = float(run_loss().data)
            t.data = base
            return out

        fd = finite_diff_grad(f, base.copy())
        got = t.grad if t.grad is not None else np.zeros_like(base)
        rel = np.max(np.abs(got - fd) / np.maximum(np.abs(fd), 1e-3))
        assert rel < 1e-4, f"{name}: rel {rel}"
