"""Per-node policy and value networks, GAE, and the clipped-surrogate update.

A policy maps the encoded window to two categorical heads: the shared
channel action (3 logits) and the uplink control message (2 logits). The
heads are conditionally independent given the state, so the joint decision
log-probability is the sum of the head log-probabilities. The value
network shares the trunk shape and outputs a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .distributions import Categorical, sample as draw
from .env import Decision
from .errors import ContractError, UsageError
from .nn import Adam, Affine, ParameterStore

TRUNK_DIM = 64
HIDDEN_DIM = 128


class _Trunk:
    def __init__(self, store: ParameterStore, prefix: str, enc_dim: int,
                 rng: np.random.Generator):
        self.proj = Affine(store, f"{prefix}/proj", enc_dim, TRUNK_DIM, rng)
        self.hidden = Affine(store, f"{prefix}/hidden", TRUNK_DIM, HIDDEN_DIM, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.tanh(self.hidden(ad.tanh(self.proj(x))))


class PolicyNetwork:
    def __init__(self, store: ParameterStore, prefix: str, enc_dim: int,
                 rng: np.random.Generator):
        self.store = store
        self.trunk = _Trunk(store, prefix, enc_dim, rng)
        self.action_head = Affine(store, f"{prefix}/action", HIDDEN_DIM, 3, rng)
        self.ucm_head = Affine(store, f"{prefix}/ucm", HIDDEN_DIM, 2, rng)

    def logits(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.trunk(x)
        return self.action_head(h), self.ucm_head(h)

    def log_prob(self, x: Tensor, ucms: np.ndarray, actions: np.ndarray) -> Tensor:
        """Joint log pi(decision | state) for a batch, shape (B,)."""
        action_logits, ucm_logits = self.logits(x)
        lp_a = ad.take_rows(ad.log_softmax(action_logits, axis=1),
                            np.asarray(actions, dtype=np.int64))
        lp_n = ad.take_rows(ad.log_softmax(ucm_logits, axis=1),
                            np.asarray(ucms, dtype=np.int64))
        return lp_a + lp_n

    def entropy(self, x: Tensor) -> Tensor:
        """Sum of the two head entropies, shape (B,)."""
        action_logits, ucm_logits = self.logits(x)
        total = None
        for logits in (action_logits, ucm_logits):
            logp = ad.log_softmax(logits, axis=1)
            p = ad.softmax(logits, axis=1)
            term = -ad.tsum(p * logp, axis=1)
            total = term if total is None else total + term
        return total


class ValueNetwork:
    def __init__(self, store: ParameterStore, prefix: str, enc_dim: int,
                 rng: np.random.Generator):
        self.store = store
        self.trunk = _Trunk(store, prefix, enc_dim, rng)
        self.head = Affine(store, f"{prefix}/value", HIDDEN_DIM, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ad.reshape(self.head(self.trunk(x)), (-1,))

    def values(self, states: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(np.atleast_2d(states))).data


def act(policy: PolicyNetwork, encoded_state: np.ndarray,
        rng: np.random.Generator, argmax: bool = False) -> tuple[Decision, float]:
    """Sample (or argmax) a decision and return its joint log-probability.

    Sampling consumes one uniform draw for the action head, then one for
    the UCM head.
    """
    with no_grad():
        action_logits, ucm_logits = policy.logits(Tensor(encoded_state[None, :]))
    a_row = action_logits.data[0]
    n_row = ucm_logits.data[0]
    a_dist = _softmax_dist(a_row)
    n_dist = _softmax_dist(n_row)
    if argmax:
        action = a_dist.argmax()
        ucm = n_dist.argmax()
    else:
        action = draw(a_dist, rng)
        ucm = draw(n_dist, rng)
    log_prob = float(np.log(a_dist.probs[action]) + np.log(n_dist.probs[ucm]))
    return Decision(ucm=ucm, action=action), log_prob


def _softmax_dist(logits: np.ndarray) -> Categorical:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return Categorical(e / e.sum())


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimation.

    values must hold T+1 entries (the bootstrap value of the final state;
    zero when the trajectory terminated). Returns (advantages, returns)
    with returns = advantages + values[:T].
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    if len(values) != T + 1 or len(dones) != T:
        raise ContractError(
            f"gae lengths: rewards {T}, values {len(values)}, dones {len(dones)}")
    advantages = np.zeros(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * not_done - values[t]
        running = delta + gamma * lam * not_done * running
        advantages[t] = running
    return advantages, advantages + values[:T]


@dataclass
class AdvantageBatch:
    """Everything one PPO gradient step needs, aligned by row."""

    states: np.ndarray
    ucms: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.advantages)

    def select(self, idx: np.ndarray) -> "AdvantageBatch":
        return AdvantageBatch(self.states[idx], self.ucms[idx], self.actions[idx],
                              self.old_log_probs[idx], self.advantages[idx],
                              self.returns[idx])

    def normalized(self) -> "AdvantageBatch":
        """Zero-mean unit-variance advantages (returns stay untouched)."""
        adv = self.advantages
        std = adv.std()
        norm = (adv - adv.mean()) / (std + 1e-8)
        return replace(self, advantages=norm)


def clipped_surrogate_term(ratio: float, advantage: float, clip_eps: float) -> float:
    """One sample's objective: min(rho*A, clip(rho, 1-eps, 1+eps)*A)."""
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


def ppo_update(policy: PolicyNetwork, value: ValueNetwork, batch: AdvantageBatch,
               policy_opt: Adam, value_opt: Adam, rng: np.random.Generator,
               clip_eps: float = 0.2, n_ppo: int = 5, batch_size: int = 64,
               entropy_coef: float = 0.0, normalize_advantages: bool = True) -> dict:
    """n_ppo minibatch steps of the clipped surrogate plus a value MSE fit.

    The surrogate is maximized by minimizing its negation; the ratio is
    exp(new_lp - old_lp) against the old log-probs carried by the batch.
    """
    if len(batch) == 0:
        raise UsageError("ppo_update needs a nonempty batch")
    if normalize_advantages and len(batch) > 1:
        batch = batch.normalized()
    ratios = []
    clipped = []
    policy_losses = []
    value_losses = []
    for _ in range(n_ppo):
        if len(batch) > batch_size:
            idx = rng.choice(len(batch), size=batch_size, replace=False)
            mb = batch.select(idx)
        else:
            mb = batch
        states = Tensor(mb.states)
        adv = Tensor(mb.advantages)

        lp_new = policy.log_prob(states, mb.ucms, mb.actions)
        ratio = ad.exp(lp_new - Tensor(mb.old_log_probs))
        surr = ad.minimum(ratio * adv,
                          ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)
        policy_loss = -ad.tmean(surr)
        if entropy_coef > 0.0:
            policy_loss = policy_loss - Tensor(entropy_coef) * ad.tmean(
                policy.entropy(states))
        policy_opt.store.zero_grad()
        policy_loss.backward()
        policy_opt.step()

        v = value.forward(Tensor(mb.states))
        value_loss = ad.tmean(ad.square(v - Tensor(mb.returns)))
        value_opt.store.zero_grad()
        value_loss.backward()
        value_opt.step()

        r = ratio.data
        ratios.append(float(r.mean()))
        clipped.append(float(np.mean((r < 1.0 - clip_eps) | (r > 1.0 + clip_eps))))
        policy_losses.append(policy_loss.item())
        value_losses.append(value_loss.item())
    return {
        "mean_ratio": float(np.mean(ratios)),
        "clip_fraction": float(np.mean(clipped)),
        "policy_loss": float(np.mean(policy_losses)),
        "value_loss": float(np.mean(value_losses)),
    }
