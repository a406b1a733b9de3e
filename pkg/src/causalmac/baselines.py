"""Comparison agents: tabular Q-learning and the fixed grant-waiting policy.

The Q-learner keys its table by the same window information the neural
agents see (the encoded window, stringified), with six joint action values
(index = ucm * 3 + channel action). The pre-defined policy is the
handshake protocol the gateway expects: request, wait for the grant to
take effect, transmit in the granted slot, delete on the acknowledgment
(re-requesting along with the delete when more packets remain). It never
transmits without a grant, which costs it one slot per handshake relative
to the 3-slot scripted optimum.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .env import (
    Decision,
    DownlinkControl,
    NodeAction,
    PAD,
    UplinkControl,
    encode_node_window,
)
from .errors import ContractError

NUM_JOINT_DECISIONS = 6


def joint_index(decision: Decision) -> int:
    return decision.ucm * 3 + decision.action


def decision_from_index(index: int) -> Decision:
    return Decision(ucm=index // 3, action=index % 3)


def q_state_key(window: tuple, buffer_capacity: int) -> str:
    return repr(tuple(encode_node_window(window, buffer_capacity)))


def q_act(values: np.ndarray, epsilon: float, rng: np.random.Generator) -> Decision:
    """Epsilon-greedy over the six joint decisions; greedy ties break to the
    lowest index. epsilon=0 consumes no draws; exploration consumes the
    threshold draw plus one index draw."""
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"epsilon must be in [0,1], got {epsilon}")
    if epsilon > 0.0 and rng.random() < epsilon:
        return decision_from_index(int(rng.integers(NUM_JOINT_DECISIONS)))
    return decision_from_index(int(np.argmax(values)))


def q_update(table: dict, key: str, decision: Decision, reward: float,
             next_key: str, done: bool, alpha: float, gamma: float):
    """One-step Q-learning backup."""
    target = reward
    if not done:
        target += gamma * float(np.max(table[next_key]))
    idx = joint_index(decision)
    table[key][idx] += alpha * (target - table[key][idx])


class QLearnerAgent:
    """Per-node Q-tables with a linearly annealed exploration rate
    (1.0 down to 0.05 over the first half of the planned episodes)."""

    EPS_START = 1.0
    EPS_FINAL = 0.05

    def __init__(self, num_nodes: int, buffer_capacity: int, total_episodes: int,
                 alpha: float = 0.1, gamma: float = 0.99):
        self.num_nodes = num_nodes
        self.buffer_capacity = buffer_capacity
        self.total_episodes = total_episodes
        self.alpha = alpha
        self.gamma = gamma
        self.tables = [defaultdict(lambda: np.zeros(NUM_JOINT_DECISIONS))
                       for _ in range(num_nodes)]
        self.episodes_seen = 0

    def epsilon(self) -> float:
        half = max(1, self.total_episodes // 2)
        frac = min(1.0, self.episodes_seen / half)
        return self.EPS_START + frac * (self.EPS_FINAL - self.EPS_START)

    def decide(self, u: int, window: tuple, rng: np.random.Generator,
               greedy: bool = False) -> Decision:
        key = q_state_key(window, self.buffer_capacity)
        eps = 0.0 if greedy else self.epsilon()
        return q_act(self.tables[u][key], eps, rng)

    def learn(self, u: int, window: tuple, decision: Decision, reward: float,
              next_window: tuple, done: bool):
        key = q_state_key(window, self.buffer_capacity)
        next_key = q_state_key(next_window, self.buffer_capacity)
        q_update(self.tables[u], key, decision, reward, next_key, done,
                 self.alpha, self.gamma)

    def end_episode(self):
        self.episodes_seen += 1


def predefined_decision(window: tuple, buffer_capacity: int) -> Decision:
    """The fixed MAC signaling policy, as a pure function of the node's
    most recent window record.

    Rules, in order: an empty buffer idles; an acknowledgment triggers the
    delete (with a fresh request when more packets remain); a grant means
    the next slot is ours, so idle one slot; having idled that waiting slot
    (the only situation this policy emits a bare no-request idle with a
    nonempty buffer), transmit; otherwise keep requesting.
    """
    newest = window[0]
    buffer = buffer_capacity if newest.obs == PAD else newest.obs
    if buffer == 0:
        return Decision(int(UplinkControl.NO_REQUEST), int(NodeAction.IDLE))
    if newest.dcm == DownlinkControl.ACK:
        ucm = (UplinkControl.SCHEDULING_REQUEST if buffer > 1
               else UplinkControl.NO_REQUEST)
        return Decision(int(ucm), int(NodeAction.DELETE_OLDEST))
    if newest.dcm == DownlinkControl.GRANT:
        return Decision(int(UplinkControl.NO_REQUEST), int(NodeAction.IDLE))
    if (newest.ucm == UplinkControl.NO_REQUEST
            and newest.action == NodeAction.IDLE):
        return Decision(int(UplinkControl.NO_REQUEST), int(NodeAction.TRANSMIT))
    return Decision(int(UplinkControl.SCHEDULING_REQUEST), int(NodeAction.IDLE))


class PredefinedTeam:
    """Every node running the fixed policy."""

    def __init__(self, num_nodes: int, buffer_capacity: int):
        self.num_nodes = num_nodes
        self.buffer_capacity = buffer_capacity

    def decide(self, windows: dict, rng: np.random.Generator,
               greedy: bool = False):
        decisions = [predefined_decision(windows["nodes"][u], self.buffer_capacity)
                     for u in range(self.num_nodes)]
        return decisions, None
