"""Slotted TDMA uplink simulator: U sensor nodes drain packet buffers to a
gateway over one shared erasure channel, coordinated by error-free control
messages.

Protocol per slot (fixed order, which also fixes the rng draw order):

1. Data channel: nodes whose action is Transmit *and* whose buffer is
   nonempty put a packet on the air. No transmitters -> idle (0); two or
   more -> collision (U+1); exactly one -> received (node id, 1-based) with
   probability 1-rho, otherwise erased. An erased packet looks like an idle
   channel when ``erased_looks_idle`` is set (default), else like a
   collision. The erasure consumes exactly one rng draw, and only when
   there is exactly one transmitter and 0 < rho < 1.
2. DeleteOldest decrements a nonempty buffer by one; a no-op on an empty
   buffer. Transmitting never changes the buffer: packets leave only when
   the node deletes them.
3. Bernoulli arrivals (disabled by default, ``arrival_rate`` = 0) top up
   buffers below capacity, one draw per node in node order.
4. Gateway signaling: a successful transmitter is ACKed (whether or not it
   sent a scheduling request); among the remaining requesters one node is
   granted uniformly at random (one draw, consumed only when two or more
   are eligible). Everyone else gets Null. Control channels never lose or
   corrupt messages.
5. Reward is -1 for every executed slot, so a completed episode has total
   reward R = -T.
6. Each agent's window shifts by one record; the episode is done when all
   buffers are empty or T_max slots have run.

Agent windows follow the paper's state definition: the most recent N
(observation, decision, downlink message) records for a node, and
(gateway observation, all uplink messages, all downlink messages) for the
gateway, newest first, padded with a reserved symbol before the episode
starts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractError, UsageError

PAD = -1  # reserved pre-episode history symbol, distinct from every protocol symbol


class NodeAction(IntEnum):
    IDLE = 0
    TRANSMIT = 1
    DELETE_OLDEST = 2


class UplinkControl(IntEnum):
    NO_REQUEST = 0
    SCHEDULING_REQUEST = 1


class DownlinkControl(IntEnum):
    NULL = 0
    GRANT = 1
    ACK = 2


class Decision(NamedTuple):
    ucm: int
    action: int


class NodeRecord(NamedTuple):
    """One slot as a node saw it: its observation, decision and DCM."""

    obs: int
    ucm: int
    action: int
    dcm: int


class GatewayRecord(NamedTuple):
    """One slot as the gateway saw it: channel observation, all UCMs, all DCMs."""

    obs: int
    ucms: tuple
    dcms: tuple


@dataclass(frozen=True)
class EnvConfig:
    num_nodes: int = 1
    buffer_capacity: int = 2
    max_steps: int = 16
    bler: float = 0.5
    history_window: int = 1
    erased_looks_idle: bool = True
    arrival_rate: float = 0.0

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ConfigError(f"num_nodes must be >= 1, got {self.num_nodes}")
        if self.buffer_capacity < 0:
            # 0 is the degenerate immediately-done episode used by tests
            raise ConfigError(f"buffer_capacity must be >= 0, got {self.buffer_capacity}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if not 0.0 <= self.bler <= 1.0:
            raise ConfigError(f"bler must be in [0,1], got {self.bler}")
        if self.history_window < 1:
            raise ConfigError(f"history_window must be >= 1, got {self.history_window}")
        if not 0.0 <= self.arrival_rate <= 1.0:
            raise ConfigError(f"arrival_rate must be in [0,1], got {self.arrival_rate}")


PAD_NODE_RECORD = NodeRecord(PAD, PAD, PAD, PAD)


def pad_gateway_record(num_nodes: int) -> GatewayRecord:
    return GatewayRecord(PAD, (PAD,) * num_nodes, (PAD,) * num_nodes)


def pad_node_window(n: int) -> tuple:
    return (PAD_NODE_RECORD,) * n


def pad_gateway_window(n: int, num_nodes: int) -> tuple:
    return (pad_gateway_record(num_nodes),) * n


def shift_window(window: tuple, record) -> tuple:
    """Prepend the newest record, dropping the oldest."""
    return (record,) + window[:-1]


def resolve_channel(transmitters: Sequence[int], num_nodes: int, bler: float,
                    rng: np.random.Generator, erased_looks_idle: bool = True) -> int:
    """Outcome of one data-channel slot as the gateway observes it.

    ``transmitters`` holds 0-based ids of nodes that actually emitted a
    packet. Returns 0 (idle), u+1 (received from node u), or num_nodes+1
    (collision / undecodable).
    """
    tx = sorted(set(transmitters))
    for u in tx:
        if not 0 <= u < num_nodes:
            raise ContractError(f"transmitter id {u} out of range for U={num_nodes}")
    if len(tx) == 0:
        return 0
    if len(tx) >= 2:
        return num_nodes + 1
    u = tx[0]
    if bler <= 0.0:
        return u + 1
    if bler >= 1.0:
        erased = True
    else:
        erased = rng.random() < bler
    if not erased:
        return u + 1
    return 0 if erased_looks_idle else num_nodes + 1


def gateway_signaling(srs: Sequence[int], channel_obs: int,
                      rng: np.random.Generator) -> tuple:
    """Fixed gateway protocol: ACK the successful transmitter, grant one of
    the remaining requesters uniformly at random, Null everyone else.

    The selection consumes one rng draw only when two or more requesters
    are eligible.
    """
    num_nodes = len(srs)
    dcms = [int(DownlinkControl.NULL)] * num_nodes
    successful = channel_obs - 1 if 1 <= channel_obs <= num_nodes else None
    if successful is not None:
        dcms[successful] = int(DownlinkControl.ACK)
    eligible = [u for u in range(num_nodes)
                if srs[u] == UplinkControl.SCHEDULING_REQUEST and u != successful]
    if eligible:
        if len(eligible) == 1:
            grantee = eligible[0]
        else:
            grantee = eligible[int(rng.integers(len(eligible)))]
        dcms[grantee] = int(DownlinkControl.GRANT)
    return tuple(dcms)


@dataclass
class Transition:
    """One environment slot, the unit stored in both replay buffers."""

    t: int
    state_before: dict
    decisions: tuple
    dcms: tuple
    reward: float
    node_obs: tuple
    gateway_obs: int
    state_after: dict
    done: bool
    log_probs: tuple | None = None
    provenance: str = "real"
    enc_cache: dict = field(default_factory=dict, repr=False)


@dataclass
class EnvState:
    """Snapshot of everything that determines the future of an episode."""

    buffers: tuple
    pending_grant: tuple
    t: int
    done: bool
    node_windows: tuple
    gateway_window: tuple
    rng_state: dict = field(repr=False, default=None)


class MacEnv:
    """Mutable episode state plus the slot dynamics. One instance per
    episode stream; instances are independent and never share state."""

    def __init__(self, config: EnvConfig, seed: int = 0):
        self.config = config
        self.reset(seed)

    def reset(self, seed: int):
        """Full buffers, zeroed clock, padded windows, freshly seeded rng."""
        cfg = self.config
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.buffers = [cfg.buffer_capacity] * cfg.num_nodes
        self.pending_grant = [False] * cfg.num_nodes
        self.t = 0
        self.done = all(b == 0 for b in self.buffers)
        self.node_windows = [pad_node_window(cfg.history_window)
                             for _ in range(cfg.num_nodes)]
        self.gateway_window = pad_gateway_window(cfg.history_window, cfg.num_nodes)
        node_obs = tuple(self.buffers)
        return node_obs, 0

    def windows(self) -> dict:
        return {
            "nodes": tuple(self.node_windows),
            "gateway": self.gateway_window,
        }

    def state_snapshot(self) -> EnvState:
        return EnvState(
            buffers=tuple(self.buffers),
            pending_grant=tuple(self.pending_grant),
            t=self.t,
            done=self.done,
            node_windows=tuple(self.node_windows),
            gateway_window=self.gateway_window,
            rng_state=self.rng.bit_generator.state,
        )

    def step(self, decisions: Sequence[Decision]) -> Transition:
        cfg = self.config
        if self.done:
            raise UsageError("step() called on a finished episode")
        if len(decisions) != cfg.num_nodes:
            raise ContractError(
                f"expected {cfg.num_nodes} decisions, got {len(decisions)}"
            )
        state_before = self.windows()

        transmitters = [u for u, d in enumerate(decisions)
                        if d.action == NodeAction.TRANSMIT and self.buffers[u] > 0]
        channel_obs = resolve_channel(transmitters, cfg.num_nodes, cfg.bler,
                                      self.rng, cfg.erased_looks_idle)

        for u, d in enumerate(decisions):
            if d.action == NodeAction.DELETE_OLDEST and self.buffers[u] > 0:
                self.buffers[u] -= 1

        if cfg.arrival_rate > 0.0:
            for u in range(cfg.num_nodes):
                if self.buffers[u] < cfg.buffer_capacity and \
                        self.rng.random() < cfg.arrival_rate:
                    self.buffers[u] += 1

        srs = [d.ucm for d in decisions]
        dcms = gateway_signaling(srs, channel_obs, self.rng)
        self.pending_grant = [dcm == DownlinkControl.GRANT for dcm in dcms]

        node_obs = tuple(self.buffers)
        reward = -1.0
        self.t += 1
        self.done = all(b == 0 for b in self.buffers) or self.t == cfg.max_steps

        for u, d in enumerate(decisions):
            rec = NodeRecord(node_obs[u], d.ucm, d.action, dcms[u])
            self.node_windows[u] = shift_window(self.node_windows[u], rec)
        grec = GatewayRecord(channel_obs, tuple(srs), dcms)
        self.gateway_window = shift_window(self.gateway_window, grec)

        return Transition(
            t=self.t - 1,
            state_before=state_before,
            decisions=tuple(Decision(d.ucm, d.action) for d in decisions),
            dcms=dcms,
            reward=reward,
            node_obs=node_obs,
            gateway_obs=channel_obs,
            state_after=self.windows(),
            done=self.done,
        )


# ---------------------------------------------------------------------------
# Window encoding: one-hot per categorical symbol (with a dedicated pad
# channel), buffer counts normalized to [0,1] with a pad flag. Newest record
# first, matching the window layout.
# ---------------------------------------------------------------------------

NODE_RECORD_WIDTH = 13  # [obs, pad] + ucm(3) + action(4) + dcm(4)


def gateway_record_width(num_nodes: int) -> int:
    return (num_nodes + 3) + 7 * num_nodes


def node_state_dim(history_window: int) -> int:
    return history_window * NODE_RECORD_WIDTH


def gateway_state_dim(history_window: int, num_nodes: int) -> int:
    return history_window * gateway_record_width(num_nodes)


def _one_hot(value: int, size: int, pad_index: int) -> np.ndarray:
    block = np.zeros(size)
    block[pad_index if value == PAD else value] = 1.0
    return block


def encode_node_window(window: tuple, buffer_capacity: int) -> np.ndarray:
    """Flatten a node window into the network input vector."""
    cap = max(buffer_capacity, 1)
    parts = []
    for rec in window:
        obs = np.zeros(2)
        if rec.obs == PAD:
            obs[1] = 1.0
        else:
            obs[0] = rec.obs / cap
        parts.append(obs)
        parts.append(_one_hot(rec.ucm, 3, 2))
        parts.append(_one_hot(rec.action, 4, 3))
        parts.append(_one_hot(rec.dcm, 4, 3))
    return np.concatenate(parts)


def decode_node_window(vec: np.ndarray, buffer_capacity: int,
                       history_window: int) -> tuple:
    """Inverse of encode_node_window (exact on the symbol alphabets)."""
    cap = max(buffer_capacity, 1)
    records = []
    pos = 0
    for _ in range(history_window):
        if vec[pos + 1] == 1.0:
            obs = PAD
        else:
            obs = int(round(vec[pos] * cap))
        pos += 2
        ucm = int(np.argmax(vec[pos:pos + 3]))
        ucm = PAD if ucm == 2 else ucm
        pos += 3
        action = int(np.argmax(vec[pos:pos + 4]))
        action = PAD if action == 3 else action
        pos += 4
        dcm = int(np.argmax(vec[pos:pos + 4]))
        dcm = PAD if dcm == 3 else dcm
        pos += 4
        records.append(NodeRecord(obs, ucm, action, dcm))
    return tuple(records)


def encode_gateway_window(window: tuple, num_nodes: int) -> np.ndarray:
    parts = []
    for rec in window:
        parts.append(_one_hot(rec.obs, num_nodes + 3, num_nodes + 2))
        for u in range(num_nodes):
            parts.append(_one_hot(rec.ucms[u], 3, 2))
        for u in range(num_nodes):
            parts.append(_one_hot(rec.dcms[u], 4, 3))
    return np.concatenate(parts)


def decode_gateway_window(vec: np.ndarray, num_nodes: int,
                          history_window: int) -> tuple:
    records = []
    pos = 0
    for _ in range(history_window):
        obs = int(np.argmax(vec[pos:pos + num_nodes + 3]))
        obs = PAD if obs == num_nodes + 2 else obs
        pos += num_nodes + 3
        ucms = []
        for _ in range(num_nodes):
            v = int(np.argmax(vec[pos:pos + 3]))
            ucms.append(PAD if v == 2 else v)
            pos += 3
        dcms = []
        for _ in range(num_nodes):
            v = int(np.argmax(vec[pos:pos + 4]))
            dcms.append(PAD if v == 3 else v)
            pos += 4
        records.append(GatewayRecord(obs, tuple(ucms), tuple(dcms)))
    return tuple(records)


def encode_node_windows(windows: list, buffer_capacity: int) -> np.ndarray:
    """Batch form: stack encoded node windows into a (B, dim) matrix."""
    return np.stack([encode_node_window(w, buffer_capacity) for w in windows])


def encode_gateway_windows(windows: list, num_nodes: int) -> np.ndarray:
    return np.stack([encode_gateway_window(w, num_nodes) for w in windows])


def encoded_node_state(tr: Transition, u: int, buffer_capacity: int,
                       after: bool = False) -> np.ndarray:
    """Cached window encoding for one node of a stored transition."""
    key = ("node", u, after)
    if key not in tr.enc_cache:
        state = tr.state_after if after else tr.state_before
        tr.enc_cache[key] = encode_node_window(state["nodes"][u], buffer_capacity)
    return tr.enc_cache[key]


def encoded_gateway_state(tr: Transition, num_nodes: int,
                          after: bool = False) -> np.ndarray:
    key = ("gateway", after)
    if key not in tr.enc_cache:
        state = tr.state_after if after else tr.state_before
        tr.enc_cache[key] = encode_gateway_window(state["gateway"], num_nodes)
    return tr.enc_cache[key]


# ---------------------------------------------------------------------------
# Trajectory dump: newline-delimited JSON, one transition per line. Field
# order is fixed: t, decisions, dcms, reward, node_obs, gateway_obs, done,
# provenance, windows_before, windows_after. Symbols are integers, the
# reward is decimal.
# ---------------------------------------------------------------------------


def _window_to_json(state: dict) -> dict:
    return {
        "nodes": [[list(rec) for rec in win] for win in state["nodes"]],
        "gateway": [[rec.obs, list(rec.ucms), list(rec.dcms)]
                    for rec in state["gateway"]],
    }


def transition_to_json(tr: Transition) -> dict:
    return {
        "t": tr.t,
        "decisions": [[d.ucm, d.action] for d in tr.decisions],
        "dcms": list(tr.dcms),
        "reward": tr.reward,
        "node_obs": list(tr.node_obs),
        "gateway_obs": tr.gateway_obs,
        "done": tr.done,
        "provenance": tr.provenance,
        "windows_before": _window_to_json(tr.state_before),
        "windows_after": _window_to_json(tr.state_after),
    }


def write_trajectory(transitions: Sequence[Transition], path):
    with open(path, "w") as fh:
        for tr in transitions:
            fh.write(json.dumps(transition_to_json(tr)) + "\n")


def read_trajectory(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
