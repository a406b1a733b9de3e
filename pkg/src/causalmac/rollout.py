"""Replay buffers, k-step model rollouts, and buffer combination.

A rollout alternates policy sampling with model sampling from a real start
state, mirrors the environment's within-slot order exactly (channel-side
observation draws first, then the gateway's grant selection), computes
gateway messages with the real protocol and rewards with the known reward
function, and reconstructs the next windows by shifting. Plugging the
simulator itself in as the model therefore reproduces real trajectories
bit-exactly, which is the correctness gate for this plumbing.
"""

from __future__ import annotations

import numpy as np

from .agents import act
from .env import (
    Decision,
    EnvConfig,
    GatewayRecord,
    NodeAction,
    NodeRecord,
    PAD,
    Transition,
    encode_node_window,
    gateway_signaling,
    resolve_channel,
    shift_window,
)
from .errors import UsageError


class ReplayBuffer:
    """Trajectory-grouped transition store with FIFO eviction.

    Eviction drops whole oldest trajectories once the transition count
    exceeds capacity (None = unbounded). Minibatch sampling is uniform over
    transitions, without replacement within a batch.
    """

    def __init__(self, capacity: int | None = None):
        self.capacity = capacity
        self._trajectories: list[list[Transition]] = []
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def trajectories(self) -> list[list[Transition]]:
        return self._trajectories

    def transitions(self) -> list[Transition]:
        return [tr for traj in self._trajectories for tr in traj]

    def add_trajectory(self, transitions: list[Transition]):
        if not transitions:
            return
        self._trajectories.append(list(transitions))
        self._count += len(transitions)
        if self.capacity is not None:
            while self._count > self.capacity and len(self._trajectories) > 1:
                dropped = self._trajectories.pop(0)
                self._count -= len(dropped)

    def sample_transitions(self, rng: np.random.Generator, n: int) -> list[Transition]:
        flat = self.transitions()
        if not flat:
            raise UsageError("cannot sample from an empty buffer")
        n = min(n, len(flat))
        idx = rng.choice(len(flat), size=n, replace=False)
        return [flat[i] for i in idx]

    def sample_steps(self, rng: np.random.Generator, n: int):
        """Uniform transitions with their trajectory context: returns
        (trajectories, [(traj_index, step_index), ...])."""
        index = [(ti, si) for ti, traj in enumerate(self._trajectories)
                 for si in range(len(traj))]
        if not index:
            raise UsageError("cannot sample from an empty buffer")
        n = min(n, len(index))
        picks = rng.choice(len(index), size=n, replace=False)
        chosen = [index[i] for i in picks]
        needed = sorted({ti for ti, _ in chosen})
        remap = {ti: i for i, ti in enumerate(needed)}
        trajs = [self._trajectories[ti] for ti in needed]
        return trajs, [(remap[ti], si) for ti, si in chosen]


def combine(real: ReplayBuffer, synthetic: ReplayBuffer) -> ReplayBuffer:
    """Multiset union; transitions keep their provenance flags."""
    out = ReplayBuffer(capacity=None)
    for traj in real.trajectories:
        out.add_trajectory(traj)
    for traj in synthetic.trajectories:
        out.add_trajectory(traj)
    return out


def window_buffer(window: tuple, buffer_capacity: int) -> int:
    """Buffer count implied by a node window: the newest observation, or a
    full buffer when the window is still all padding (episode start)."""
    newest = window[0]
    return buffer_capacity if newest.obs == PAD else newest.obs


class SimulatorOracle:
    """The real channel and buffer dynamics exposed through the model's
    sampling interface; used to validate the rollout plumbing."""

    def __init__(self, config: EnvConfig):
        self.config = config

    def sample_slot(self, node_windows: list, gateway_window: tuple,
                    decisions: list[Decision], rng: np.random.Generator):
        cfg = self.config
        buffers = [window_buffer(w, cfg.buffer_capacity) for w in node_windows]
        transmitters = [u for u, d in enumerate(decisions)
                        if d.action == NodeAction.TRANSMIT and buffers[u] > 0]
        channel_obs = resolve_channel(transmitters, cfg.num_nodes, cfg.bler,
                                      rng, cfg.erased_looks_idle)
        for u, d in enumerate(decisions):
            if d.action == NodeAction.DELETE_OLDEST and buffers[u] > 0:
                buffers[u] -= 1
        return channel_obs, tuple(buffers), []


def k_step_rollout(model, policies: list, start_state: dict, k: int,
                   rng: np.random.Generator, act_rng: np.random.Generator,
                   config: EnvConfig, collect_attention: bool = False):
    """Roll the model forward up to k slots from a real start state.

    Returns (transitions, attention rows). Stops early when every sampled
    node observation hits zero (predicted buffer drain). ``rng`` drives the
    model and the gateway's grant selection in environment order;
    ``act_rng`` drives policy sampling, exactly as in real collection.
    """
    if k < 1:
        raise UsageError(f"rollout horizon must be >= 1, got {k}")
    node_windows = list(start_state["nodes"])
    gateway_window = start_state["gateway"]
    if all(window_buffer(w, config.buffer_capacity) == 0 for w in node_windows):
        return [], []

    transitions: list[Transition] = []
    attention_rows: list[tuple] = []
    for _ in range(k):
        decisions = []
        log_probs = []
        for u, policy in enumerate(policies):
            enc = encode_node_window(node_windows[u], config.buffer_capacity)
            d, lp = act(policy, enc, act_rng)
            decisions.append(d)
            log_probs.append(lp)

        gateway_obs, node_obs, rows = model.sample_slot(
            node_windows, gateway_window, decisions, rng)
        if collect_attention:
            attention_rows.extend(rows)
        srs = [d.ucm for d in decisions]
        dcms = gateway_signaling(srs, gateway_obs, rng)

        state_before = {"nodes": tuple(node_windows), "gateway": gateway_window}
        done = all(o == 0 for o in node_obs)
        for u, d in enumerate(decisions):
            rec = NodeRecord(node_obs[u], d.ucm, d.action, dcms[u])
            node_windows[u] = shift_window(node_windows[u], rec)
        gateway_window = shift_window(
            gateway_window, GatewayRecord(gateway_obs, tuple(srs), dcms))

        transitions.append(Transition(
            t=len(transitions),
            state_before=state_before,
            decisions=tuple(decisions),
            dcms=dcms,
            reward=-1.0,
            node_obs=node_obs,
            gateway_obs=gateway_obs,
            state_after={"nodes": tuple(node_windows), "gateway": gateway_window},
            done=done,
            log_probs=tuple(log_probs),
            provenance="synthetic",
        ))
        if done:
            break
    return transitions, attention_rows


def generate_synthetic(model, policies: list, real: ReplayBuffer, n_rollout: int,
                       k: int, rng: np.random.Generator,
                       act_rng: np.random.Generator,
                       config: EnvConfig) -> ReplayBuffer:
    """n_rollout independent k-step rollouts from uniformly sampled real
    start states; at most n_rollout * k synthetic transitions."""
    if len(real) == 0:
        raise UsageError("generate_synthetic needs a nonempty real buffer")
    sim = ReplayBuffer(capacity=None)
    if n_rollout == 0:
        return sim
    flat = real.transitions()
    starts = [flat[int(rng.integers(len(flat)))] for _ in range(n_rollout)]
    for tr in starts:
        traj, _ = k_step_rollout(model, policies, tr.state_before, k, rng,
                                 act_rng, config)
        sim.add_trajectory(traj)
    return sim
