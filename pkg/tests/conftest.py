"""Shared helpers: seeded rngs and scripted data collection."""

import numpy as np

from causalmac.baselines import predefined_decision
from causalmac.env import Decision, EnvConfig, MacEnv
from causalmac.rollout import ReplayBuffer


def rng_from(seed):
    return np.random.Generator(np.random.PCG64(seed))


def mixture_decide(window, buffer_capacity, rng, explore=0.2):
    """The fixed scripted policy: mostly the grant-protocol handshake, with
    a seeded slice of uniform random decisions for state coverage."""
    if explore > 0.0 and rng.random() < explore:
        return Decision(int(rng.integers(2)), int(rng.integers(3)))
    return predefined_decision(window, buffer_capacity)


def collect_mixture(env_cfg: EnvConfig, episodes: int, seed: int,
                    explore: float = 0.2) -> ReplayBuffer:
    """Scripted-policy episodes for model-learning fixtures."""
    buffer = ReplayBuffer()
    policy_rng = rng_from(seed)
    seeder = rng_from(seed + 1)
    for _ in range(episodes):
        env = MacEnv(env_cfg, seed=int(seeder.integers(1 << 30)))
        traj = []
        while not env.done:
            decisions = [
                mixture_decide(env.node_windows[u], env_cfg.buffer_capacity,
                               policy_rng, explore)
                for u in range(env_cfg.num_nodes)
            ]
            traj.append(env.step(decisions))
        buffer.add_trajectory(traj)
    return buffer
