"""The three-phase training loop, evaluation, and sample-efficiency metrics.

Each epoch: (1) collect real episodes into the replay buffer, (2) update
the causal model on minibatches from the buffer, (3) for each policy
round, roll the model out for synthetic data, combine buffers, and run the
clipped-surrogate updates; then evaluate greedily. Only phase-1 slots
count as real environment steps - that count is the x-axis of every
sample-efficiency claim.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .agents import AdvantageBatch, PolicyNetwork, ValueNetwork, act, gae, ppo_update
from .baselines import PredefinedTeam, QLearnerAgent
from .config import TrainConfig
from .env import (
    EnvConfig,
    MacEnv,
    Transition,
    encode_node_window,
    encoded_node_state,
    node_state_dim,
)
from .errors import ConfigError, ContractError
from .inference import CausalWorldModel
from .nn import Adam, ParameterStore
from .rollout import ReplayBuffer, combine, generate_synthetic

logger = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    epoch: int
    real_env_steps: int
    eval_mean_reward: float
    eval_std: float
    model_loss: float | None = None
    ppo_diagnostics: dict | None = None


@dataclass
class SeedTrace:
    seed: int
    records: list
    counters: dict


@dataclass
class TrainResult:
    method: str
    env_config: EnvConfig
    train_config: TrainConfig
    traces: dict  # seed -> SeedTrace
    artifacts: dict  # seed -> method-specific checkpoint payload

    def averaged_trace(self) -> list[MetricsRecord]:
        """Seed-averaged metrics per epoch index."""
        seeds = sorted(self.traces)
        n_epochs = min(len(self.traces[s].records) for s in seeds)
        out = []
        for i in range(n_epochs):
            recs = [self.traces[s].records[i] for s in seeds]
            out.append(MetricsRecord(
                epoch=i + 1,
                real_env_steps=int(round(np.mean([r.real_env_steps for r in recs]))),
                eval_mean_reward=float(np.mean([r.eval_mean_reward for r in recs])),
                eval_std=float(np.mean([r.eval_std for r in recs])),
                model_loss=None,
            ))
        return out


class MbrlTeam:
    """Per-node policy networks acting on encoded windows."""

    def __init__(self, policies: list, buffer_capacity: int):
        self.policies = policies
        self.buffer_capacity = buffer_capacity

    def decide(self, windows: dict, rng: np.random.Generator,
               greedy: bool = False):
        decisions = []
        log_probs = []
        for u, policy in enumerate(self.policies):
            enc = encode_node_window(windows["nodes"][u], self.buffer_capacity)
            d, lp = act(policy, enc, rng, argmax=greedy)
            decisions.append(d)
            log_probs.append(lp)
        return decisions, tuple(log_probs)


class QTeam:
    def __init__(self, agent: QLearnerAgent):
        self.agent = agent

    def decide(self, windows: dict, rng: np.random.Generator,
               greedy: bool = False):
        decisions = [self.agent.decide(u, windows["nodes"][u], rng, greedy=greedy)
                     for u in range(self.agent.num_nodes)]
        return decisions, None


def run_episode(env_cfg: EnvConfig, env_seed, team, rng: np.random.Generator,
                greedy: bool = False, on_step=None):
    """One full episode; returns (trajectory, total reward R, length T)."""
    env = MacEnv(env_cfg, env_seed)
    trajectory: list[Transition] = []
    while not env.done:
        decisions, log_probs = team.decide(env.windows(), rng, greedy=greedy)
        tr = env.step(decisions)
        tr.log_probs = log_probs
        trajectory.append(tr)
        if on_step is not None:
            on_step(tr)
    return trajectory, -float(len(trajectory)), len(trajectory)


def eval_env_seed(seed: int, episode: int) -> np.random.SeedSequence:
    """Fixed evaluation stream, disjoint from training episode seeds."""
    return np.random.SeedSequence([0x5EED, int(seed), int(episode)])


def evaluate(team, env_cfg: EnvConfig, episodes: int, seeds) -> tuple[float, float, list]:
    """Greedy (argmax) evaluation; never touches any replay buffer."""
    rng = np.random.Generator(np.random.PCG64(0))  # unused by greedy teams
    rewards = []
    for s in seeds:
        for i in range(episodes):
            _, total, _ = run_episode(env_cfg, eval_env_seed(s, i), team, rng,
                                      greedy=True)
            rewards.append(total)
    arr = np.asarray(rewards)
    return float(arr.mean()), float(arr.std()), rewards


# ---------------------------------------------------------------------------
# Advantage batch assembly (per node) from sampled buffer steps
# ---------------------------------------------------------------------------


def build_advantage_batch(trajs: list, picks: list, node: int,
                          policy: PolicyNetwork, value: ValueNetwork,
                          env_cfg: EnvConfig, gamma: float,
                          lam: float) -> AdvantageBatch:
    """GAE over the sampled transitions' parent trajectories, sliced down to
    the sampled steps. Old log-probs come from the current (round-start)
    policy snapshot."""
    from .autodiff import Tensor, no_grad

    cap = env_cfg.buffer_capacity
    per_traj = []
    for traj in trajs:
        states = np.stack([encoded_node_state(tr, node, cap) for tr in traj])
        vals = value.values(states)
        last = traj[-1]
        if last.done:
            bootstrap = 0.0
        else:
            bootstrap = float(value.values(
                encode_node_window(last.state_after["nodes"][node], cap)[None, :])[0])
        rewards = [tr.reward for tr in traj]
        dones = [tr.done for tr in traj]
        adv, ret = gae(rewards, np.append(vals, bootstrap), dones, gamma, lam)
        per_traj.append((states, adv, ret, traj))

    rows_states = []
    rows_ucm = []
    rows_action = []
    rows_adv = []
    rows_ret = []
    for ti, si in picks:
        states, adv, ret, traj = per_traj[ti]
        rows_states.append(states[si])
        d = traj[si].decisions[node]
        rows_ucm.append(d.ucm)
        rows_action.append(d.action)
        rows_adv.append(adv[si])
        rows_ret.append(ret[si])
    states = np.stack(rows_states)
    ucms = np.asarray(rows_ucm, dtype=np.int64)
    actions = np.asarray(rows_action, dtype=np.int64)
    with no_grad():
        old_lp = policy.log_prob(Tensor(states), ucms, actions).data.copy()
    return AdvantageBatch(states, ucms, actions, old_lp,
                          np.asarray(rows_adv), np.asarray(rows_ret))


# ---------------------------------------------------------------------------
# Per-method training
# ---------------------------------------------------------------------------


def _spawn_rngs(seed: int, n: int):
    return [np.random.Generator(np.random.PCG64(ss))
            for ss in np.random.SeedSequence([int(seed)]).spawn(n)]


def _build_nets(env_cfg: EnvConfig, cfg: TrainConfig, init_rng):
    enc_dim = node_state_dim(env_cfg.history_window)
    policies, values, popts, vopts = [], [], [], []
    n_distinct = 1 if cfg.share_policy_weights else env_cfg.num_nodes
    for u in range(n_distinct):
        pstore, vstore = ParameterStore(), ParameterStore()
        policies.append(PolicyNetwork(pstore, f"policy{u}", enc_dim, init_rng))
        values.append(ValueNetwork(vstore, f"value{u}", enc_dim, init_rng))
        popts.append(Adam(pstore, lr=cfg.lr))
        vopts.append(Adam(vstore, lr=cfg.lr))
    if cfg.share_policy_weights:
        policies = policies * env_cfg.num_nodes
        values = values * env_cfg.num_nodes
        popts = popts * env_cfg.num_nodes
        vopts = vopts * env_cfg.num_nodes
    return policies, values, popts, vopts


def _train_seed_mbrl(env_cfg: EnvConfig, cfg: TrainConfig, seed: int):
    (env_seeder, act_rng, init_rng, model_ss_rng, mbatch_rng, roll_rng,
     roll_act_rng, ppo_rng) = _spawn_rngs(seed, 8)
    policies, values, popts, vopts = _build_nets(env_cfg, cfg, init_rng)
    model = CausalWorldModel(env_cfg, seed=int(model_ss_rng.integers(2 ** 31)),
                             l2=cfg.l2, lr=cfg.lr)
    team = MbrlTeam(policies, env_cfg.buffer_capacity)
    buffer = ReplayBuffer(capacity=cfg.replay_capacity)

    records = []
    counters = {"episodes": 0, "real_env_steps": 0, "model_updates": 0,
                "ppo_rounds": 0}
    n_distinct = 1 if cfg.share_policy_weights else env_cfg.num_nodes
    for epoch in range(1, cfg.n_epoch + 1):
        for _ in range(cfg.episodes_per_epoch):
            traj, _, T = run_episode(env_cfg, int(env_seeder.integers(2 ** 31)),
                                     team, act_rng)
            buffer.add_trajectory(traj)
            counters["episodes"] += 1
            counters["real_env_steps"] += T

        model_loss = None
        if epoch % cfg.n_graph == 0 and cfg.n_model > 0:
            trace = model.train_model(buffer.transitions(), cfg.n_model,
                                      cfg.batch_size, mbatch_rng)
            if trace:
                model_loss = float(np.mean(trace[-10:]))
                counters["model_updates"] += 1

        diag = None
        sample_size = cfg.n_ppo * cfg.batch_size
        for _ in range(cfg.n_round):
            sim = generate_synthetic(model, policies, buffer, cfg.n_rollout,
                                     cfg.k_rollout, roll_rng, roll_act_rng,
                                     env_cfg)
            d_combined = combine(buffer, sim)
            trajs, picks = d_combined.sample_steps(ppo_rng, sample_size)
            for u in range(n_distinct):
                batch = build_advantage_batch(trajs, picks, u, policies[u],
                                              values[u], env_cfg, cfg.gamma,
                                              cfg.gae_lambda)
                diag = ppo_update(policies[u], values[u], batch, popts[u],
                                  vopts[u], ppo_rng, clip_eps=cfg.clip_eps,
                                  n_ppo=cfg.n_ppo, batch_size=cfg.batch_size,
                                  entropy_coef=cfg.entropy_coef)
            counters["ppo_rounds"] += 1

        mean, std, _ = evaluate(team, env_cfg, cfg.eval_episodes, [seed])
        records.append(MetricsRecord(epoch, counters["real_env_steps"], mean,
                                     std, model_loss, diag))
        logger.info("seed %d epoch %d steps %d eval %.2f", seed, epoch,
                    counters["real_env_steps"], mean)

    artifacts = {"model": model, "policies": policies[:n_distinct],
                 "values": values[:n_distinct], "team": team}
    return SeedTrace(seed, records, counters), artifacts


def _train_seed_q(env_cfg: EnvConfig, cfg: TrainConfig, seed: int):
    env_seeder, q_rng = _spawn_rngs(seed, 2)
    agent = QLearnerAgent(env_cfg.num_nodes, env_cfg.buffer_capacity,
                          total_episodes=cfg.n_epoch * cfg.episodes_per_epoch,
                          alpha=cfg.q_alpha, gamma=cfg.gamma)
    team = QTeam(agent)
    records = []
    counters = {"episodes": 0, "real_env_steps": 0}
    for epoch in range(1, cfg.n_epoch + 1):
        for _ in range(cfg.episodes_per_epoch):
            def learn(tr: Transition):
                for u in range(env_cfg.num_nodes):
                    agent.learn(u, tr.state_before["nodes"][u], tr.decisions[u],
                                tr.reward, tr.state_after["nodes"][u], tr.done)

            _, _, T = run_episode(env_cfg, int(env_seeder.integers(2 ** 31)),
                                  team, q_rng, on_step=learn)
            agent.end_episode()
            counters["episodes"] += 1
            counters["real_env_steps"] += T
        mean, std, _ = evaluate(team, env_cfg, cfg.eval_episodes, [seed])
        records.append(MetricsRecord(epoch, counters["real_env_steps"], mean, std))
        logger.info("seed %d epoch %d steps %d eval %.2f", seed, epoch,
                    counters["real_env_steps"], mean)
    return SeedTrace(seed, records, counters), {"q_agent": agent, "team": team}


def _train_seed_predefined(env_cfg: EnvConfig, cfg: TrainConfig, seed: int):
    (env_seeder,) = _spawn_rngs(seed, 1)
    team = PredefinedTeam(env_cfg.num_nodes, env_cfg.buffer_capacity)
    records = []
    counters = {"episodes": 0, "real_env_steps": 0}
    rng = np.random.Generator(np.random.PCG64(0))
    for epoch in range(1, cfg.n_epoch + 1):
        for _ in range(cfg.episodes_per_epoch):
            _, _, T = run_episode(env_cfg, int(env_seeder.integers(2 ** 31)),
                                  team, rng)
            counters["episodes"] += 1
            counters["real_env_steps"] += T
        mean, std, _ = evaluate(team, env_cfg, cfg.eval_episodes, [seed])
        records.append(MetricsRecord(epoch, counters["real_env_steps"], mean, std))
    return SeedTrace(seed, records, counters), {"team": team}


_TRAINERS = {
    "causal-mbrl": _train_seed_mbrl,
    "tabular-q": _train_seed_q,
    "predefined": _train_seed_predefined,
}


def train(env_cfg: EnvConfig, cfg: TrainConfig) -> TrainResult:
    """Run every seed of the configured method."""
    trainer = _TRAINERS.get(cfg.method)
    if trainer is None:
        raise ConfigError(f"unknown method {cfg.method!r}")
    traces = {}
    artifacts = {}
    for seed in cfg.seeds:
        trace, art = trainer(env_cfg, cfg, seed)
        traces[seed] = trace
        artifacts[seed] = art
    return TrainResult(cfg.method, env_cfg, cfg, traces, artifacts)


# ---------------------------------------------------------------------------
# Sample efficiency
# ---------------------------------------------------------------------------


def samples_to_threshold(records: list, fraction: float, target_reward: float,
                         t_max: int) -> int | None:
    """Real steps at the first epoch whose eval reward reaches the
    fraction-scaled target on the nonnegative slots-saved scale
    (R -> R + T_max). None when the trace never reaches it."""
    if not records:
        raise ContractError("samples_to_threshold needs a nonempty trace")
    threshold = fraction * (target_reward + t_max) - t_max
    for rec in records:
        if rec.eval_mean_reward >= threshold - 1e-12:
            return rec.real_env_steps
    return None


def theorem1_ratio(num_vars: int, v_max: int, d_in: int) -> float:
    """Sample-complexity improvement factor v_max^(|V|-d_in) / |V|^2,
    evaluated in the log domain so intermediate terms cannot overflow."""
    if d_in > num_vars:
        raise ContractError(f"d_in {d_in} exceeds num_vars {num_vars}")
    if v_max < 2:
        raise ContractError(f"v_max must be >= 2, got {v_max}")
    if num_vars < 1:
        raise ContractError(f"num_vars must be >= 1, got {num_vars}")
    log_ratio = (num_vars - d_in) * math.log(v_max) - 2.0 * math.log(num_vars)
    try:
        return math.exp(log_ratio)
    except OverflowError:
        return math.inf


# ---------------------------------------------------------------------------
# Metric emission
# ---------------------------------------------------------------------------

CSV_HEADER = ["epoch", "real_env_steps", "eval_mean_reward", "eval_std",
              "model_loss"]


def emit_metrics(records: list, path):
    """CSV with the documented header; model_loss is blank when absent."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in records:
            writer.writerow([
                rec.epoch,
                rec.real_env_steps,
                repr(rec.eval_mean_reward),
                repr(rec.eval_std),
                "" if rec.model_loss is None else repr(rec.model_loss),
            ])


def read_metrics(path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ContractError(f"unexpected metrics header {reader.fieldnames}")
        for row in reader:
            records.append(MetricsRecord(
                epoch=int(row["epoch"]),
                real_env_steps=int(row["real_env_steps"]),
                eval_mean_reward=float(row["eval_mean_reward"]),
                eval_std=float(row["eval_std"]),
                model_loss=(None if row["model_loss"] == ""
                            else float(row["model_loss"])),
            ))
    return records


def compare_summary(results: dict, fraction: float = 0.95) -> dict:
    """Cross-method sample-efficiency summary from seed-averaged traces.

    The target is the best seed-averaged eval reward achieved by any method
    on this configuration; thresholds use the affine slots-saved scale. A
    method that never reaches the threshold reports null, and the
    efficiency bound falls back to its total collected real steps (a lower
    bound on its true requirement).
    """
    t_max = next(iter(results.values())).env_config.max_steps
    averaged = {m: res.averaged_trace() for m, res in results.items()}
    target = max(max(r.eval_mean_reward for r in recs)
                 for recs in averaged.values())
    threshold = fraction * (target + t_max) - t_max
    summary = {
        "fraction": fraction,
        "target_reward": target,
        "threshold_reward": threshold,
        "scale": "rewards mapped to slots saved via R + T_max; the threshold is "
                 f"{fraction} of the best method's slots saved",
        "t_max": t_max,
        "methods": {},
    }
    for method, recs in averaged.items():
        steps = samples_to_threshold(recs, fraction, target, t_max)
        summary["methods"][method] = {
            "samples_to_threshold": steps,
            "reached": steps is not None,
            "final_eval_mean": recs[-1].eval_mean_reward,
            "total_real_steps": recs[-1].real_env_steps,
        }
    if "causal-mbrl" in averaged and "tabular-q" in averaged:
        m = summary["methods"]["causal-mbrl"]
        q = summary["methods"]["tabular-q"]
        m_steps = m["samples_to_threshold"]
        q_steps = (q["samples_to_threshold"] if q["reached"]
                   else q["total_real_steps"])
        if m_steps is not None and q_steps:
            summary["efficiency_vs_q"] = 1.0 - m_steps / q_steps
            summary["efficiency_note"] = (
                "1 - steps_mbrl/steps_q; q's total collected steps stand in "
                "when it never reaches the threshold")
    return summary


def write_summary(summary: dict, path):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_artifacts(result: TrainResult, out_dir):
    """Per-seed parameter checkpoints under <out>/checkpoints/seed<k>/."""
    from pathlib import Path

    root = Path(out_dir) / "checkpoints"
    for seed, art in result.artifacts.items():
        d = root / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        if result.method == "causal-mbrl":
            art["model"].store.save(d / "model.npz")
            for u, (policy, value) in enumerate(zip(art["policies"], art["values"])):
                policy.store.save(d / f"policy{u}.npz")
                value.store.save(d / f"value{u}.npz")
        elif result.method == "tabular-q":
            agent: QLearnerAgent = art["q_agent"]
            payload = {
                "episodes_seen": agent.episodes_seen,
                "total_episodes": agent.total_episodes,
                "tables": [{k: list(v) for k, v in table.items()}
                           for table in agent.tables],
            }
            with open(d / "q_tables.json", "w") as fh:
                json.dump(payload, fh)


def load_mbrl_team(env_cfg: EnvConfig, cfg: TrainConfig, ckpt_dir, seed: int):
    """Rebuild the policy networks and load a saved checkpoint."""
    from pathlib import Path

    d = Path(ckpt_dir) / f"seed{seed}"
    rng = np.random.Generator(np.random.PCG64(0))
    policies, values, _, _ = _build_nets(env_cfg, cfg, rng)
    n_distinct = 1 if cfg.share_policy_weights else env_cfg.num_nodes
    for u in range(n_distinct):
        policies[u].store.load(d / f"policy{u}.npz")
        values[u].store.load(d / f"value{u}.npz")
    return MbrlTeam(policies, env_cfg.buffer_capacity)


def load_q_team(env_cfg: EnvConfig, cfg: TrainConfig, ckpt_dir, seed: int):
    from pathlib import Path

    d = Path(ckpt_dir) / f"seed{seed}"
    with open(d / "q_tables.json") as fh:
        payload = json.load(fh)
    agent = QLearnerAgent(env_cfg.num_nodes, env_cfg.buffer_capacity,
                          total_episodes=payload["total_episodes"],
                          alpha=cfg.q_alpha, gamma=cfg.gamma)
    agent.episodes_seen = payload["episodes_seen"]
    for table, saved in zip(agent.tables, payload["tables"]):
        for key, vals in saved.items():
            table[key] = np.asarray(vals, dtype=np.float64)
    return QTeam(agent)
