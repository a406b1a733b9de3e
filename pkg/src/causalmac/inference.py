"""Attention-based inference networks over the causal graph.

One network per learned target variable. Parents are split into state
variables (windows, processed independently) and action variables
(decisions and control messages, processed sequentially by a GRU). Each
encoded state parent contributes a value vector; the GRU's action
embedding produces a query whose dot products with per-variable key
vectors score the states. A modified softmax reserves residual weight for
the action embedding itself:

    alpha_i = exp(e_i) / (1 + sum_k exp(e_k)),   alpha_a = 1 / (1 + sum_k exp(e_k))

so all weights sum to one. The weighted sum of value vectors is decoded
into distribution parameters (class logits, or mean and log-std).

Only next observations are learned: next windows are a deterministic shift
of their components, gateway messages come from the known protocol, and
the reward function is known, so those stay out of the learned model.

Key vectors are shared across all inference networks (one per state
variable), as are the per-role variable encoders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import graph as cg
from .autodiff import Tensor, no_grad
from .distributions import Categorical, Gaussian
from .env import (
    Decision,
    EnvConfig,
    Transition,
    encode_gateway_window,
    encode_node_window,
    encoded_gateway_state,
    encoded_node_state,
    gateway_state_dim,
    node_state_dim,
)
from .errors import ContractError, UsageError
from .nn import Adam, Affine, GruCell, MLP, ParameterStore

EMBED_DIM = 64      # variable encoder output
HIDDEN_DIM = 128    # value vectors / decoder hidden
QUERY_DIM = 32      # query and key vectors
GRU_DIM = 64        # action embedding (equals the encoder embedding size)

LOG_2PI = float(np.log(2.0 * np.pi))


def write_attention_csv(rows, path):
    """Attention-weight dump: CSV columns target, parent, weight; rows in
    inference-call order, the action embedding's weight under "<actions>"."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "parent", "weight"])
        for target, parent, weight in rows:
            writer.writerow([target, parent, repr(float(weight))])


def attention_weights(scores) -> tuple[np.ndarray, float]:
    """Modified softmax over state scores with a unit action term.

    Equivalent to a softmax over [e_1, ..., e_S, 0]; stabilized against
    large magnitudes. Returns (per-state weights, action weight).
    """
    scores = np.asarray(scores, dtype=np.float64)
    ext = np.append(scores, 0.0)
    ext = ext - ext.max()
    e = np.exp(ext)
    w = e / e.sum()
    return w[:-1], float(w[-1])


@dataclass(frozen=True)
class TargetSpec:
    """What one inference network predicts and which parents feed it."""

    name: str
    kind: str                      # "categorical" | "gaussian"
    out_size: int                  # classes, or gaussian dimensionality
    state_parents: tuple           # ((variable, role), ...)
    action_parents: tuple          # ((variable, role), ...) in GRU order

    @property
    def decoder_dim(self) -> int:
        return self.out_size if self.kind == "categorical" else 2 * self.out_size


class InferenceNetwork:
    """Per-target network; encoders and key vectors are shared handles."""

    def __init__(self, spec: TargetSpec, store: ParameterStore, encoders: dict,
                 keys: dict, rng: np.random.Generator):
        self.spec = spec
        self.encoders = encoders
        self.keys = keys
        pre = f"net/{spec.name}"
        self.value_mlps = {
            var: Affine(store, f"{pre}/value/{var}", EMBED_DIM, HIDDEN_DIM, rng)
            for var, _role in spec.state_parents
        }
        self.gru = GruCell(store, f"{pre}/gru", EMBED_DIM, GRU_DIM, rng)
        self.w_q = Affine(store, f"{pre}/query", GRU_DIM, QUERY_DIM, rng)
        self.w_a = Affine(store, f"{pre}/action_value", GRU_DIM, HIDDEN_DIM, rng)
        self.decoder = MLP(store, f"{pre}/decoder",
                           [HIDDEN_DIM, HIDDEN_DIM, spec.decoder_dim], rng,
                           activation="relu")

    def forward(self, inputs: dict) -> tuple[Tensor, dict]:
        """inputs maps parent variable name -> raw (B, dim) float matrix.

        Returns the decoder output and the attention weights per parent
        ("<actions>" holds the residual action weight), each (B,).
        """
        for var, _role in self.spec.state_parents + self.spec.action_parents:
            if var not in inputs:
                raise ContractError(f"missing parent {var!r} for target {self.spec.name!r}")
        batch = next(iter(inputs.values())).shape[0]

        contributions = []
        scores = []
        state_vars = []
        for var, role in self.spec.state_parents:
            enc = self.encoders[role](Tensor(inputs[var]))
            contributions.append(ad.relu(self.value_mlps[var](enc)))
            state_vars.append(var)

        action_seq = [self.encoders[role](Tensor(inputs[var]))
                      for var, role in self.spec.action_parents]
        embed = self.gru.run(action_seq, batch)
        query = self.w_q(embed)
        action_value = self.w_a(embed)

        for var in state_vars:
            key = ad.reshape(self.keys[var], (QUERY_DIM, 1))
            scores.append(ad.matmul(query, key))
        zero = Tensor(np.zeros((batch, 1)))
        stacked = ad.concat(scores + [zero], axis=1) if scores else zero
        weights = ad.softmax(stacked, axis=1)

        hidden = ad.slice_cols(weights, len(state_vars), len(state_vars) + 1) * action_value
        for i, c in enumerate(contributions):
            hidden = hidden + ad.slice_cols(weights, i, i + 1) * c
        out = self.decoder(hidden)

        alphas = {var: weights.data[:, i] for i, var in enumerate(state_vars)}
        alphas["<actions>"] = weights.data[:, len(state_vars)]
        return out, alphas

    def nll(self, inputs: dict, observed: np.ndarray) -> Tensor:
        """Per-sample negative log-likelihood, shape (B,)."""
        out, _ = self.forward(inputs)
        if self.spec.kind == "categorical":
            logp = ad.log_softmax(out, axis=1)
            return -ad.take_rows(logp, np.asarray(observed, dtype=np.int64))
        mean = ad.slice_cols(out, 0, self.spec.out_size)
        log_std = ad.slice_cols(out, self.spec.out_size, 2 * self.spec.out_size)
        x = Tensor(np.asarray(observed, dtype=np.float64).reshape(mean.shape))
        z = (x - mean) * ad.exp(-log_std)
        per_dim = ad.square(z) * 0.5 + log_std + 0.5 * LOG_2PI
        return ad.tsum(per_dim, axis=1)

    def distribution(self, inputs: dict):
        """Single-sample forward into a Distribution plus attention weights."""
        with no_grad():
            out, alphas = self.forward(inputs)
        row = out.data[0]
        weights = {k: float(v[0]) for k, v in alphas.items()}
        if self.spec.kind == "categorical":
            shifted = row - row.max()
            e = np.exp(shifted)
            return Categorical(e / e.sum()), weights
        d = self.spec.out_size
        return Gaussian(row[:d], row[d:]), weights


def _decision_onehot(d: Decision) -> np.ndarray:
    vec = np.zeros(5)
    vec[d.ucm] = 1.0
    vec[2 + d.action] = 1.0
    return vec


def _action_onehot(action: int) -> np.ndarray:
    vec = np.zeros(3)
    vec[action] = 1.0
    return vec


class CausalWorldModel:
    """The learned structural model: shared encoders and keys plus one
    inference network per next-observation variable."""

    def __init__(self, config: EnvConfig, seed: int = 0, l2: float = 1e-4,
                 lr: float = 1e-4):
        self.config = config
        self.l2 = l2
        self.graph = cg.default_graph(config)
        self.store = ParameterStore()
        rng = np.random.Generator(np.random.PCG64(seed))
        U = config.num_nodes
        N = config.history_window

        self.encoders = {
            "node_state": MLP(self.store, "enc/node_state",
                              [node_state_dim(N), EMBED_DIM, EMBED_DIM], rng),
            "gateway_state": MLP(self.store, "enc/gateway_state",
                                 [gateway_state_dim(N, U), EMBED_DIM, EMBED_DIM], rng),
            "channel_action": MLP(self.store, "enc/channel_action",
                                  [3, EMBED_DIM, EMBED_DIM], rng),
            "decision": MLP(self.store, "enc/decision",
                            [5, EMBED_DIM, EMBED_DIM], rng),
        }
        self.keys = {}
        for u in range(U):
            self.keys[cg.node_state(u)] = self.store.add(
                f"keys/{cg.node_state(u)}", rng.normal(0.0, 0.01, QUERY_DIM))
            self.keys[cg.node_obs(u)] = self.store.add(
                f"keys/{cg.node_obs(u)}", rng.normal(0.0, 0.01, QUERY_DIM))
        self.keys[cg.gateway_state()] = self.store.add(
            f"keys/{cg.gateway_state()}", rng.normal(0.0, 0.01, QUERY_DIM))
        self.keys[cg.gateway_obs()] = self.store.add(
            f"keys/{cg.gateway_obs()}", rng.normal(0.0, 0.01, QUERY_DIM))

        specs = [TargetSpec(
            name=cg.gateway_obs(1),
            kind="categorical",
            out_size=U + 2,
            state_parents=((cg.gateway_state(), "gateway_state"),),
            action_parents=tuple((cg.node_decision(u), "decision") for u in range(U)),
        )]
        for u in range(U):
            specs.append(TargetSpec(
                name=cg.node_obs(u, 1),
                kind="categorical",
                out_size=config.buffer_capacity + 1,
                state_parents=((cg.node_state(u), "node_state"),),
                action_parents=((cg.node_channel_action(u), "channel_action"),),
            ))
        self.networks = {s.name: InferenceNetwork(s, self.store, self.encoders,
                                                  self.keys, rng)
                         for s in specs}
        self.optimizer = Adam(self.store, lr=lr)

    # ------------------------------------------------------------------
    # input assembly
    # ------------------------------------------------------------------

    def _batch_inputs(self, transitions: list[Transition]) -> dict:
        """Encode every parent variable once for a batch of transitions."""
        cfg = self.config
        U = cfg.num_nodes
        inputs = {
            cg.gateway_state(): np.stack([
                encoded_gateway_state(tr, U) for tr in transitions]),
        }
        for u in range(U):
            inputs[cg.node_state(u)] = np.stack([
                encoded_node_state(tr, u, cfg.buffer_capacity)
                for tr in transitions])
            inputs[cg.node_decision(u)] = np.stack([
                _decision_onehot(tr.decisions[u]) for tr in transitions])
            inputs[cg.node_channel_action(u)] = np.stack([
                _action_onehot(tr.decisions[u].action) for tr in transitions])
        return inputs

    def _labels(self, transitions: list[Transition]) -> dict:
        labels = {cg.gateway_obs(1): np.array([tr.gateway_obs for tr in transitions])}
        for u in range(self.config.num_nodes):
            labels[cg.node_obs(u, 1)] = np.array([tr.node_obs[u] for tr in transitions])
        return labels

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------

    def loss(self, transitions: list[Transition], l2: float | None = None) -> Tensor:
        """Mean summed per-variable NLL over the batch plus the L2 penalty."""
        if not transitions:
            raise UsageError("model loss needs a nonempty batch")
        lam = self.l2 if l2 is None else l2
        inputs = self._batch_inputs(transitions)
        labels = self._labels(transitions)
        total = None
        for name, net in self.networks.items():
            term = ad.tmean(net.nll(inputs, labels[name]))
            total = term if total is None else total + term
        if lam != 0.0:
            total = total + Tensor(lam) * self.store.squared_norm()
        return total

    def heldout_nll(self, transitions: list[Transition]) -> float:
        """Data NLL without the penalty term, for monitoring."""
        with no_grad():
            inputs = self._batch_inputs(transitions)
            labels = self._labels(transitions)
            return sum(float(ad.tmean(net.nll(inputs, labels[name])).item())
                       for name, net in self.networks.items())

    def train_model(self, transitions: list[Transition], n_steps: int,
                    batch_size: int, rng: np.random.Generator,
                    lr: float | None = None) -> list[float]:
        """Uniform-minibatch gradient steps; returns the per-step loss trace."""
        if len(transitions) < batch_size:
            import logging
            logging.getLogger(__name__).warning(
                "model update skipped: buffer %d < batch size %d",
                len(transitions), batch_size)
            return []
        if lr is not None:
            self.optimizer.lr = lr
        trace = []
        for _ in range(n_steps):
            idx = rng.choice(len(transitions), size=batch_size, replace=False)
            batch = [transitions[i] for i in idx]
            self.store.zero_grad()
            loss = self.loss(batch)
            loss.backward()
            self.optimizer.step()
            trace.append(loss.item())
        return trace

    # ------------------------------------------------------------------
    # inference / sampling
    # ------------------------------------------------------------------

    def parents_of(self, target: str) -> list[str]:
        spec = self.networks[target].spec
        return [v for v, _ in spec.state_parents + spec.action_parents]

    def infer(self, target: str, parent_values: dict):
        """Distribution over one target from raw parent values.

        Node windows, gateway windows, Decision tuples and action ints are
        accepted; values are keyed by parent variable name.
        """
        if target not in self.networks:
            raise ContractError(f"no inference network for target {target!r}")
        net = self.networks[target]
        parents = net.spec.state_parents + net.spec.action_parents
        for var, _role in parents:
            if var not in parent_values:
                raise ContractError(f"missing parent {var!r} for target {target!r}")
        inputs = {var: self._encode_value(role, parent_values[var])
                  for var, role in parents}
        return net.distribution(inputs)

    def _encode_value(self, role: str, value) -> np.ndarray:
        if role == "node_state":
            return encode_node_window(value, self.config.buffer_capacity)[None, :]
        if role == "gateway_state":
            return encode_gateway_window(value, self.config.num_nodes)[None, :]
        if role == "decision":
            return _decision_onehot(value)[None, :]
        if role == "channel_action":
            return _action_onehot(int(value))[None, :]
        raise ContractError(f"unknown parent role {role!r}")

    def sample_slot(self, node_windows: list, gateway_window: tuple,
                    decisions: list[Decision], rng: np.random.Generator):
        """Sample one slot's observations for a model rollout.

        Draw order is fixed: gateway observation first, then node
        observations in node order. Returns (gateway_obs, node_obs tuple,
        attention rows) where rows are (target, parent, weight) triples.
        """
        from .distributions import sample as draw

        U = self.config.num_nodes
        rows = []
        values = {cg.gateway_state(): gateway_window}
        for u in range(U):
            values[cg.node_decision(u)] = decisions[u]
        dist, weights = self.infer(cg.gateway_obs(1), values)
        gateway_obs = int(draw(dist, rng))
        rows.extend((cg.gateway_obs(1), parent, w) for parent, w in weights.items())

        node_obs = []
        for u in range(U):
            values = {
                cg.node_state(u): node_windows[u],
                cg.node_channel_action(u): decisions[u].action,
            }
            dist, weights = self.infer(cg.node_obs(u, 1), values)
            node_obs.append(int(draw(dist, rng)))
            rows.extend((cg.node_obs(u, 1), parent, w) for parent, w in weights.items())
        return gateway_obs, tuple(node_obs), rows
