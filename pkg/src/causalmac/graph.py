"""The fixed causal DAG over one slot transition.

Variables live in two layers (time t and time t+1) with roles state,
observation, decision, dcm and reward. Parent sets transcribe the
structural equations: next node state from (state, observation, decision,
DCM); next gateway state from (state, observation, all decisions, all
DCMs); next node observation from (state, channel action); next gateway
observation from (state, all decisions); reward from everything at time t.
Decision and DCM nodes are roots here: nodes pick decisions by policy and
the gateway protocol is fixed, so neither is learned.

Each node's channel action appears both inside the combined decision d_u
and as its own component variable a_u, because the observation equation
depends on the action alone while the state equations take the full
decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .env import EnvConfig
from .errors import ContractError


@dataclass(frozen=True)
class Variable:
    name: str
    layer: int  # 0 = time t, 1 = time t+1
    role: str  # state | observation | decision | dcm | reward


@dataclass
class CausalGraph:
    variables: list[Variable]
    parents: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ContractError("duplicate variable names")
        self._by_name = {v.name: v for v in self.variables}
        for target, ps in self.parents.items():
            if target not in self._by_name:
                raise ContractError(f"unknown target variable {target!r}")
            for p in ps:
                if p not in self._by_name:
                    raise ContractError(f"unknown parent {p!r} of {target!r}")
        self.check_acyclic()

    def variable(self, name: str) -> Variable:
        return self._by_name[name]

    def parent_list(self, target: str) -> list[str]:
        return list(self.parents.get(target, []))

    def in_degree(self, target: str) -> int:
        return len(self.parents.get(target, []))

    def max_in_degree(self) -> int:
        return max((len(p) for p in self.parents.values()), default=0)

    def num_variables(self) -> int:
        return len(self.variables)

    def check_acyclic(self):
        """Kahn topological sort; raises if a cycle exists."""
        indeg = {v.name: 0 for v in self.variables}
        children: dict[str, list[str]] = {v.name: [] for v in self.variables}
        for target, ps in self.parents.items():
            indeg[target] += len(ps)
            for p in ps:
                children[p].append(target)
        queue = [n for n, d in indeg.items() if d == 0]
        seen = 0
        while queue:
            n = queue.pop()
            seen += 1
            for c in children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        if seen != len(self.variables):
            raise ContractError("causal graph contains a cycle")

    def export_text(self) -> str:
        """Plain-text adjacency listing: variable <- parent, parent, ..."""
        lines = []
        for v in self.variables:
            ps = self.parents.get(v.name, [])
            lines.append(f"{v.name} <- {', '.join(ps) if ps else '(root)'}")
        return "\n".join(lines) + "\n"


def node_state(u: int, layer: int = 0) -> str:
    return f"x{u + 1}" + ("'" if layer else "")


def gateway_state(layer: int = 0) -> str:
    return "xb" + ("'" if layer else "")


def node_obs(u: int, layer: int = 0) -> str:
    return f"o{u + 1}" + ("'" if layer else "")


def gateway_obs(layer: int = 0) -> str:
    return "ob" + ("'" if layer else "")


def node_decision(u: int) -> str:
    return f"d{u + 1}"


def node_channel_action(u: int) -> str:
    return f"a{u + 1}"


def node_dcm(u: int) -> str:
    return f"m{u + 1}"


def default_graph(config: EnvConfig) -> CausalGraph:
    """Two-slice DAG for the configured number of nodes."""
    U = config.num_nodes
    variables: list[Variable] = []
    for u in range(U):
        variables.append(Variable(node_state(u), 0, "state"))
        variables.append(Variable(node_obs(u), 0, "observation"))
        variables.append(Variable(node_decision(u), 0, "decision"))
        variables.append(Variable(node_channel_action(u), 0, "decision"))
        variables.append(Variable(node_dcm(u), 0, "dcm"))
    variables.append(Variable(gateway_state(), 0, "state"))
    variables.append(Variable(gateway_obs(), 0, "observation"))
    for u in range(U):
        variables.append(Variable(node_state(u, 1), 1, "state"))
        variables.append(Variable(node_obs(u, 1), 1, "observation"))
    variables.append(Variable(gateway_state(1), 1, "state"))
    variables.append(Variable(gateway_obs(1), 1, "observation"))
    variables.append(Variable("r'", 1, "reward"))

    all_decisions = [node_decision(u) for u in range(U)]
    all_dcms = [node_dcm(u) for u in range(U)]
    parents: dict[str, list[str]] = {}
    for u in range(U):
        parents[node_state(u, 1)] = [node_state(u), node_obs(u),
                                     node_decision(u), node_dcm(u)]
        parents[node_obs(u, 1)] = [node_state(u), node_channel_action(u)]
    parents[gateway_state(1)] = ([gateway_state(), gateway_obs()]
                                 + all_decisions + all_dcms)
    parents[gateway_obs(1)] = [gateway_state()] + all_decisions
    parents["r'"] = ([node_state(u) for u in range(U)] + [gateway_state()]
                     + all_decisions + all_dcms
                     + [node_obs(u) for u in range(U)] + [gateway_obs()])
    return CausalGraph(variables, parents)
