"""Agent communication graphs and prompt configurations."""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from . import errors
from .templates import TASK_KINDS, placeholders

PROMPT_PLACEHOLDERS = frozenset({"question", "context", "requirement"})


@dataclass(frozen=True)
class AgentSpec:
    id: str
    role_label: str = ""
    role_description: str = ""
    task_kind: str = "math"
    temperature: float = 0.0
    max_tokens: int = 2048
    backend_ref: str = "agent"
    optimizable: bool = True

    def __post_init__(self):
        if not self.id:
            raise errors.ConfigError("agent id must be non-empty")
        if self.task_kind not in TASK_KINDS:
            raise errors.ConfigError(f"agent {self.id}: unknown task_kind {self.task_kind!r}")
        if not 0 <= self.temperature <= 2:
            raise errors.ConfigError(f"agent {self.id}: temperature must be in [0, 2]")
        if self.max_tokens < 1:
            raise errors.ConfigError(f"agent {self.id}: max_tokens must be >= 1")
        if not self.role_label:
            object.__setattr__(self, "role_label", self.id)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "role_label": self.role_label,
            "role_description": self.role_description,
            "task_kind": self.task_kind,
            "gen_params": {"temperature": self.temperature, "max_tokens": self.max_tokens},
            "backend_ref": self.backend_ref,
            "optimizable": self.optimizable,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AgentSpec":
        gen = d.get("gen_params", {})
        return cls(
            id=d["id"],
            role_label=d.get("role_label", ""),
            role_description=d.get("role_description", ""),
            task_kind=d.get("task_kind", "math"),
            temperature=float(gen.get("temperature", 0.0)),
            max_tokens=int(gen.get("max_tokens", 2048)),
            backend_ref=d.get("backend_ref", "agent"),
            optimizable=bool(d.get("optimizable", True)),
        )


@dataclass(frozen=True)
class CommGraph:
    """A DAG of agents with a single designated output agent.

    Construction does not validate; call :meth:`validate_and_sort` (or
    :func:`validate_and_sort`) before use. Every traversal helper validates
    lazily and caches the order.
    """

    agents: tuple[AgentSpec, ...]
    edges: tuple[tuple[str, str], ...]
    output_agent: str
    _order: tuple[str, ...] | None = field(default=None, init=False, repr=False, compare=False)

    def __init__(self, agents: Iterable[AgentSpec], edges: Iterable[tuple[str, str]], output_agent: str):
        object.__setattr__(self, "agents", tuple(agents))
        object.__setattr__(self, "edges", tuple((str(a), str(b)) for a, b in edges))
        object.__setattr__(self, "output_agent", output_agent)
        object.__setattr__(self, "_order", None)

    @property
    def agent_ids(self) -> list[str]:
        return [a.id for a in self.agents]

    def agent(self, agent_id: str) -> AgentSpec:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise errors.UnknownAgent(agent_id)

    def order(self) -> list[str]:
        if self._order is None:
            object.__setattr__(self, "_order", tuple(validate_and_sort(self)))
        return list(self._order)

    def optimizable_order(self) -> list[str]:
        return [a for a in self.order() if self.agent(a).optimizable]

    def neighbors(self, agent_id: str, direction: str) -> list[str]:
        return neighbors(self, agent_id, direction)

    def downstream_closure(self, agent_id: str) -> list[str]:
        """``agent_id`` and everything reachable from it, in topological order."""
        self.agent(agent_id)
        succ = _adjacency(self)
        seen = {agent_id}
        stack = [agent_id]
        while stack:
            for nxt in succ[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return [a for a in self.order() if a in seen]

    def to_dict(self) -> dict:
        return {
            "agents": [a.to_dict() for a in self.agents],
            "edges": [list(e) for e in self.edges],
            "output_agent": self.output_agent,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CommGraph":
        return cls(
            agents=[AgentSpec.from_dict(a) for a in d["agents"]],
            edges=[tuple(e) for e in d.get("edges", [])],
            output_agent=d["output_agent"],
        )


def _adjacency(graph: CommGraph) -> dict[str, list[str]]:
    succ: dict[str, list[str]] = {a.id: [] for a in graph.agents}
    for u, v in graph.edges:
        succ[u].append(v)
    return succ


def _find_cycle(nodes: set[str], succ: dict[str, list[str]]) -> list[str]:
    # Every node left over by Kahn's algorithm has an in-edge from another
    # leftover node, so walking predecessors must revisit a node.
    pred: dict[str, str] = {}
    for u in sorted(nodes):
        for v in succ[u]:
            if v in nodes and v not in pred:
                pred[v] = u
    start = min(nodes)
    path = [start]
    seen = {start: 0}
    cur = start
    while True:
        cur = pred[cur]
        if cur in seen:
            cycle = path[seen[cur]:] + [cur]
            return list(reversed(cycle))
        seen[cur] = len(path)
        path.append(cur)


def validate_and_sort(graph: CommGraph) -> list[str]:
    """Validate ``graph`` and return its deterministic topological order.

    Among ready agents, the one declared earliest in ``graph.agents`` goes
    first.
    """
    ids = graph.agent_ids
    index: dict[str, int] = {}
    for i, a in enumerate(ids):
        if a in index:
            raise errors.DuplicateAgent(f"agent id {a!r} appears twice")
        index[a] = i

    seen_edges = set()
    for u, v in graph.edges:
        for end in (u, v):
            if end not in index:
                raise errors.UnknownAgentInEdge(f"edge {u} -> {v} names unknown agent {end!r}")
        if u == v:
            raise errors.InvalidEdge(f"self-loop on {u!r}")
        if (u, v) in seen_edges:
            raise errors.InvalidEdge(f"duplicate edge {u} -> {v}")
        seen_edges.add((u, v))

    succ = _adjacency(graph)
    indeg = {a: 0 for a in ids}
    for _, v in graph.edges:
        indeg[v] += 1

    ready = [index[a] for a in ids if indeg[a] == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        a = ids[heapq.heappop(ready)]
        order.append(a)
        for v in succ[a]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, index[v])

    if len(order) != len(ids):
        cycle = _find_cycle(set(ids) - set(order), succ)
        raise errors.CycleDetected((cycle[0], cycle[1]), cycle)

    out = graph.output_agent
    if out not in index:
        raise errors.NoOutputAgent(f"output agent {out!r} is not a declared agent")
    if succ[out]:
        raise errors.OutputAgentHasSuccessors(f"output agent {out!r} has successors {succ[out]}")

    # reverse reachability from the output agent
    pred: dict[str, list[str]] = {a: [] for a in ids}
    for u, v in graph.edges:
        pred[v].append(u)
    reach = {out}
    stack = [out]
    while stack:
        for p in pred[stack.pop()]:
            if p not in reach:
                reach.add(p)
                stack.append(p)
    for a in ids:
        if a not in reach:
            raise errors.UnreachableOutput(f"agent {a!r} has no path to output agent {out!r}")
    return order


def neighbors(graph: CommGraph, agent: str, direction: str) -> list[str]:
    """Predecessors (``"in"``) or successors (``"out"``) in topological order."""
    if direction not in ("in", "out"):
        raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")
    order = graph.order()
    if agent not in order:
        raise errors.UnknownAgent(agent)
    if direction == "in":
        found = {u for u, v in graph.edges if v == agent}
    else:
        found = {v for u, v in graph.edges if u == agent}
    return [a for a in order if a in found]


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class PromptConfig(Mapping[str, str]):
    """Immutable map from agent id to prompt template."""

    def __init__(self, prompts: Mapping[str, str]):
        self._prompts = dict(prompts)
        self._fingerprint: str | None = None

    def __getitem__(self, agent_id: str) -> str:
        return self._prompts[agent_id]

    def __iter__(self):
        return iter(self._prompts)

    def __len__(self) -> int:
        return len(self._prompts)

    def __eq__(self, other) -> bool:
        if isinstance(other, PromptConfig):
            return self._prompts == other._prompts
        if isinstance(other, Mapping):
            return self._prompts == dict(other)
        return NotImplemented

    def __hash__(self):
        return hash(self.fingerprint)

    def __repr__(self) -> str:
        return f"PromptConfig({self._prompts!r})"

    def to_dict(self) -> dict[str, str]:
        return dict(sorted(self._prompts.items()))

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            blob = json.dumps(self._prompts, sort_keys=True, ensure_ascii=False)
            self._fingerprint = text_digest(blob)
        return self._fingerprint

    def with_prompt(self, agent_id: str, prompt: str) -> "PromptConfig":
        if agent_id not in self._prompts:
            raise errors.UnknownAgent(agent_id)
        if self._prompts[agent_id] == prompt:
            return self
        new = dict(self._prompts)
        new[agent_id] = prompt
        return PromptConfig(new)

    def validate(self, graph: CommGraph) -> "PromptConfig":
        ids = set(graph.agent_ids)
        if set(self._prompts) != ids:
            missing = sorted(ids - set(self._prompts))
            extra = sorted(set(self._prompts) - ids)
            raise errors.InvalidPromptConfig(f"prompt keys mismatch: missing={missing} extra={extra}")
        for agent_id, template in self._prompts.items():
            check_prompt_template(template, agent_id)
        return self


def check_prompt_template(template: str, agent_id: str = "?") -> None:
    names = placeholders(template)
    if "question" not in names:
        raise errors.InvalidPromptConfig(f"prompt for {agent_id!r} lacks the {{question}} placeholder")
    unknown = sorted(set(names) - PROMPT_PLACEHOLDERS)
    if unknown:
        raise errors.InvalidPromptConfig(f"prompt for {agent_id!r} uses unknown placeholders {unknown}")
