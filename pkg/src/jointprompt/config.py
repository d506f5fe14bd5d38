"""Run configuration: one JSON document describing graph, prompts, backends and knobs.

Relative paths inside the document resolve against the document's directory.
Prompts may be given inline or as ``{"template": "<name>"}`` to pull one of
the bundled agent templates.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from . import errors
from .gateway import BackendProfile, Gateway
from .search import Hyperparams
from .templates import agent_template, load_template
from .topology import CommGraph, PromptConfig

_KNOWN_KEYS = {
    "graph", "prompts", "backends", "hyperparams", "pool_path", "seed", "output_dir",
    "optimizer_backend", "evaluator_backend", "cache_dir", "template_dir",
}


@dataclass
class RunConfig:
    graph: CommGraph
    prompts: PromptConfig
    backends: list[BackendProfile]
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    pool_path: str | None = None
    seed: int = 0
    output_dir: str = "runs"
    optimizer_backend: str = "optimizer"
    evaluator_backend: str = "evaluator"
    cache_dir: str | None = None
    template_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Everything checkable without touching a backend."""
        self.graph.order()
        self.prompts.validate(self.graph)
        names = {b.name for b in self.backends}
        if len(names) != len(self.backends):
            raise errors.ConfigError("backend names must be unique")
        for a in self.graph.agents:
            if a.backend_ref not in names:
                raise errors.ConfigError(f"agent {a.id} refers to unknown backend {a.backend_ref!r}")
        for role, name in (("optimizer", self.optimizer_backend), ("evaluator", self.evaluator_backend)):
            if name not in names:
                raise errors.ConfigError(f"{role} backend {name!r} is not defined")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path | None = None) -> "RunConfig":
        unknown = sorted(set(d) - _KNOWN_KEYS)
        if unknown:
            raise errors.ConfigError(f"unknown config keys {unknown}")
        for key in ("graph", "prompts", "backends"):
            if key not in d:
                raise errors.ConfigError(f"config is missing {key!r}")
        base = Path(base_dir) if base_dir is not None else None

        def resolve(p):
            if p is None or base is None or Path(p).is_absolute():
                return p
            return os.path.normpath(base / p)

        template_dir = resolve(d.get("template_dir"))
        graph = CommGraph.from_dict(d["graph"])
        prompts = {}
        for agent, spec in d["prompts"].items():
            if isinstance(spec, Mapping):
                if "template" not in spec:
                    raise errors.InvalidPromptConfig(f"prompt for {agent} needs text or a template name")
                prompts[agent] = load_template(spec["template"], template_dir)
            else:
                prompts[agent] = spec
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise errors.ConfigError("seed must be an integer")
        return cls(
            graph=graph,
            prompts=PromptConfig(prompts),
            backends=[BackendProfile.from_dict(b, base) for b in d["backends"]],
            hyperparams=Hyperparams.from_dict(d.get("hyperparams", {})),
            pool_path=resolve(d.get("pool_path")),
            seed=seed,
            output_dir=resolve(d.get("output_dir", "runs")),
            optimizer_backend=d.get("optimizer_backend", "optimizer"),
            evaluator_backend=d.get("evaluator_backend", "evaluator"),
            cache_dir=resolve(d.get("cache_dir")),
            template_dir=template_dir,
        )

    def to_dict(self) -> dict:
        return {
            "graph": self.graph.to_dict(),
            "prompts": self.prompts.to_dict(),
            "backends": [b.to_dict() for b in self.backends],
            "hyperparams": self.hyperparams.to_dict(),
            "pool_path": self.pool_path,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "optimizer_backend": self.optimizer_backend,
            "evaluator_backend": self.evaluator_backend,
            "cache_dir": self.cache_dir,
            "template_dir": self.template_dir,
        }

    def gateway(self, **kwargs) -> Gateway:
        return Gateway(self.backends, cache_dir=self.cache_dir, **kwargs)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise errors.ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise errors.ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise errors.ConfigError("config must be a JSON object")
    return RunConfig.from_dict(doc, path.parent)


# -- topology presets ------------------------------------------------------------

_AGGREGATOR = (
    "You combine the work of several specialist solvers into one final answer.\n"
    "Compare their solutions, resolve disagreements by checking each step, and "
    "commit to the answer best supported by correct reasoning. {requirement}\n"
    "{context}\n"
    "Question: {question}\n"
    "Final solution:"
)

_SOLVER_FOCUS = (
    ("algebra", "Solves the problem with algebraic manipulation."),
    ("casework", "Solves the problem by careful enumeration of cases."),
    ("verification", "Solves the problem and checks the result by substitution."),
)


def sequential_preset(task_kind: str = "math", backend: str = "agent") -> dict:
    """Predictor, reflector, predictor, reflector in a chain."""
    agents, prompts = [], {}
    roles = ("predictor", "reflector", "predictor", "reflector")
    for i, role in enumerate(roles, 1):
        aid = f"{role}{(i + 1) // 2}"
        agents.append({
            "id": aid,
            "role_label": f"{role.capitalize()} {(i + 1) // 2}",
            "role_description": (
                "Produces a step-by-step solution." if role == "predictor"
                else "Critiques the previous solution and corrects it."
            ),
            "task_kind": task_kind,
            "gen_params": {"temperature": 0.0, "max_tokens": 2048},
            "backend_ref": backend,
        })
        prompts[aid] = agent_template(role, task_kind)
    ids = [a["id"] for a in agents]
    return {
        "graph": {"agents": agents, "edges": [[u, v] for u, v in zip(ids, ids[1:])], "output_agent": ids[-1]},
        "prompts": prompts,
    }


def hierarchical_preset(task_kind: str = "math", backend: str = "agent") -> dict:
    """Three parallel solvers feeding one aggregator."""
    agents, prompts, edges = [], {}, []
    base = agent_template("predictor", task_kind)
    for name, description in _SOLVER_FOCUS:
        aid = f"solver_{name}"
        agents.append({
            "id": aid,
            "role_label": f"{name.capitalize()} solver",
            "role_description": description,
            "task_kind": task_kind,
            "gen_params": {"temperature": 0.0, "max_tokens": 2048},
            "backend_ref": backend,
        })
        prompts[aid] = f"Focus: {description}\n{base}"
        edges.append([aid, "aggregator"])
    agents.append({
        "id": "aggregator",
        "role_label": "Aggregator",
        "role_description": "Synthesizes the solvers' answers into the final answer.",
        "task_kind": task_kind,
        "gen_params": {"temperature": 0.0, "max_tokens": 2048},
        "backend_ref": backend,
    })
    prompts["aggregator"] = _AGGREGATOR
    return {"graph": {"agents": agents, "edges": edges, "output_agent": "aggregator"}, "prompts": prompts}
