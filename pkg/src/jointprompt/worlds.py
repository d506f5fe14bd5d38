"""Scripted micro-worlds for offline runs of the optimizer.

A world plays all three backend roles at once: the agents, the judge and
the optimizer. Prompts carry a machine-readable tag such as
``[[a1|v=3]]``; agent outputs carry ``[a1 v=3]`` markers that downstream
agents copy forward, and the judge prefers whichever output has the higher
hidden quality. Because every quality is known, the best configuration can
be computed exhaustively and compared with what the search returns.

Each world instance is callable as a gateway handler, so it can be wired up
either directly (``Gateway(profiles, handlers=world.handlers())``) or from a
config file with ``"handler": "jointprompt.worlds:ChainWorld"``.
"""

from __future__ import annotations

import hashlib
import itertools
import re
from typing import Mapping

from .gateway import BackendProfile, ChatRequest
from .proposer import MISALIGNMENT_NOTE
from .runtime import QuerySample
from .topology import AgentSpec, CommGraph, PromptConfig

OPTIMIZER_MARK = "You are optimizing a prompt"
_PROMPT_TAG = re.compile(r"\[\[(\w+)\|([^\]]*)\]\]")
_OUTPUT_TAG = re.compile(r"\[(\w+) ((?:\w+=-?\d+,?)+)\]")


def _params(encoded: str) -> dict[str, int]:
    out = {}
    for part in encoded.split(","):
        if part:
            k, _, v = part.partition("=")
            out[k] = int(v)
    return out


def _encode(params: Mapping[str, int]) -> str:
    return ",".join(f"{k}={params[k]}" for k in sorted(params))


def _pick(options: list, text: str):
    h = int(hashlib.sha256(text.encode()).hexdigest()[:8], 16)
    return options[h % len(options)]


def _between(text: str, start: str, end: str | None) -> str:
    i = text.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = text.find(end, i) if end else -1
    return text[i:] if j < 0 else text[i:j]


class SyntheticWorld:
    """Base class; subclasses define the graph, actions and qualities."""

    task_kind = "math"

    def agents(self) -> list[str]:
        raise NotImplementedError

    def graph(self) -> CommGraph:
        raise NotImplementedError

    def initial_params(self, agent: str) -> dict[str, int]:
        raise NotImplementedError

    def act(self, agent: str, params: Mapping[str, int], upstream: str) -> str:
        raise NotImplementedError

    def block_quality(self, markers: Mapping[str, Mapping[str, int]]) -> float:
        raise NotImplementedError

    def propose(self, agent: str, params: Mapping[str, int], request_text: str) -> dict[str, int]:
        raise NotImplementedError

    # -- prompts ----------------------------------------------------------

    def prompt(self, agent: str, params: Mapping[str, int]) -> str:
        return (
            f"[[{agent}|{_encode(params)}]] Work as agent {agent} using strategy {_encode(params)}.\n"
            "{context}\n"
            "Question: {question}\n"
            "Answer:"
        )

    @staticmethod
    def parse_prompt(text: str) -> tuple[str, dict[str, int]]:
        m = _PROMPT_TAG.search(text)
        if m is None:
            raise ValueError(f"no world tag in prompt {text[:60]!r}")
        return m.group(1), _params(m.group(2))

    def initial_prompts(self) -> PromptConfig:
        return PromptConfig({a: self.prompt(a, self.initial_params(a)) for a in self.agents()})

    def pool(self, n: int = 20) -> list[QuerySample]:
        return [QuerySample(f"q{i:03d}", f"Synthetic task number {i}.") for i in range(n)]

    def profiles(self) -> list[BackendProfile]:
        return [
            BackendProfile(name, kind="synthetic", model=f"world-{name}", handler="(in-process)")
            for name in ("agent", "optimizer", "evaluator")
        ]

    def handlers(self) -> dict:
        return {"agent": self, "optimizer": self, "evaluator": self}

    # -- dispatch -----------------------------------------------------------

    @staticmethod
    def markers(text: str) -> dict[str, dict[str, int]]:
        return {m.group(1): _params(m.group(2)) for m in _OUTPUT_TAG.finditer(text)}

    def __call__(self, request: ChatRequest) -> str:
        text = request.text
        if OPTIMIZER_MARK in text:
            return self._optimize(text)
        if "Output A:" in text and "Output B:" in text:
            a = _between(text, "Output A:", "Output B:")
            b = _between(text, "Output B:", "Which output")
            return self._judge(a, b)
        if "Answer A:" in text and "Answer B:" in text:
            a = _between(text, "Answer A:", "Answer B:")
            b = _between(text, "Answer B:", "Respond with only")
            return self._judge(a, b)
        agent, params = self.parse_prompt(text)
        upstream = _between(text, "]]", "Question:")
        return self.act(agent, params, upstream)

    def _judge(self, a: str, b: str) -> str:
        # ties favor the reference
        return "B" if self.block_quality(self.markers(b)) > self.block_quality(self.markers(a)) else "A"

    def _optimize(self, text: str) -> str:
        reference = _between(text, "Reference prompt:", "Provide your analysis")
        agent, params = self.parse_prompt(reference)
        new = self.propose(agent, params, text)
        return (
            "<analyse>Scripted analysis.</analyse>\n"
            f"<modification>Switch to strategy {_encode(new)}.</modification>\n"
            f"<prompt>{self.prompt(agent, new)}</prompt>"
        )

    # -- oracle ---------------------------------------------------------------

    def final_output(self, config: Mapping[str, Mapping[str, int]]) -> str:
        g = self.graph()
        outputs: dict[str, str] = {}
        for a in g.order():
            upstream = "\n".join(outputs[p] for p in g.neighbors(a, "in"))
            outputs[a] = self.act(a, config[a], upstream)
        return outputs[g.output_agent]

    def config_quality(self, prompts: Mapping[str, str]) -> float:
        config = {a: self.parse_prompt(p)[1] for a, p in prompts.items()}
        return self.block_quality(self.markers(self.final_output(config)))


class ChainWorld(SyntheticWorld):
    """Two-agent chain ``a1 -> a2`` with eight scripted prompts per agent.

    Version ``v`` of agent ``a`` has hidden quality ``qualities[a][v]``; a
    final answer is worth the sum over the agents that shaped it.
    """

    DEFAULT_QUALITIES = {
        "a1": (0.10, 0.45, 0.30, 0.20, 0.95, 0.60, 0.50, 0.70),
        "a2": (0.20, 0.35, 0.80, 0.10, 0.50, 0.40, 0.90, 0.65),
    }

    def __init__(self, qualities: Mapping[str, tuple[float, ...]] | None = None, policy: str = "better"):
        if policy not in ("better", "ladder"):
            raise ValueError(f"unknown policy {policy!r}")
        self.qualities = {a: tuple(q) for a, q in (qualities or self.DEFAULT_QUALITIES).items()}
        self.policy = policy

    def agents(self) -> list[str]:
        return ["a1", "a2"]

    def graph(self) -> CommGraph:
        return CommGraph(
            [
                AgentSpec("a1", role_label="Drafter", role_description="Drafts a solution.", task_kind=self.task_kind),
                AgentSpec("a2", role_label="Finisher", role_description="Finalizes the answer.", task_kind=self.task_kind),
            ],
            [("a1", "a2")],
            "a2",
        )

    def initial_params(self, agent: str) -> dict[str, int]:
        return {"v": 0}

    def act(self, agent: str, params: Mapping[str, int], upstream: str) -> str:
        carried = " ".join(f"[{a} {_encode(p)}]" for a, p in self.markers(upstream).items())
        own = f"[{agent} {_encode(params)}]"
        return f"{carried} {own}".strip() + " <answer>0</answer>"

    def block_quality(self, markers) -> float:
        return sum(self.qualities[a][p["v"]] for a, p in markers.items() if a in self.qualities)

    def propose(self, agent, params, request_text):
        """Some strictly better version, or the parent itself when it is already best.

        ``"ladder"`` always steps to the next better version, which keeps every
        lineage's cumulative score equal to its quality rank.
        """
        q = self.qualities[agent]
        v = params["v"]
        better = sorted((u for u in range(len(q)) if q[u] > q[v]), key=lambda u: (q[u], u))
        if not better:
            return dict(params)
        if self.policy == "ladder":
            return {"v": better[0]}
        return {"v": _pick(better, request_text)}

    def all_prompts(self, agent: str) -> list[str]:
        return [self.prompt(agent, {"v": v}) for v in range(len(self.qualities[agent]))]

    def exhaustive_optimum(self) -> PromptConfig:
        """Best prompt pair by brute force over every configuration."""
        best, best_q = None, float("-inf")
        for combo in itertools.product(*(range(len(self.qualities[a])) for a in self.agents())):
            prompts = {a: self.prompt(a, {"v": v}) for a, v in zip(self.agents(), combo)}
            q = self.config_quality(prompts)
            if q > best_q:
                best, best_q = prompts, q
        return PromptConfig(best)


class CoordinationWorld(SyntheticWorld):
    """Chain ``a1 -> a2`` where a1 can trade coordination for local polish.

    a1's prompt has a polish level ``p`` and a coordination level ``c``.
    The judge rates a1's own output by ``p + c`` but the final answer only
    by ``c`` and a2's level ``q``. Left alone, the scripted optimizer raises
    ``p`` only, which wins locally and leaves the final answer untouched: a
    misalignment case. When a trace is flagged with the misalignment note,
    or the parent already coordinates, it raises ``c`` as well.
    """

    def agents(self) -> list[str]:
        return ["a1", "a2"]

    def graph(self) -> CommGraph:
        return CommGraph(
            [
                AgentSpec("a1", role_label="Planner", role_description="Plans the solution.", task_kind=self.task_kind),
                AgentSpec("a2", role_label="Solver", role_description="Solves using the plan.", task_kind=self.task_kind),
            ],
            [("a1", "a2")],
            "a2",
        )

    def initial_params(self, agent: str) -> dict[str, int]:
        return {"c": 0, "p": 0} if agent == "a1" else {"q": 0}

    def act(self, agent, params, upstream):
        if agent == "a1":
            return f"[a1 {_encode(params)}] <answer>0</answer>"
        c = self.markers(upstream).get("a1", {}).get("c", 0)
        return f"[a2 c={c},q={params['q']}] <answer>0</answer>"

    def block_quality(self, markers) -> float:
        if "a2" in markers:
            m = markers["a2"]
            return m["c"] + m["q"]
        m = markers.get("a1", {"p": 0, "c": 0})
        return m["p"] + m["c"]

    def propose(self, agent, params, request_text):
        step = 1 + _pick([0, 1], request_text)
        if agent == "a2":
            return {"q": params["q"] + step}
        flagged = MISALIGNMENT_NOTE in request_text
        if flagged or params["c"] > 0:
            return {"c": params["c"] + 1, "p": params["p"] + step}
        return {"c": params["c"], "p": params["p"] + step}
