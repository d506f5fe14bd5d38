"""Pairwise judging, the three-granularity joint reward, and misalignment mining."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import errors
from .gateway import ChatRequest, Gateway, Message
from .runtime import ExecutionTrace, QuerySample, execute_counterfactual, parallel_map, requirement_for
from .templates import judge_template, render
from .topology import CommGraph, PromptConfig

logger = logging.getLogger(__name__)

TIE = 0.5


@dataclass(frozen=True)
class RewardWeights:
    """Weights of local validity, lookahead potential, and global alignment.

    Normalized to sum to one on construction.
    """

    alpha: float = 0.4
    beta: float = 0.4
    theta: float = 0.2

    def __post_init__(self):
        ws = (self.alpha, self.beta, self.theta)
        if any(w < 0 for w in ws):
            raise errors.ConfigError(f"reward weights must be non-negative, got {ws}")
        total = sum(ws)
        if total <= 0:
            raise errors.ConfigError("reward weights must not all be zero")
        object.__setattr__(self, "alpha", self.alpha / total)
        object.__setattr__(self, "beta", self.beta / total)
        object.__setattr__(self, "theta", self.theta / total)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "theta": self.theta}


@dataclass(frozen=True)
class SampleIndicators:
    query_id: str
    local: float
    lookahead: Mapping[str, float]
    global_: float

    def __post_init__(self):
        for v in (self.local, self.global_, *self.lookahead.values()):
            if v not in (0, TIE, 1):
                raise ValueError(f"indicator values must be 0, 0.5 or 1, got {v}")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "local": self.local,
            "lookahead": dict(sorted(self.lookahead.items())),
            "global": self.global_,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SampleIndicators":
        return cls(d["query_id"], d["local"], dict(d["lookahead"]), d["global"])


def sample_value(ind: SampleIndicators, weights: RewardWeights) -> float:
    """Weighted per-sample score. Terminal agents fold beta into alpha."""
    if ind.lookahead:
        look = sum(ind.lookahead.values()) / len(ind.lookahead)
        return weights.alpha * ind.local + weights.beta * look + weights.theta * ind.global_
    return (weights.alpha + weights.beta) * ind.local + weights.theta * ind.global_


def joint_reward(per_sample: Sequence[SampleIndicators], weights: RewardWeights) -> float:
    if not per_sample:
        raise errors.EmptyBatch("no samples to average")
    return sum(sample_value(ind, weights) for ind in per_sample) / len(per_sample)


def classify_misalignment(ind: SampleIndicators) -> bool:
    """Locally preferred, but successors or the final answer did not improve."""
    lookahead_flag = all(v == 1 for v in ind.lookahead.values())
    return ind.local == 1 and (not lookahead_flag or ind.global_ != 1)


def misalignment_rate(inds: Sequence[SampleIndicators]) -> float:
    if not inds:
        raise errors.EmptyBatch("misalignment rate of an empty batch")
    return sum(classify_misalignment(i) for i in inds) / len(inds)


# -- judging ------------------------------------------------------------------


def parse_verdict(text: str) -> str | None:
    """Return ``"a"``/``"b"`` from a judge reply, or None."""
    cleaned = text.strip().casefold()
    if not cleaned:
        return None
    first = cleaned.split()[0].strip("*\"'`.,:;!()[]{}<>")
    return first if first in ("a", "b") else None


def build_judge_request(kind, task_kind, question, requirement, output_ref, output_cand, *, model,
                        max_tokens=16, template_dir=None) -> ChatRequest:
    template = judge_template(kind, task_kind, template_dir)
    if kind == "global_":
        values = {"question": question, "requirement": requirement, "Answer_A": output_ref, "Answer_B": output_cand}
    else:
        values = {"question": question, "output_a": output_ref, "output_b": output_cand}
    text = render(template, values)
    return ChatRequest((Message("user", text),), model=model, temperature=0.0, max_tokens=max_tokens)


def judge_pair(kind, task_kind, question, requirement, output_ref, output_cand, gateway: Gateway,
               eval_profile, *, template_dir=None) -> float:
    """1 if the judge prefers the candidate (B), 0 if the reference (A).

    Byte-identical outputs score 0.5 without a call.
    """
    if kind not in ("intermediate", "global_"):
        raise ValueError(f"unknown judgment kind {kind!r}")
    if not question:
        raise errors.InvalidSample("judge needs a non-empty question")
    if output_ref == output_cand:
        return TIE
    prof = gateway.profile(eval_profile)
    if prof.temperature not in (None, 0, 0.0):
        raise errors.ConfigError(f"evaluator profile {prof.name} must run at temperature 0")
    request = build_judge_request(
        kind, task_kind, question, requirement, output_ref, output_cand,
        model=prof.model, template_dir=template_dir,
    )
    reply = gateway.complete(prof, request)
    verdict = parse_verdict(reply)
    if verdict is None:
        reply = gateway.complete(prof, request, use_cache=False)
        verdict = parse_verdict(reply)
    if verdict is None:
        raise errors.JudgeUnparseable(f"judge reply not A/B: {reply[:80]!r}")
    return 1.0 if verdict == "b" else 0.0


# -- candidate scoring ---------------------------------------------------------------


@dataclass
class ScoreResult:
    reward: float
    per_sample: list[SampleIndicators]
    traces: dict[str, ExecutionTrace] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)


def _indicators(graph, agent, sample, base, cand, gateway, eval_profile, template_dir) -> SampleIndicators:
    spec = graph.agent(agent)
    q = sample.question

    def judge(kind, who, ref, new):
        task_kind = graph.agent(who).task_kind
        req = requirement_for(sample, task_kind)
        return judge_pair(kind, task_kind, q, req, ref, new, gateway, eval_profile, template_dir=template_dir)

    local = judge("intermediate", agent, base.records[agent].output, cand.records[agent].output)
    if agent == graph.output_agent:
        return SampleIndicators(sample.id, local, {}, local)
    lookahead = {
        j: judge("intermediate", j, base.records[j].output, cand.records[j].output)
        for j in graph.neighbors(agent, "out")
    }
    glob = judge("global_", graph.output_agent, base.final_output, cand.final_output)
    return SampleIndicators(sample.id, local, lookahead, glob)


def score_candidate(
    graph: CommGraph,
    prompts: PromptConfig,
    agent: str,
    candidate_prompt: str,
    reference_prompt: str,
    batch: Sequence[QuerySample],
    base_traces: Mapping[str, ExecutionTrace],
    weights: RewardWeights,
    gateway: Gateway,
    *,
    eval_profile="evaluator",
    workers: int = 1,
    skip_errors: bool = False,
    template_dir=None,
) -> ScoreResult:
    """Mean joint reward of ``candidate_prompt`` against ``reference_prompt``.

    ``base_traces`` must come from ``prompts`` with ``reference_prompt``
    installed at ``agent``. With ``skip_errors`` a sample whose judging or
    execution fails is left out of the average (and listed in ``skipped``)
    instead of aborting.
    """
    if not batch:
        raise errors.EmptyBatch("score_candidate needs at least one sample")
    ref_prompts = prompts.with_prompt(agent, reference_prompt)
    for s in batch:
        base = base_traces.get(s.id)
        if base is None:
            raise errors.StaleBaseTrace(f"no base trace for sample {s.id!r}")
        if base.prompt_fingerprint != ref_prompts.fingerprint:
            raise errors.StaleBaseTrace(f"base trace for {s.id!r} was produced with other prompts")

    def one(sample: QuerySample):
        base = base_traces[sample.id]
        try:
            cand = execute_counterfactual(base, graph, ref_prompts, agent, candidate_prompt, sample, gateway)
            ind = _indicators(graph, agent, sample, base, cand, gateway, eval_profile, template_dir)
        except (errors.GatewayError, errors.JudgeUnparseable) as exc:
            if not skip_errors:
                raise
            logger.warning("skipping sample %s while scoring %s: %s", sample.id, agent, exc)
            return sample.id, None, None
        return sample.id, cand, ind

    results = parallel_map(one, list(batch), workers)
    per_sample = [ind for _, _, ind in results if ind is not None]
    skipped = [qid for qid, _, ind in results if ind is None]
    traces = {qid: cand for qid, cand, _ in results if cand is not None}
    if not per_sample:
        raise errors.EmptyBatch(f"every sample failed while scoring a candidate for {agent}")
    return ScoreResult(joint_reward(per_sample, weights), per_sample, traces, skipped)


# -- misalignment buffer ------------------------------------------------------------


@dataclass(frozen=True)
class BufferEntry:
    query_id: str
    agent_id: str
    epoch_seen: int
    indicators: SampleIndicators

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "agent_id": self.agent_id,
            "epoch_seen": self.epoch_seen,
            "indicators": self.indicators.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BufferEntry":
        return cls(d["query_id"], d["agent_id"], int(d["epoch_seen"]), SampleIndicators.from_dict(d["indicators"]))


class MisalignmentBuffer:
    """FIFO store of misalignment cases, unique per (agent, query).

    Re-pushing an existing pair replaces it and makes it the newest entry.
    """

    def __init__(self, capacity: int = 32, entries: Sequence[BufferEntry] = ()):
        if capacity < 1:
            raise errors.ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self._entries: OrderedDict[tuple[str, str], BufferEntry] = OrderedDict()
        for e in entries:
            self.push(e)

    @property
    def entries(self) -> list[BufferEntry]:
        return list(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, entry: BufferEntry) -> None:
        key = (entry.agent_id, entry.query_id)
        self._entries.pop(key, None)
        self._entries[key] = entry
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def newest_for(self, agent_id: str) -> list[BufferEntry]:
        return [e for e in reversed(self._entries.values()) if e.agent_id == agent_id]

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "entries": [e.to_dict() for e in self._entries.values()]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MisalignmentBuffer":
        return cls(int(d["capacity"]), [BufferEntry.from_dict(e) for e in d["entries"]])

    def __eq__(self, other) -> bool:
        return isinstance(other, MisalignmentBuffer) and self.to_dict() == other.to_dict()
