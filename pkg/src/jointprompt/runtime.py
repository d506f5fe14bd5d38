"""Execute an agent graph on a query and record the full trace."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence, TypeVar

from . import errors
from .gateway import ChatRequest, Gateway, Message
from .templates import DEFAULT_REQUIREMENTS, placeholders, render
from .topology import CommGraph, PromptConfig, text_digest

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class QuerySample:
    id: str
    question: str
    requirement: str = ""
    label: str | None = None

    def __post_init__(self):
        if not self.id:
            raise errors.InvalidSample("sample id must be non-empty")
        if not self.question or not self.question.strip():
            raise errors.InvalidSample(f"sample {self.id!r} has an empty question")

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuerySample":
        label = d.get("label")
        return cls(
            id=str(d["id"]),
            question=d.get("question", ""),
            requirement=d.get("requirement", "") or "",
            label=None if label is None else str(label),
        )

    def to_dict(self) -> dict:
        d = {"id": self.id, "question": self.question, "requirement": self.requirement}
        if self.label is not None:
            d["label"] = self.label
        return d


def load_pool(path, limit: int | None = None) -> list[QuerySample]:
    """Read a JSONL file of samples; ids must be unique."""
    samples: list[QuerySample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            s = QuerySample.from_dict(json.loads(line))
            if s.id in seen:
                raise errors.InvalidSample(f"{path}:{lineno}: duplicate sample id {s.id!r}")
            seen.add(s.id)
            samples.append(s)
            if limit is not None and len(samples) >= limit:
                break
    return samples


@dataclass(frozen=True)
class AgentRecord:
    context: str
    output: str
    prompt_digest: str


@dataclass(frozen=True)
class ExecutionTrace:
    query_id: str
    records: Mapping[str, AgentRecord]
    final_output: str
    calls: int
    prompt_fingerprint: str

    def outputs(self) -> dict[str, str]:
        return {a: r.output for a, r in self.records.items()}

    def to_dict(self) -> dict:
        return {
            "calls": self.calls,
            "final_output": self.final_output,
            "prompt_fingerprint": self.prompt_fingerprint,
            "query_id": self.query_id,
            "records": {
                a: {"context": r.context, "output": r.output, "prompt_digest": r.prompt_digest}
                for a, r in sorted(self.records.items())
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExecutionTrace":
        return cls(
            query_id=d["query_id"],
            records={a: AgentRecord(**r) for a, r in d["records"].items()},
            final_output=d["final_output"],
            calls=int(d["calls"]),
            prompt_fingerprint=d["prompt_fingerprint"],
        )


class TraceLog:
    """Append-only JSONL sink of traces, one canonical object per line."""

    def __init__(self, path):
        self.path = path

    def append(self, trace: ExecutionTrace, **extra) -> None:
        obj = trace.to_dict()
        obj.update(extra)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def aggregate_context(graph: CommGraph, agent: str, outputs: Mapping[str, str]) -> str:
    """Concatenate predecessor outputs in topological order, one block each."""
    blocks = []
    for pred in graph.neighbors(agent, "in"):
        if pred not in outputs:
            raise errors.MissingPredecessorOutput(f"{agent!r} needs the output of {pred!r}")
        label = graph.agent(pred).role_label
        blocks.append(f"### Output from {label}:\n{outputs[pred]}\n")
    return "\n".join(blocks)


def split_template(template: str) -> tuple[str, str]:
    """Split a template at its first line holding a placeholder.

    Lines before it form the system part, the rest the user part.
    """
    lines = template.split("\n")
    for i, line in enumerate(lines):
        if placeholders(line):
            return "\n".join(lines[:i]).strip("\n"), "\n".join(lines[i:])
    return "", template


def build_agent_request(
    template: str,
    question: str,
    context: str,
    requirement: str,
    *,
    model: str,
    temperature: float,
    max_tokens: int,
) -> ChatRequest:
    values = {"question": question, "context": context, "requirement": requirement}
    system_part, user_part = split_template(template)
    messages = []
    if system_part.strip():
        messages.append(Message("system", render(system_part, values)))
    messages.append(Message("user", render(user_part, values)))
    return ChatRequest(tuple(messages), model=model, temperature=temperature, max_tokens=max_tokens)


def requirement_for(sample: QuerySample, task_kind: str) -> str:
    return sample.requirement or DEFAULT_REQUIREMENTS[task_kind]


def _run_agent(graph, prompts, agent_id, sample, outputs, gateway: Gateway) -> AgentRecord:
    spec = graph.agent(agent_id)
    context = aggregate_context(graph, agent_id, outputs)
    profile = gateway.profile(spec.backend_ref)
    request = build_agent_request(
        prompts[agent_id],
        sample.question,
        context,
        requirement_for(sample, spec.task_kind),
        model=profile.model,
        temperature=spec.temperature,
        max_tokens=spec.max_tokens,
    )
    try:
        output = gateway.complete(profile, request)
    except errors.GatewayError as exc:
        raise exc.annotate(agent_id=agent_id, query_id=sample.id)
    return AgentRecord(context=context, output=output, prompt_digest=text_digest(prompts[agent_id]))


def execute_full(graph: CommGraph, prompts: PromptConfig, sample: QuerySample, gateway: Gateway) -> ExecutionTrace:
    """Run every agent in topological order on ``sample``."""
    records: dict[str, AgentRecord] = {}
    outputs: dict[str, str] = {}
    for agent_id in graph.order():
        rec = _run_agent(graph, prompts, agent_id, sample, outputs, gateway)
        records[agent_id] = rec
        outputs[agent_id] = rec.output
    return ExecutionTrace(
        query_id=sample.id,
        records=records,
        final_output=outputs[graph.output_agent],
        calls=len(records),
        prompt_fingerprint=prompts.fingerprint,
    )


def execute_counterfactual(
    base: ExecutionTrace,
    graph: CommGraph,
    prompts: PromptConfig,
    agent: str,
    candidate_prompt: str,
    sample: QuerySample,
    gateway: Gateway,
) -> ExecutionTrace:
    """Re-run ``agent`` with ``candidate_prompt`` and everything downstream of it.

    Upstream records are copied from ``base``; they must have been produced
    with the same upstream prompts as ``prompts``.
    """
    if base.query_id != sample.id:
        raise errors.StaleBaseTrace(f"base trace is for {base.query_id!r}, not {sample.id!r}")
    closure = graph.downstream_closure(agent)
    closure_set = set(closure)
    for a in graph.order():
        if a in closure_set:
            continue
        rec = base.records.get(a)
        if rec is None or rec.prompt_digest != text_digest(prompts[a]):
            raise errors.StaleBaseTrace(f"base record for upstream agent {a!r} used a different prompt")

    cand_prompts = prompts.with_prompt(agent, candidate_prompt)
    base_rec = base.records.get(agent)
    if base_rec is not None and base_rec.prompt_digest == text_digest(candidate_prompt):
        # Identical prompt on identical inputs: temperature-0 agents reproduce base.
        if all(base.records[a].prompt_digest == text_digest(cand_prompts[a]) for a in closure):
            return ExecutionTrace(base.query_id, dict(base.records), base.final_output, 0, cand_prompts.fingerprint)

    records = dict(base.records)
    outputs = {a: r.output for a, r in records.items() if a not in closure_set}
    for a in closure:
        rec = _run_agent(graph, cand_prompts, a, sample, outputs, gateway)
        records[a] = rec
        outputs[a] = rec.output
    return ExecutionTrace(
        query_id=sample.id,
        records={a: records[a] for a in graph.order()},
        final_output=outputs[graph.output_agent],
        calls=len(closure),
        prompt_fingerprint=cand_prompts.fingerprint,
    )


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """Order-preserving map; sequential when ``workers <= 1``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
