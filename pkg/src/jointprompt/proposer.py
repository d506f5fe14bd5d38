"""Trace-guided candidate generation for one agent's prompt."""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field
from typing import Sequence

from . import errors
from .gateway import ChatRequest, Gateway, Message
from .reward import MisalignmentBuffer
from .runtime import ExecutionTrace, QuerySample
from .templates import OPTIMIZER_REQUIREMENTS, optimizer_template, render
from .topology import AgentSpec, check_prompt_template, text_digest

logger = logging.getLogger(__name__)

# Appended to the sample block of traces drawn from the misalignment buffer.
MISALIGNMENT_NOTE = (
    "Note: misalignment case. This output was preferred locally but did not "
    "improve the downstream agents or the final answer."
)


@dataclass(frozen=True)
class IterationBatch:
    sample_ids: tuple[str, ...]
    misalignment_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class CandidateProposal:
    prompt_text: str
    analysis: str
    modification: str
    source_subset: int
    parent_digest: str


def build_iteration_batch(
    pool: Sequence[QuerySample],
    buffer: MisalignmentBuffer | None,
    agent: str,
    batch_size: int,
    k_mis: int,
    rng_seed: int,
) -> IterationBatch:
    """Newest buffered misalignment cases for ``agent`` first, then a random fill."""
    if not pool:
        raise errors.EmptyPool("cannot sample from an empty pool")
    if batch_size < 1:
        raise errors.ConfigError("batch_size must be >= 1")
    pool_ids = [s.id for s in pool]
    in_pool = set(pool_ids)
    size = min(batch_size, len(pool_ids))

    mis: list[str] = []
    if buffer is not None and k_mis > 0:
        for entry in buffer.newest_for(agent):
            if len(mis) >= min(k_mis, size):
                break
            if entry.query_id in in_pool and entry.query_id not in mis:
                mis.append(entry.query_id)

    taken = set(mis)
    rest = [i for i in pool_ids if i not in taken]
    fill = random.Random(rng_seed).sample(rest, size - len(mis))
    return IterationBatch(tuple(mis + fill), tuple(mis))


def partition_traces(traces: Sequence, k_sub: int, rng_seed: int) -> list[list]:
    """Shuffle, then cut into ``k_sub`` contiguous chunks whose sizes differ by at most one."""
    if k_sub < 1 or len(traces) < k_sub:
        raise errors.TooFewTraces(f"cannot split {len(traces)} traces into {k_sub} subsets")
    items = list(traces)
    random.Random(rng_seed).shuffle(items)
    q, r = divmod(len(items), k_sub)
    out, start = [], 0
    for m in range(k_sub):
        end = start + q + (1 if m < r else 0)
        out.append(items[start:end])
        start = end
    return out


def render_samples(agent_id: str, subset: Sequence[ExecutionTrace], questions: dict[str, str],
                   misaligned: frozenset[str] = frozenset()) -> str:
    blocks = []
    for i, trace in enumerate(subset, 1):
        rec = trace.records[agent_id]
        block = (
            f"### Sample {i}\n"
            f"Question: {questions.get(trace.query_id, '')}\n"
            f"Context: {rec.context if rec.context else '(none)'}\n"
            f"Agent Output: {rec.output}"
        )
        if trace.query_id in misaligned:
            block += "\n" + MISALIGNMENT_NOTE
        blocks.append(block)
    return "\n\n".join(blocks)


def render_optimizer_prompt(
    task_kind: str,
    agent: AgentSpec,
    parent_prompt: str,
    subset: Sequence[ExecutionTrace],
    *,
    questions: dict[str, str],
    misaligned: frozenset[str] = frozenset(),
    model: str = "optimizer",
    temperature: float = 0.7,
    max_tokens: int = 4096,
    nonce: str | None = None,
    template_dir=None,
) -> ChatRequest:
    if not subset:
        raise errors.TemplateRenderError("optimizer prompt needs at least one trace")
    text = render(
        optimizer_template(task_kind, template_dir),
        {
            "agent_type": agent.role_label,
            "role_description": agent.role_description,
            "samples": render_samples(agent.id, subset, questions, misaligned),
            "requirements": OPTIMIZER_REQUIREMENTS[task_kind],
            "prompt": parent_prompt,
        },
    )
    return ChatRequest((Message("user", text),), model=model, temperature=temperature,
                       max_tokens=max_tokens, nonce=nonce)


def _last_tag(text: str, tag: str) -> str | None:
    close = text.rfind(f"</{tag}>")
    if close < 0:
        return None
    open_ = text.rfind(f"<{tag}>", 0, close)
    if open_ < 0:
        return None
    return text[open_ + len(tag) + 2:close].strip()


def parse_optimizer_output(text: str) -> dict[str, str]:
    """Pull analysis, modification and prompt out of the optimizer's XML reply.

    The last complete pair of each tag wins.
    """
    prompt = _last_tag(text, "prompt")
    if prompt is None:
        raise errors.MissingPromptTag("optimizer reply has no <prompt>...</prompt> block")
    if not prompt:
        raise errors.EmptyPrompt("optimizer reply has an empty <prompt> block")
    return {
        "analysis": _last_tag(text, "analyse") or "",
        "modification": _last_tag(text, "modification") or "",
        "prompt_text": prompt,
    }


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def generate_candidates(
    parent: str,
    traces: Sequence[ExecutionTrace],
    agent: AgentSpec,
    task_kind: str,
    k_sub: int,
    gateway: Gateway,
    opt_profile,
    rng_seed: int,
    *,
    questions: dict[str, str],
    misaligned: frozenset[str] = frozenset(),
    nonce_salt: str = "",
    template_dir=None,
) -> list[CandidateProposal]:
    """One optimizer call per trace subset; invalid or no-op replies are dropped."""
    prof = gateway.profile(opt_profile)
    temperature = 0.7 if prof.temperature is None else prof.temperature
    parent_digest = text_digest(parent)
    subsets = partition_traces(traces, k_sub, rng_seed)
    proposals: list[CandidateProposal] = []
    seen = {normalize_ws(parent)}
    for m, subset in enumerate(subsets):
        nonce = text_digest(f"{nonce_salt}|{rng_seed}|{parent_digest}|{m}")[:16]
        request = render_optimizer_prompt(
            task_kind, agent, parent, subset,
            questions=questions, misaligned=misaligned, model=prof.model,
            temperature=temperature, max_tokens=prof.max_tokens, nonce=nonce,
            template_dir=template_dir,
        )
        try:
            reply = gateway.complete(prof, request)
        except errors.GatewayError as exc:
            logger.warning("optimizer call %d for %s failed: %s", m, agent.id, exc)
            continue
        try:
            parsed = parse_optimizer_output(reply)
            check_prompt_template(parsed["prompt_text"], agent.id)
        except (errors.MissingPromptTag, errors.EmptyPrompt, errors.InvalidPromptConfig) as exc:
            logger.warning("dropping proposal %d for %s: %s", m, agent.id, exc)
            continue
        key = normalize_ws(parsed["prompt_text"])
        if key in seen:
            logger.info("dropping proposal %d for %s: no-op or duplicate", m, agent.id)
            continue
        seen.add(key)
        proposals.append(CandidateProposal(source_subset=m, parent_digest=parent_digest, **parsed))
    if not proposals:
        raise errors.AllProposalsInvalid(f"no usable proposal for {agent.id} from {len(subsets)} calls")
    return proposals
