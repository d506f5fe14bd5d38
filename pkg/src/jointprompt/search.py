"""Per-agent evolutionary beam search scheduled by topological coordinate ascent.

Each epoch visits the optimizable agents in topological order. A visit
re-anchors the agent's beam against its installed prompt (from the second
epoch on) and then runs ``T`` beam rounds. Whenever a round produces a beam
entry whose cumulative score beats the anchor, that prompt is installed in
the global configuration immediately, so later agents optimize against it.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

from . import errors
from .gateway import Gateway
from .proposer import build_iteration_batch, generate_candidates
from .reward import (
    BufferEntry,
    MisalignmentBuffer,
    RewardWeights,
    classify_misalignment,
    misalignment_rate,
    score_candidate,
)
from .runtime import ExecutionTrace, QuerySample, TraceLog, execute_counterfactual, execute_full, parallel_map
from .topology import CommGraph, PromptConfig, text_digest

logger = logging.getLogger(__name__)


def derive_seed(base: int, *parts) -> int:
    blob = json.dumps([base, *parts], sort_keys=True, default=str)
    return int(hashlib.sha256(blob.encode()).hexdigest()[:16], 16)


@dataclass(frozen=True)
class Hyperparams:
    K: int = 2
    K_sub: int = 2
    K_mis: int = 3
    T: int = 3
    E: int = 3
    batch_size: int = 10
    weights: RewardWeights = field(default_factory=RewardWeights)
    pool_cap: int = 50
    buffer_capacity: int = 32
    misalignment_sampling: bool = True
    beam_refresh: bool = True
    workers: int = 1

    def __post_init__(self):
        for name in ("K", "K_sub", "K_mis", "T", "E", "batch_size", "pool_cap", "buffer_capacity", "workers"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise errors.ConfigError(f"hyperparameter {name} must be a positive integer, got {value!r}")
        if isinstance(self.weights, Mapping):
            object.__setattr__(self, "weights", RewardWeights(**self.weights))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Hyperparams":
        d = dict(d)
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise errors.ConfigError(f"unknown hyperparameters {unknown}")
        if "weights" in d:
            d["weights"] = RewardWeights(**d["weights"])
        return cls(**d)


@dataclass(frozen=True)
class BeamEntry:
    prompt_text: str
    cum_score: float
    born_epoch: int = 0
    born_round: int = 0
    parent_digest: str = ""
    # cum_score == base_score + sum(rewards); base_score is 0 or a refresh value
    base_score: float = 0.0
    rewards: tuple[float, ...] = ()

    @property
    def digest(self) -> str:
        return text_digest(self.prompt_text)

    def sort_key(self):
        return (-self.cum_score, self.born_epoch, self.born_round, self.digest)

    def to_dict(self) -> dict:
        return {
            "prompt_text": self.prompt_text,
            "cum_score": self.cum_score,
            "born_epoch": self.born_epoch,
            "born_round": self.born_round,
            "parent_digest": self.parent_digest,
            "base_score": self.base_score,
            "rewards": list(self.rewards),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BeamEntry":
        return cls(
            prompt_text=d["prompt_text"],
            cum_score=float(d["cum_score"]),
            born_epoch=int(d["born_epoch"]),
            born_round=int(d["born_round"]),
            parent_digest=d.get("parent_digest", ""),
            base_score=float(d.get("base_score", 0.0)),
            rewards=tuple(float(r) for r in d.get("rewards", ())),
        )


def select_beam(entries: Iterable[BeamEntry], k: int) -> list[BeamEntry]:
    """Top-``k`` by (score desc, age, digest); one entry per prompt text."""
    best: dict[str, BeamEntry] = {}
    for e in entries:
        cur = best.get(e.prompt_text)
        if cur is None or e.sort_key() < cur.sort_key():
            best[e.prompt_text] = e
    return sorted(best.values(), key=BeamEntry.sort_key)[:k]


@dataclass
class AgentSearchState:
    beam: list[BeamEntry]
    anchor_prompt: str
    anchor_score: float = 0.0

    def to_dict(self) -> dict:
        return {
            "beam": [e.to_dict() for e in self.beam],
            "anchor_prompt": self.anchor_prompt,
            "anchor_score": self.anchor_score,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AgentSearchState":
        return cls([BeamEntry.from_dict(e) for e in d["beam"]], d["anchor_prompt"], float(d["anchor_score"]))


@dataclass
class OptimizerRunState:
    graph: CommGraph
    prompt_config: PromptConfig
    per_agent: dict[str, AgentSearchState]
    buffer: MisalignmentBuffer
    hyperparams: Hyperparams
    rng_seed: int = 0
    # progress cursor; resume happens at round granularity
    epoch: int = 0
    agent_index: int = 0
    rounds_done: int = 0
    refreshed: bool = False
    finished: bool = False

    @classmethod
    def initial(cls, graph: CommGraph, prompts: PromptConfig, hyperparams: Hyperparams | None = None,
                rng_seed: int = 0) -> "OptimizerRunState":
        graph.order()
        prompts.validate(graph)
        hp = hyperparams or Hyperparams()
        per_agent = {
            a: AgentSearchState([BeamEntry(prompts[a], 0.0)], prompts[a], 0.0)
            for a in graph.optimizable_order()
        }
        return cls(graph, prompts, per_agent, MisalignmentBuffer(hp.buffer_capacity), hp, rng_seed)

    def to_dict(self) -> dict:
        return {
            "graph": self.graph.to_dict(),
            "prompt_config": self.prompt_config.to_dict(),
            "per_agent": {a: s.to_dict() for a, s in sorted(self.per_agent.items())},
            "buffer": self.buffer.to_dict(),
            "hyperparams": self.hyperparams.to_dict(),
            "rng_seed": self.rng_seed,
            "cursor": {
                "epoch": self.epoch,
                "agent_index": self.agent_index,
                "rounds_done": self.rounds_done,
                "refreshed": self.refreshed,
                "finished": self.finished,
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimizerRunState":
        cur = d["cursor"]
        graph = CommGraph.from_dict(d["graph"])
        graph.order()
        return cls(
            graph=graph,
            prompt_config=PromptConfig(d["prompt_config"]),
            per_agent={a: AgentSearchState.from_dict(s) for a, s in d["per_agent"].items()},
            buffer=MisalignmentBuffer.from_dict(d["buffer"]),
            hyperparams=Hyperparams.from_dict(d["hyperparams"]),
            rng_seed=int(d["rng_seed"]),
            epoch=int(cur["epoch"]),
            agent_index=int(cur["agent_index"]),
            rounds_done=int(cur["rounds_done"]),
            refreshed=bool(cur["refreshed"]),
            finished=bool(cur["finished"]),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, OptimizerRunState) and self.to_dict() == other.to_dict()


def _short(digest: str) -> str:
    return digest[:12]


class Optimizer:
    """Drives :class:`OptimizerRunState` forward against a gateway.

    ``on_step`` is called with the state after every refresh and every
    round, which is where callers persist checkpoints. Records are appended
    to ``self.records`` and passed to ``record_sink`` when given.
    """

    def __init__(
        self,
        state: OptimizerRunState,
        pool: Sequence[QuerySample],
        gateway: Gateway,
        *,
        optimizer_profile: str = "optimizer",
        eval_profile: str = "evaluator",
        record_sink: Callable[[dict], None] | None = None,
        trace_log: TraceLog | None = None,
        on_step: Callable[[OptimizerRunState], None] | None = None,
        template_dir=None,
    ):
        if not pool:
            raise errors.EmptyPool("optimization needs a non-empty sample pool")
        self.state = state
        self.pool = list(pool)[: state.hyperparams.pool_cap]
        self.by_id = {s.id: s for s in self.pool}
        self.gateway = gateway
        self.optimizer_profile = optimizer_profile
        self.eval_profile = eval_profile
        self.record_sink = record_sink
        self.trace_log = trace_log
        self.on_step = on_step
        self.template_dir = template_dir
        self.records: list[dict] = []
        self._traces: dict[tuple[str, str], ExecutionTrace] = {}

    # -- traces ---------------------------------------------------------------

    def _emit(self, record: dict) -> None:
        self.records.append(record)
        if self.record_sink is not None:
            self.record_sink(record)

    def _remember(self, trace: ExecutionTrace) -> None:
        key = (trace.prompt_fingerprint, trace.query_id)
        if key not in self._traces:
            self._traces[key] = trace
            if self.trace_log is not None:
                self.trace_log.append(trace)

    def base_traces(self, samples: Sequence[QuerySample]) -> tuple[dict[str, ExecutionTrace], list[str]]:
        """Traces under the current global prompts; failed samples are returned as gaps."""
        prompts = self.state.prompt_config
        graph = self.state.graph

        def one(sample):
            hit = self._traces.get((prompts.fingerprint, sample.id))
            if hit is not None:
                return sample.id, hit
            try:
                return sample.id, execute_full(graph, prompts, sample, self.gateway)
            except errors.GatewayError as exc:
                logger.warning("gap: sample %s could not be executed: %s", sample.id, exc)
                return sample.id, None

        out, gaps = {}, []
        for qid, trace in parallel_map(one, list(samples), self.state.hyperparams.workers):
            if trace is None:
                gaps.append(qid)
            else:
                self._remember(trace)
                out[qid] = trace
        return out, gaps

    def traces_with(self, agent: str, prompt: str, samples: Sequence[QuerySample],
                    base: Mapping[str, ExecutionTrace]) -> dict[str, ExecutionTrace]:
        """Traces with ``prompt`` installed at ``agent``, derived from ``base``."""
        prompts = self.state.prompt_config
        target = prompts.with_prompt(agent, prompt)
        graph = self.state.graph

        def one(sample):
            hit = self._traces.get((target.fingerprint, sample.id))
            if hit is not None:
                return sample.id, hit
            try:
                tr = execute_counterfactual(base[sample.id], graph, prompts, agent, prompt, sample, self.gateway)
            except errors.GatewayError as exc:
                logger.warning("gap: sample %s could not be re-executed: %s", sample.id, exc)
                return sample.id, None
            return sample.id, tr

        out = {}
        for qid, trace in parallel_map(one, list(samples), self.state.hyperparams.workers):
            if trace is not None:
                self._remember(trace)
                out[qid] = trace
        return out

    def _install(self, agent: str, entry: BeamEntry) -> bool:
        st = self.state.per_agent[agent]
        changed = st.anchor_prompt != entry.prompt_text
        st.anchor_prompt = entry.prompt_text
        st.anchor_score = entry.cum_score
        self.state.prompt_config = self.state.prompt_config.with_prompt(agent, entry.prompt_text)
        return changed

    # -- one round ---------------------------------------------------------------

    def beam_round(self, agent: str) -> dict:
        state, hp = self.state, self.state.hyperparams
        st = state.per_agent[agent]
        spec = state.graph.agent(agent)
        epoch, t = state.epoch, state.rounds_done + 1
        calls_before = self.gateway.total_backend_calls()

        k_mis = hp.K_mis if hp.misalignment_sampling else 0
        batch = build_iteration_batch(self.pool, state.buffer, agent, hp.batch_size, k_mis,
                                      derive_seed(state.rng_seed, "batch", epoch, agent, t))
        samples = [self.by_id[i] for i in batch.sample_ids]
        base, gaps = self.base_traces(samples)
        samples = [s for s in samples if s.id in base]
        questions = {s.id: s.question for s in samples}
        misaligned = frozenset(batch.misalignment_ids)

        candidates: list[BeamEntry] = []
        cand_reports: list[dict] = []
        indicators = []
        for parent in list(st.beam):
            parent_traces = self.traces_with(agent, parent.prompt_text, samples, base)
            usable = [s for s in samples if s.id in parent_traces]
            try:
                proposals = generate_candidates(
                    parent.prompt_text,
                    [parent_traces[s.id] for s in usable],
                    spec,
                    spec.task_kind,
                    hp.K_sub,
                    self.gateway,
                    self.optimizer_profile,
                    derive_seed(state.rng_seed, "partition", epoch, agent, t, parent.digest),
                    questions=questions,
                    misaligned=misaligned,
                    nonce_salt=f"{state.rng_seed}|{epoch}|{agent}|{t}",
                    template_dir=self.template_dir,
                )
            except (errors.AllProposalsInvalid, errors.TooFewTraces) as exc:
                logger.info("round %d/%s/%d: parent %s yielded no candidates: %s",
                               epoch, agent, t, _short(parent.digest), exc)
                continue
            for prop in proposals:
                try:
                    res = score_candidate(
                        state.graph, state.prompt_config, agent, prop.prompt_text, parent.prompt_text,
                        usable, parent_traces, hp.weights, self.gateway,
                        eval_profile=self.eval_profile, workers=hp.workers, skip_errors=True,
                        template_dir=self.template_dir,
                    )
                except errors.EmptyBatch as exc:
                    logger.warning("dropping candidate %s: %s", _short(text_digest(prop.prompt_text)), exc)
                    continue
                for tr in res.traces.values():
                    self._remember(tr)
                indicators.extend(res.per_sample)
                for ind in res.per_sample:
                    if classify_misalignment(ind):
                        state.buffer.push(BufferEntry(ind.query_id, agent, epoch, ind))
                entry = BeamEntry(
                    prompt_text=prop.prompt_text,
                    cum_score=parent.cum_score + res.reward,
                    born_epoch=epoch,
                    born_round=t,
                    parent_digest=parent.digest,
                    base_score=parent.base_score,
                    rewards=parent.rewards + (res.reward,),
                )
                candidates.append(entry)
                cand_reports.append({
                    "prompt_digest": entry.digest,
                    "parent_digest": parent.digest,
                    "reward": res.reward,
                    "cum_score": entry.cum_score,
                    "n_samples": len(res.per_sample),
                    "skipped": res.skipped,
                    "modification": prop.modification,
                })

        st.beam = select_beam(st.beam + candidates, hp.K)
        changed = False
        if st.beam and st.beam[0].cum_score > st.anchor_score:
            changed = self._install(agent, st.beam[0])

        record = {
            "type": "round",
            "epoch": epoch,
            "agent": agent,
            "round": t,
            "depth": (epoch - 1) * hp.T + t,
            "batch_ids": list(batch.sample_ids),
            "misalignment_ids": list(batch.misalignment_ids),
            "gaps": gaps,
            "candidates": cand_reports,
            "dropped": not candidates,
            "beam": [
                {"prompt_digest": e.digest, "cum_score": e.cum_score,
                 "born_epoch": e.born_epoch, "born_round": e.born_round}
                for e in st.beam
            ],
            "anchor_digest": text_digest(st.anchor_prompt),
            "anchor_prompt": st.anchor_prompt,
            "anchor_score": st.anchor_score,
            "anchor_changed": changed,
            "misalignment_rate": misalignment_rate(indicators) if indicators else None,
            "n_indicators": len(indicators),
            "calls": self.gateway.total_backend_calls() - calls_before,
        }
        self._emit(record)
        return record

    # -- refresh -------------------------------------------------------------------

    def refresh_beam(self, agent: str) -> dict:
        state, hp = self.state, self.state.hyperparams
        st = state.per_agent[agent]
        if not st.beam:
            raise errors.EmptyBeam(f"agent {agent} has an empty beam")
        epoch = state.epoch
        calls_before = self.gateway.total_backend_calls()
        pre_top = st.beam[0].digest

        batch = build_iteration_batch(self.pool, None, agent, hp.batch_size, 0,
                                      derive_seed(state.rng_seed, "refresh", epoch, agent))
        samples = [self.by_id[i] for i in batch.sample_ids]
        base, gaps = self.base_traces(samples)
        samples = [s for s in samples if s.id in base]

        refreshed, scores = [], []
        for entry in st.beam:
            try:
                res = score_candidate(
                    state.graph, state.prompt_config, agent, entry.prompt_text, st.anchor_prompt,
                    samples, base, hp.weights, self.gateway,
                    eval_profile=self.eval_profile, workers=hp.workers, skip_errors=True,
                    template_dir=self.template_dir,
                )
                value = res.reward - 0.5
                for tr in res.traces.values():
                    self._remember(tr)
            except errors.EmptyBatch as exc:
                logger.warning("refresh of %s failed on every sample: %s", _short(entry.digest), exc)
                value = -0.5
            refreshed.append(replace(entry, cum_score=value, base_score=value, rewards=()))
            scores.append({"prompt_digest": entry.digest, "score": value})

        st.beam = select_beam(refreshed, hp.K)
        changed = False
        if st.beam[0].cum_score > 0:
            changed = self._install(agent, st.beam[0])
        else:
            st.anchor_score = 0.0

        record = {
            "type": "refresh",
            "epoch": epoch,
            "agent": agent,
            "batch_ids": [s.id for s in samples],
            "gaps": gaps,
            "scores": scores,
            "pre_top_digest": pre_top,
            "post_top_digest": st.beam[0].digest,
            "anchor_digest": text_digest(st.anchor_prompt),
            "anchor_prompt": st.anchor_prompt,
            "anchor_changed": changed,
            "calls": self.gateway.total_backend_calls() - calls_before,
        }
        self._emit(record)
        return record

    # -- schedule --------------------------------------------------------------------

    def run(self, max_steps: int | None = None) -> OptimizerRunState:
        """Advance until finished, or for at most ``max_steps`` refreshes+rounds."""
        state, hp = self.state, self.state.hyperparams
        order = state.graph.optimizable_order()
        if not order:
            state.finished = True
        steps = 0

        def step_done() -> bool:
            nonlocal steps
            steps += 1
            if self.on_step is not None:
                self.on_step(state)
            return max_steps is not None and steps >= max_steps

        while not state.finished:
            if state.epoch == 0:
                state.epoch, state.agent_index, state.rounds_done, state.refreshed = 1, 0, 0, False
            agent = order[state.agent_index]
            if state.epoch > 1 and hp.beam_refresh and not state.refreshed:
                self.refresh_beam(agent)
                state.refreshed = True
                if step_done():
                    return state
            if state.rounds_done < hp.T:
                self.beam_round(agent)
                state.rounds_done += 1
                if state.rounds_done < hp.T and step_done():
                    return state
                if state.rounds_done < hp.T:
                    continue
            # visit complete: advance the cursor before reporting the step
            state.agent_index += 1
            state.rounds_done, state.refreshed = 0, False
            if state.agent_index == len(order):
                state.agent_index = 0
                if state.epoch == hp.E:
                    state.finished = True
                else:
                    state.epoch += 1
            if step_done():
                return state
        return state


def run(state: OptimizerRunState, pool: Sequence[QuerySample], gateway: Gateway, **kwargs):
    """Run the whole schedule; returns ``(final_state, records)``."""
    opt = Optimizer(state, pool, gateway, **kwargs)
    opt.run()
    return opt.state, opt.records
