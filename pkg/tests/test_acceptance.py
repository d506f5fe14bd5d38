"""Acceptance criteria 1-9, each reported on its own PASS/FAIL line."""

import contextlib
import itertools
import json
import time

import pytest

from jointprompt.checkpoint import checkpoint_load, read_checkpoint
from jointprompt.cli import main
from jointprompt.config import load_config
from jointprompt.gateway import Gateway
from jointprompt.reporting import build_report, read_records
from jointprompt.reward import (
    RewardWeights,
    SampleIndicators,
    classify_misalignment,
    misalignment_rate,
    score_candidate,
)
from jointprompt.runtime import QuerySample, execute_full
from jointprompt.search import BeamEntry, Hyperparams, Optimizer, OptimizerRunState
from jointprompt.topology import PromptConfig
from jointprompt.worlds import ChainWorld, CoordinationWorld

from conftest import ScriptedSystem, StubChatServer, chain, diamond, tagged_prompt
from helpers import CONFIGS, world_config
from oracles import joint_reward_oracle, misaligned_oracle


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def check(number, title, budget_s=None):
        start = time.perf_counter()
        ok = False
        try:
            yield
            elapsed = time.perf_counter() - start
            if budget_s is not None:
                assert elapsed < budget_s, f"took {elapsed:.2f}s, budget {budget_s}s"
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            with capsys.disabled():
                print(f"\ncriterion {number} [{'PASS' if ok else 'FAIL'}] {title} ({elapsed:.2f}s)")

    return check


# -- 1 ---------------------------------------------------------------------------------


def bit_judge(table):
    """decide() reading each verdict from ``table[(sample, slot)]``; slot is the agent or 'global'."""

    def decide(kind, agent, versions, q):
        slot = "global" if kind == "global_" else agent
        return table[(q, slot)]

    return decide


def test_c1_reward_oracle(criterion):
    w = RewardWeights()
    with criterion(1, "joint reward equals hand-coded evaluator on every bit assignment", budget_s=1.0):
        # target A with one successor (chain) and with two successors (diamond)
        for graph, successors in ((chain("A", "B", "C"), ["B"]), (diamond(), ["B", "C"])):
            for n_samples in (1, 2):
                samples = [QuerySample(f"s{i}", f"question {i}") for i in range(n_samples)]
                slots = ["A", *successors, "global"]
                table = {}
                system = ScriptedSystem(graph, decide=bit_judge(table))
                gw = system.gateway()
                prompts = system.prompts()
                base = {s.id: execute_full(graph, prompts, s, gw) for s in samples}
                cand = tagged_prompt("A", 1)
                for bits in itertools.product([0, 1], repeat=len(slots) * n_samples):
                    rows = []
                    for i, s in enumerate(samples):
                        chunk = bits[i * len(slots):(i + 1) * len(slots)]
                        table.update({(s.question, slot): b for slot, b in zip(slots, chunk)})
                        rows.append((chunk[0], list(chunk[1:-1]), chunk[-1]))
                    res = score_candidate(graph, prompts, "A", cand, prompts["A"], samples, base, w, gw)
                    assert abs(res.reward - joint_reward_oracle(rows)) <= 1e-12, (bits, res.reward)


# -- 2 ---------------------------------------------------------------------------------


def test_c2_truth_table(criterion):
    with criterion(2, "misalignment truth table and batch rates", budget_s=1.0):
        for local, look, glob in itertools.product([0, 1], repeat=3):
            ind = SampleIndicators("q", local, {"s": look}, glob)
            assert classify_misalignment(ind) is misaligned_oracle(local, [look], glob)
        # only (1, 0, *) and (1, 1, 0) are misaligned: 3 of the 8 rows
        rows = [SampleIndicators(f"q{i}", l, {"s": k}, g)
                for i, (l, k, g) in enumerate(itertools.product([0, 1], repeat=3))]
        assert misalignment_rate(rows) == 3 / 8
        assert misalignment_rate(rows[:4]) == 0.0
        assert misalignment_rate(rows[4:]) == 3 / 4
        assert misalignment_rate([rows[4], rows[4], rows[7]]) == 2 / 3


# -- 3 ---------------------------------------------------------------------------------


LINEAGE = {
    1: (1, 1, 0),                                                       # 0.8
    2: lambda q: (1, 1, 0) if q.endswith("0") else (1, 0, 0),           # (0.8 + 0.4) / 2
    3: (0, 0, 1),                                                       # 0.2
    5: (1, 1, 1),
    6: (0, 0, 0),
}


def lineage_decide(kind, agent, versions, q):
    row = LINEAGE.get(versions.get("A", 0), (0, 0, 0))
    row = row(q) if callable(row) else row
    return row[2 if kind == "global_" else (0 if agent == "A" else 1)]


def test_c3_accounting(criterion):
    with criterion(3, "cumulative score along a lineage and refresh centering", budget_s=5.0):
        pool = [QuerySample(f"q{i}", f"question {i}") for i in range(10)]
        system = ScriptedSystem(chain("A", "B", "C"), decide=lineage_decide)
        hp = Hyperparams(K=1, K_sub=1, batch_size=2, E=1, T=3)
        state = OptimizerRunState.initial(system.graph, system.prompts(), hp)
        state.epoch = 1
        opt = Optimizer(state, pool[:2], system.gateway())
        rewards = [opt.beam_round("A")["candidates"][0]["reward"] for _ in range(3)]
        assert rewards == pytest.approx([0.8, 0.6, 0.2], abs=1e-12)
        leaf = opt.state.per_agent["A"].beam[0]
        assert leaf.prompt_text == tagged_prompt("A", 3)
        assert leaf.cum_score == sum(rewards) and leaf.rewards == tuple(rewards)

        def refreshed(beam):
            st = OptimizerRunState.initial(system.graph, system.prompts(), Hyperparams())
            st.epoch = 2
            st.per_agent["A"].beam = beam
            o = Optimizer(st, pool, system.gateway())
            o.refresh_beam("A")
            return {e.prompt_text: e.cum_score for e in o.state.per_agent["A"].beam}, o.state.per_agent["A"]

        anchor, win, loss = (tagged_prompt("A", v) for v in (0, 5, 6))
        scores, st_a = refreshed([BeamEntry(anchor, 3.0), BeamEntry(win, 1.0), BeamEntry(loss, 2.0)])
        assert scores == {win: 0.5, anchor: 0.0}
        assert st_a.anchor_prompt == win and st_a.anchor_score == 0.5
        scores, st_a = refreshed([BeamEntry(loss, 2.0), BeamEntry(anchor, 1.0)])
        assert scores == {anchor: 0.0, loss: -0.5}
        assert st_a.anchor_prompt == anchor and st_a.anchor_score == 0.0


# -- 4 ---------------------------------------------------------------------------------


def test_c4_micro_world_optimum(tmp_path, criterion, capsys):
    with criterion(4, "optimize with defaults returns the exhaustive optimum", budget_s=60.0):
        cfg = world_config(tmp_path)
        assert load_config(cfg).hyperparams == Hyperparams()
        assert main(["optimize", "--config", str(cfg)]) == 0
        status = json.loads(capsys.readouterr().out)
        found = json.loads(open(status["prompts"]).read())
        world = ChainWorld()
        assert len(world.all_prompts("a1")) * len(world.all_prompts("a2")) <= 64
        assert PromptConfig(found) == world.exhaustive_optimum()


# -- 5 ---------------------------------------------------------------------------------


def a1_series(tmp_path, **hyper):
    cfg = world_config(tmp_path, name="coordination_world", **hyper)
    assert main(["optimize", "--config", str(cfg)]) == 0
    report = build_report(read_records(tmp_path / "out" / "records.jsonl"))
    return [p["rate"] for p in report["misalignment_rate_by_depth"]["a1"]]


def test_c5_misalignment_decline(tmp_path, criterion, capsys):
    with criterion(5, "misalignment rate non-increasing from round 3; ablation ends higher", budget_s=60.0):
        guided = a1_series(tmp_path / "guided")
        ablated = a1_series(tmp_path / "ablated", misalignment_sampling=False)
        capsys.readouterr()
        assert len(guided) == len(ablated) == 9 and None not in guided + ablated
        tail = guided[2:]
        assert all(b <= a for a, b in zip(tail, tail[1:])), guided
        assert ablated[-1] > guided[-1], (guided, ablated)


# -- 6 ---------------------------------------------------------------------------------


def test_c6_schedule_shape(tmp_path, criterion, capsys):
    with criterion(6, "E=3 visits in topological order, T=3 rounds each, refresh before visits 2 and 3"):
        cfg = world_config(tmp_path)
        assert main(["optimize", "--config", str(cfg)]) == 0
        capsys.readouterr()
        records = read_records(tmp_path / "out" / "records.jsonl")
        expected = []
        for epoch in (1, 2, 3):
            for agent in load_config(cfg).graph.order():
                if epoch > 1:
                    expected.append(("refresh", epoch, agent, None))
                expected += [("round", epoch, agent, t) for t in (1, 2, 3)]
        assert [(r["type"], r["epoch"], r["agent"], r.get("round")) for r in records] == expected


# -- 7 ---------------------------------------------------------------------------------


def test_c7_determinism_and_resume(tmp_path, criterion, capsys):
    with criterion(7, "twin runs byte-identical; interrupt and resume matches"):
        paths = []
        for name in ("a", "b"):
            cfg = world_config(tmp_path / name)
            assert main(["optimize", "--config", str(cfg)]) == 0
            paths.append(tmp_path / name / "out" / "checkpoint.json")
        assert paths[0].read_bytes() == paths[1].read_bytes()

        cfg = world_config(tmp_path / "c")
        ck = tmp_path / "c" / "out" / "checkpoint.json"
        for steps in (4, 7):
            assert main(["optimize", "--config", str(cfg), "--max-steps", str(steps)]
                        + (["--resume", str(ck)] if steps == 7 else [])) == 0
            assert not checkpoint_load(ck).finished
        assert main(["optimize", "--config", str(cfg), "--resume", str(ck)]) == 0
        capsys.readouterr()
        assert read_checkpoint(ck)["state"] == read_checkpoint(paths[0])["state"]
        assert (tmp_path / "c" / "out" / "final_prompts.json").read_bytes() == \
            (tmp_path / "a" / "out" / "final_prompts.json").read_bytes()

        def strip(path):
            return [{k: v for k, v in r.items() if k != "calls"} for r in read_records(path)]

        assert strip(tmp_path / "c" / "out" / "records.jsonl") == strip(tmp_path / "a" / "out" / "records.jsonl")


# -- 8 ---------------------------------------------------------------------------------


def test_c8_counterfactual_calls(criterion):
    with criterion(8, "candidate scoring at a middle agent re-runs only its downstream closure"):
        graph = diamond()
        system = ScriptedSystem(graph)
        gw = system.gateway()
        prompts = system.prompts()
        samples = [QuerySample(f"s{i}", f"question {i}") for i in range(3)]
        base = {s.id: execute_full(graph, prompts, s, gw) for s in samples}
        closure = graph.downstream_closure("B")
        assert sorted(closure) == ["B", "D"]
        before = system.agent_calls.calls
        cand = "[[B|v=1]] agent B\n{context}\nQ: {question}"
        score_candidate(graph, prompts, "B", cand, prompts["B"], samples, base, RewardWeights(), gw)
        assert system.agent_calls.calls - before == len(closure) * len(samples)
        called = [r.text.split("]]", 1)[0] for r in system.agent_calls.requests[before:]]
        assert sorted(set(called)) == ["[[B|v=1", "[[D|v=0"]


# -- 9 ---------------------------------------------------------------------------------


GOLDEN_REQUEST = (
    b'{"model":"stub-model","messages":[{"role":"system","content":"You are terse."},'
    b'{"role":"user","content":"\\nQuestion: What is 2+2?"}],"temperature":0.0,"max_tokens":64}'
)
GOLDEN_REPLY = "<answer>4</answer>"


def test_c9_wire_compatibility(tmp_path, criterion, capsys, monkeypatch):
    with criterion(9, "run sends the golden request body and prints the reply"):
        monkeypatch.setenv("STUB_KEY", "sk-test")
        with StubChatServer(reply=lambda body: GOLDEN_REPLY) as server:
            doc = {
                "graph": {"agents": [{"id": "solver", "backend_ref": "agent",
                                      "gen_params": {"temperature": 0.0, "max_tokens": 64}}],
                          "edges": [], "output_agent": "solver"},
                "prompts": {"solver": "You are terse.\n{context}\nQuestion: {question}"},
                "backends": [{"name": n, "kind": "http_chat", "model": "stub-model", "endpoint_url": server.url,
                              "auth_env_var": "STUB_KEY"} for n in ("agent", "optimizer", "evaluator")],
            }
            cfg = tmp_path / "stub.json"
            cfg.write_text(json.dumps(doc))
            assert main(["run", "--config", str(cfg), "--query", "What is 2+2?"]) == 0
        assert capsys.readouterr().out == GOLDEN_REPLY + "\n"
        assert server.bodies == [GOLDEN_REQUEST]
        assert b"nonce" not in server.bodies[0]
        assert server.paths == ["/v1/chat/completions"]
        assert server.headers[0]["Authorization"] == "Bearer sk-test"
