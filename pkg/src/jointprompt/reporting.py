"""Summaries of optimizer round records."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import errors


def read_records(path: str | Path) -> list[dict]:
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
    except FileNotFoundError:
        raise errors.NoRecords(f"record file {path} does not exist") from None
    return records


class RecordWriter:
    """Appends records to a JSONL file, one canonical object per line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: Mapping) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def pooled_rate_by_depth(records: Iterable[Mapping]) -> list[dict]:
    """Misalignment rate per depth, pooled over agents by indicator count."""
    num: dict[int, float] = defaultdict(float)
    den: dict[int, int] = defaultdict(int)
    for r in records:
        if r.get("type") == "round" and r.get("misalignment_rate") is not None:
            n = int(r.get("n_indicators", 1))
            num[r["depth"]] += r["misalignment_rate"] * n
            den[r["depth"]] += n
    return [{"depth": d, "rate": num[d] / den[d]} for d in sorted(den)]


def build_report(records: Sequence[Mapping]) -> dict:
    rounds = [r for r in records if r.get("type") == "round"]
    refreshes = [r for r in records if r.get("type") == "refresh"]
    if not rounds:
        raise errors.NoRecords("no round records to report on")

    agents: list[str] = []
    for r in rounds:
        if r["agent"] not in agents:
            agents.append(r["agent"])

    series = {a: [] for a in agents}
    rewards = {a: [] for a in agents}
    history = {a: [] for a in agents}
    for r in rounds:
        a = r["agent"]
        series[a].append({"depth": r["depth"], "epoch": r["epoch"], "round": r["round"],
                          "rate": r.get("misalignment_rate")})
        rewards[a].append({
            "depth": r["depth"],
            "rewards": [c["reward"] for c in r.get("candidates", [])],
            "best_cum_score": r["beam"][0]["cum_score"] if r.get("beam") else None,
        })
        if not history[a] or history[a][-1]["prompt_digest"] != r["anchor_digest"]:
            history[a].append({"depth": r["depth"], "prompt_digest": r["anchor_digest"],
                               "prompt": r.get("anchor_prompt"), "score": r.get("anchor_score")})

    persisted = [r["pre_top_digest"] == r["post_top_digest"] for r in refreshes]
    calls = sum(int(r.get("calls", 0)) for r in records)
    return {
        "agents": agents,
        "misalignment_rate_by_depth": series,
        "pooled_misalignment_rate_by_depth": pooled_rate_by_depth(rounds),
        "best_prompt_history": history,
        "reward_trajectories": rewards,
        "top1_persistence": (sum(persisted) / len(persisted)) if persisted else None,
        "refreshes": len(refreshes),
        "rounds": len(rounds),
        "backend_calls": calls,
    }


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.3f}"


def render_text(report: Mapping) -> str:
    lines = [f"rounds: {report['rounds']}  refreshes: {report['refreshes']}  backend calls: {report['backend_calls']}"]
    lines.append(f"top-1 persistence across refreshes: {_fmt(report['top1_persistence'])}")
    for a in report["agents"]:
        rates = " ".join(_fmt(p["rate"]) for p in report["misalignment_rate_by_depth"][a])
        lines.append(f"[{a}] misalignment rate by depth: {rates}")
        for h in report["best_prompt_history"][a]:
            lines.append(f"[{a}]   depth {h['depth']}: anchor {h['prompt_digest'][:12]} score {_fmt(h['score'])}")
    pooled = " ".join(_fmt(p["rate"]) for p in report["pooled_misalignment_rate_by_depth"])
    lines.append(f"pooled misalignment rate by depth: {pooled}")
    return "\n".join(lines) + "\n"
