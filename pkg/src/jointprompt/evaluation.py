"""Exact-match benchmark accuracy of a prompt configuration."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from . import errors
from .gateway import Gateway
from .runtime import QuerySample, execute_full, parallel_map
from .topology import CommGraph, PromptConfig

MATCHERS = ("exact", "normalized_numeric", "letter")

_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


def extract_answer(text: str, task_kind: str) -> str | None:
    if task_kind == "code":
        blocks = _FENCE.findall(text)
        return blocks[-1].strip() if blocks else None
    found = _ANSWER.findall(text)
    return found[-1].strip() if found else None


def _as_fraction(s: str) -> Fraction | None:
    s = "".join(s.split()).replace(",", "")
    if s.startswith("\\frac{") and s.endswith("}"):
        num, _, den = s[len("\\frac{"):-1].partition("}{")
        s = f"{num}/{den}"
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return None


def _squash(s: str) -> str:
    s = "".join(s.split())
    return s.lstrip("0") or s


def match(prediction: str | None, label: str, matcher: str) -> bool:
    if prediction is None:
        return False
    if matcher == "exact":
        return prediction.strip() == label.strip()
    if matcher == "normalized_numeric":
        a, b = _as_fraction(prediction), _as_fraction(label)
        if a is not None and b is not None:
            return a == b
        return _squash(prediction) == _squash(label)
    if matcher == "letter":
        p, lab = prediction.strip().strip("().").casefold(), label.strip().strip("().").casefold()
        return len(p) == 1 and p == lab
    raise errors.ConfigError(f"unknown matcher {matcher!r}; expected one of {MATCHERS}")


@dataclass
class AccuracyReport:
    accuracy: float
    correct: int
    total: int
    unanswered: int
    verdicts: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "unanswered": self.unanswered,
            "verdicts": self.verdicts,
        }


def evaluate(graph: CommGraph, prompts: PromptConfig, samples: Sequence[QuerySample], matcher: str,
             gateway: Gateway, *, workers: int = 1) -> AccuracyReport:
    if matcher not in MATCHERS:
        raise errors.ConfigError(f"unknown matcher {matcher!r}; expected one of {MATCHERS}")
    if not samples:
        raise errors.MissingLabels("evaluation set is empty")
    unlabeled = [s.id for s in samples if s.label is None]
    if unlabeled:
        raise errors.MissingLabels(f"samples without labels: {unlabeled[:5]}")
    task_kind = graph.agent(graph.output_agent).task_kind

    def one(sample):
        trace = execute_full(graph, prompts, sample, gateway)
        pred = extract_answer(trace.final_output, task_kind)
        return {"id": sample.id, "prediction": pred, "label": sample.label,
                "correct": match(pred, sample.label, matcher)}

    verdicts = parallel_map(one, list(samples), workers)
    correct = sum(v["correct"] for v in verdicts)
    unanswered = sum(v["prediction"] is None for v in verdicts)
    return AccuracyReport(correct / len(verdicts), correct, len(verdicts), unanswered, verdicts)
