"""Placeholder rendering and the embedded prompt templates.

Templates use ``{name}`` placeholders where ``name`` is an identifier.
Braces that do not wrap an identifier (``\\frac{3}{4}``, ``{}``) are left
alone, and ``{{``/``}}`` render as literal braces.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .errors import TemplateRenderError

TASK_KINDS = ("math", "reasoning", "code")

_TOKEN = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}")

# Output-format sentence used when a sample carries no requirement of its own.
DEFAULT_REQUIREMENTS = {
    "math": "Show your final answer bracketed between <answer> and </answer> tags.",
    "reasoning": (
        "Show your final option with one letter bracketed between "
        "<answer> and </answer> tags."
    ),
    "code": "Provide a complete and correct code implementation in python.",
}

# Rules handed to the optimizer model as {requirements}.
OPTIMIZER_REQUIREMENTS = {
    "math": (
        "- Keep the literal placeholders {question} and {context} in the prompt.\n"
        "- The agent must end with its final answer enclosed in <answer> and "
        "</answer> tags, containing only the canonical mathematical answer."
    ),
    "reasoning": (
        "- Keep the literal placeholders {question} and {context} in the prompt.\n"
        "- The agent must end with a single option letter enclosed in <answer> "
        "and </answer> tags."
    ),
    "code": (
        "- Keep the literal placeholders {question} and {context} in the prompt.\n"
        "- The agent must return a complete python implementation inside a "
        "fenced code block, without exception handling."
    ),
}


def placeholders(template: str) -> list[str]:
    """Names of the placeholders in ``template``, in order of appearance."""
    return [m.group(1) for m in _TOKEN.finditer(template) if m.group(1)]


def render(template: str, values: dict[str, str], *, strict: bool = True) -> str:
    """Substitute ``{name}`` placeholders from ``values``.

    Values are inserted verbatim and never re-scanned. With ``strict`` an
    unknown placeholder raises :class:`TemplateRenderError`; otherwise it is
    kept as-is.
    """

    def _sub(m: re.Match) -> str:
        tok = m.group(0)
        if tok == "{{":
            return "{"
        if tok == "}}":
            return "}"
        name = m.group(1)
        if name in values:
            return values[name]
        if strict:
            raise TemplateRenderError(f"unknown placeholder {{{name}}}")
        return tok

    return _TOKEN.sub(_sub, template)


_BUILTIN = resources.files(__package__).joinpath("templates")


@lru_cache(maxsize=None)
def _read_builtin(name: str) -> str:
    return _BUILTIN.joinpath(name).read_text(encoding="utf-8")


def load_template(name: str, override_dir: str | Path | None = None) -> str:
    """Load a template by file name, preferring ``override_dir`` when it has one."""
    if override_dir is not None:
        path = Path(override_dir) / name
        if path.is_file():
            return path.read_text(encoding="utf-8")
    try:
        return _read_builtin(name)
    except FileNotFoundError:
        raise TemplateRenderError(f"no template named {name!r}") from None


def _check_kind(task_kind: str) -> str:
    if task_kind not in TASK_KINDS:
        raise TemplateRenderError(f"unknown task kind {task_kind!r}")
    return task_kind


def optimizer_template(task_kind: str, override_dir=None) -> str:
    return load_template(f"optimizer_{_check_kind(task_kind)}.txt", override_dir)


def judge_template(kind: str, task_kind: str, override_dir=None) -> str:
    prefix = "judge_global" if kind == "global_" else "judge_local"
    return load_template(f"{prefix}_{_check_kind(task_kind)}.txt", override_dir)


def agent_template(role: str, task_kind: str, override_dir=None) -> str:
    """Initial agent prompt for ``role`` in {"predictor", "reflector"}."""
    if role not in ("predictor", "reflector"):
        raise TemplateRenderError(f"unknown agent role {role!r}")
    return load_template(f"{role}_{_check_kind(task_kind)}.txt", override_dir)
