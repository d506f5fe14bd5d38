"""Config builders shared by harness-level tests."""

import json
from pathlib import Path

from jointprompt.worlds import ChainWorld

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def world_config(tmp_path, name="chain_world", **hyper):
    """Copy of a bundled world config whose outputs land in ``tmp_path``."""
    doc = json.loads((CONFIGS / f"{name}.json").read_text())
    doc["pool_path"] = str(CONFIGS / doc["pool_path"])
    doc["output_dir"] = str(tmp_path / "out")
    doc["hyperparams"] = hyper
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(doc))
    return path


def scenario_config(tmp_path, rules, default="", graph=None, prompts=None):
    """Single-agent (or given) graph whose three backends share one rule scenario."""
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps({"rules": rules, "default_response": default}))
    graph = graph or {
        "agents": [{"id": "solver", "task_kind": "math", "backend_ref": "agent"}],
        "edges": [],
        "output_agent": "solver",
    }
    prompts = prompts or {"solver": "Solve it.\n{context}\nQuestion: {question}"}
    doc = {
        "graph": graph,
        "prompts": prompts,
        "backends": [{"name": n, "kind": "synthetic", "scenario_path": "scenario.json"}
                     for n in ("agent", "optimizer", "evaluator")],
        "output_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


__all__ = ["ChainWorld", "CONFIGS", "ROOT", "scenario_config", "world_config", "write_jsonl"]
