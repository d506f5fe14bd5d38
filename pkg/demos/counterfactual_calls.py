"""Count backend calls when scoring a new prompt for one agent of a diamond graph.

    A -> B -> D
    A -> C -> D

Changing B's prompt can only change B and D, so scoring a candidate re-runs
just those two agents and reuses the cached outputs of A and C.
"""

from jointprompt import AgentSpec, CommGraph, Gateway, PromptConfig
from jointprompt.gateway import BackendProfile
from jointprompt.runtime import QuerySample, execute_counterfactual, execute_full

calls = []


def echo(request):
    calls.append(request.text.splitlines()[0])
    return f"({request.text.splitlines()[0]} saw {len(request.user)} chars)"


graph = CommGraph([AgentSpec(a) for a in "ABCD"], [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")], "D")
prompts = PromptConfig({a: f"You are agent {a}.\n{{context}}\nQuestion: {{question}}" for a in "ABCD"})
gateway = Gateway([BackendProfile("agent", handler="(demo)")], handlers={"agent": echo})
sample = QuerySample("demo", "What is 6 times 7?")

base = execute_full(graph, prompts, sample, gateway)
print("full run      :", calls)
calls.clear()

candidate = "You are agent B, and you double-check arithmetic.\n{context}\nQuestion: {question}"
trace = execute_counterfactual(base, graph, prompts, "B", candidate, sample, gateway)
print("counterfactual:", calls)
print("downstream closure of B:", graph.downstream_closure("B"))
print("reused unchanged:", [a for a in "ABCD" if trace.records[a] == base.records[a]])
