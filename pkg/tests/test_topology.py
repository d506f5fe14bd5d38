import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointprompt import errors
from jointprompt.topology import AgentSpec, CommGraph, PromptConfig, neighbors, validate_and_sort

from conftest import chain, diamond, make_graph


def test_chain_order():
    assert validate_and_sort(chain("A", "B", "C")) == ["A", "B", "C"]


def test_two_node_cycle():
    g = make_graph(["A", "B"], [("A", "B"), ("B", "A")], "B")
    with pytest.raises(errors.CycleDetected) as info:
        validate_and_sort(g)
    assert info.value.edge in {("A", "B"), ("B", "A")}


def test_cycle_edge_lies_on_cycle():
    g = make_graph(["S", "X", "Y", "Z", "O"], [("S", "X"), ("X", "Y"), ("Y", "Z"), ("Z", "X"), ("Z", "O")], "O")
    with pytest.raises(errors.CycleDetected) as info:
        g.order()
    assert info.value.edge in {("X", "Y"), ("Y", "Z"), ("Z", "X")}


def test_diamond_insertion_order():
    assert diamond().order() == ["A", "B", "C", "D"]


def test_tie_break_follows_insertion_not_name():
    g = make_graph(["z", "a", "out"], [("z", "out"), ("a", "out")], "out")
    assert g.order() == ["z", "a", "out"]


@pytest.mark.parametrize(
    "agents, edges, output, exc",
    [
        (["A", "B"], [("A", "X")], "B", errors.UnknownAgentInEdge),
        (["A", "A"], [], "A", errors.DuplicateAgent),
        (["A", "B"], [("A", "A"), ("A", "B")], "B", errors.InvalidEdge),
        (["A", "B"], [("A", "B"), ("A", "B")], "B", errors.InvalidEdge),
        (["A", "B"], [("A", "B")], "Q", errors.NoOutputAgent),
        (["A", "B"], [("A", "B")], "A", errors.OutputAgentHasSuccessors),
        (["A", "B", "C"], [("A", "C")], "C", errors.UnreachableOutput),
    ],
)
def test_invalid_graphs(agents, edges, output, exc):
    with pytest.raises(exc):
        make_graph(agents, edges, output).order()


def test_topology_errors_are_config_errors():
    assert issubclass(errors.CycleDetected, errors.ConfigError)


def test_neighbors():
    d = diamond()
    assert neighbors(d, "D", "in") == ["B", "C"]
    assert neighbors(d, "A", "out") == ["B", "C"]
    c = chain("A", "B", "C")
    assert c.neighbors("C", "out") == []
    assert c.neighbors("B", "in") == ["A"]
    with pytest.raises(errors.UnknownAgent):
        c.neighbors("Q", "in")


def test_downstream_closure():
    d = diamond()
    assert d.downstream_closure("B") == ["B", "D"]
    assert d.downstream_closure("A") == ["A", "B", "C", "D"]
    assert d.downstream_closure("D") == ["D"]


def test_graph_round_trip():
    g = make_graph(["A", "B"], [("A", "B")], "B", task_kind="code", temperature=0.3)
    again = CommGraph.from_dict(g.to_dict())
    assert again == g
    assert again.agent("A").temperature == 0.3


def test_agent_spec_validation():
    with pytest.raises(errors.ConfigError):
        AgentSpec("")
    with pytest.raises(errors.ConfigError):
        AgentSpec("a", max_tokens=0)
    with pytest.raises(errors.ConfigError):
        AgentSpec("a", temperature=-0.1)
    assert AgentSpec("a").role_label == "a"


# -- brute-force oracle for the ordering rule ----------------------------------


def brute_force_order(n, edges):
    """Among all topological orders, the one whose index sequence is smallest at the first difference."""
    valid = [
        p for p in itertools.permutations(range(n))
        if all(p.index(u) < p.index(v) for u, v in edges)
    ]
    return list(min(valid))


@st.composite
def dags(draw):
    n = draw(st.integers(2, 6))
    labels = draw(st.permutations([f"n{i}" for i in range(n)]))
    # edges only from lower to higher rank of a hidden permutation -> acyclic
    rank = draw(st.permutations(range(n)))
    pairs = [(i, j) for i in range(n) for j in range(n) if rank[i] < rank[j]]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs))) if pairs else []
    sink = max(range(n), key=lambda i: rank[i])
    # every node reaches the sink
    edges = set(chosen)
    edges = {(u, v) for u, v in edges if u != sink}
    for i in range(n):
        if i != sink:
            edges.add((i, sink))
    return n, labels, sorted(edges), sink


@settings(max_examples=150, deadline=None)
@given(dags())
def test_order_matches_brute_force(case):
    n, labels, edges, sink = case
    g = make_graph(labels, [(labels[u], labels[v]) for u, v in edges], labels[sink])
    expected = [labels[i] for i in brute_force_order(n, edges)]
    assert g.order() == expected


# -- prompts -----------------------------------------------------------------------


def test_prompt_config_validation():
    g = chain("A", "B")
    PromptConfig({"A": "{question}", "B": "{context} {question}"}).validate(g)
    with pytest.raises(errors.InvalidPromptConfig):
        PromptConfig({"A": "{question}"}).validate(g)
    with pytest.raises(errors.InvalidPromptConfig):
        PromptConfig({"A": "no placeholder", "B": "{question}"}).validate(g)
    with pytest.raises(errors.InvalidPromptConfig):
        PromptConfig({"A": "{question} {mystery}", "B": "{question}"}).validate(g)
    # braces that are not identifiers are literal text
    PromptConfig({"A": "\\frac{1}{2} {question} {{x}}", "B": "{question}"}).validate(g)


def test_fingerprint_and_with_prompt():
    p = PromptConfig({"A": "{question} a", "B": "{question} b"})
    q = PromptConfig({"B": "{question} b", "A": "{question} a"})
    assert p.fingerprint == q.fingerprint
    assert p.with_prompt("A", "{question} a") is p
    r = p.with_prompt("A", "{question} new")
    assert r.fingerprint != p.fingerprint and p["A"] == "{question} a"
    with pytest.raises(errors.UnknownAgent):
        p.with_prompt("Z", "{question}")
