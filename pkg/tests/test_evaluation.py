import pytest

from jointprompt import errors
from jointprompt.evaluation import evaluate, extract_answer, match
from jointprompt.runtime import QuerySample
from jointprompt.topology import PromptConfig

from conftest import make_graph, synthetic_gateway


def test_extract_last_answer():
    assert extract_answer("<answer>1</answer> then <answer> 2 </answer>", "math") == "2"
    assert extract_answer("no tags", "math") is None


def test_extract_code_block():
    text = "```python\nx = 1\n```\nfinal:\n```python\ndef f():\n    return 2\n```"
    assert extract_answer(text, "code") == "def f():\n    return 2"


@pytest.mark.parametrize("pred,label,ok", [
    ("7/2", "3.5", True),
    ("\\frac{7}{2}", "3.5", True),
    ("1,000", "1000", True),
    ("007", "7", True),
    ("x = 3", "x=3", True),
    ("3.4", "3.5", False),
])
def test_normalized_numeric(pred, label, ok):
    assert match(pred, label, "normalized_numeric") is ok


def test_exact_and_letter():
    assert match(" 42 ", "42", "exact") and not match("42.0", "42", "exact")
    assert match("(B)", "b", "letter") and not match("BC", "B", "letter")
    assert not match(None, "1", "exact")
    with pytest.raises(errors.ConfigError):
        match("1", "1", "fuzzy")


def test_evaluate_three_of_four():
    answers = {"one": "<answer>1</answer>", "two": "<answer>2</answer>", "three": "<answer>7/2</answer>",
               "four": "I am not sure"}
    gw = synthetic_gateway(lambda r: answers[r.user.rsplit(" ", 1)[1]])
    graph = make_graph(["S"], [], "S")
    prompts = PromptConfig({"S": "Solve {question}"})
    samples = [QuerySample("a", "q one", label="1"), QuerySample("b", "q two", label="2"),
               QuerySample("c", "q three", label="3.5"), QuerySample("d", "q four", label="4")]
    report = evaluate(graph, prompts, samples, "normalized_numeric", gw)
    assert report.accuracy == 0.75 and report.correct == 3 and report.total == 4
    assert report.unanswered == 1
    assert [v["correct"] for v in report.verdicts] == [True, True, True, False]


def test_evaluate_needs_labels():
    gw = synthetic_gateway(lambda r: "")
    graph = make_graph(["S"], [], "S")
    with pytest.raises(errors.MissingLabels):
        evaluate(graph, PromptConfig({"S": "{question}"}), [QuerySample("a", "q")], "exact", gw)
    with pytest.raises(errors.MissingLabels):
        evaluate(graph, PromptConfig({"S": "{question}"}), [], "exact", gw)
