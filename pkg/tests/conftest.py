import threading

import pytest

from jointprompt.gateway import BackendProfile, Gateway
from jointprompt.topology import AgentSpec, CommGraph


class Counting:
    """Wraps a handler and records every request it sees."""

    def __init__(self, fn):
        self.fn = fn
        self.requests = []
        self._lock = threading.Lock()

    def __call__(self, request):
        with self._lock:
            self.requests.append(request)
        return self.fn(request)

    @property
    def calls(self):
        return len(self.requests)


def synthetic_gateway(agent, optimizer=None, evaluator=None, **profile_kw):
    handlers = {"agent": agent, "optimizer": optimizer or agent, "evaluator": evaluator or agent}
    profiles = [
        BackendProfile(name, kind="synthetic", handler="(test)", **profile_kw) for name in handlers
    ]
    return Gateway(profiles, handlers=handlers)


def make_graph(agent_ids, edges, output, **spec_kw):
    return CommGraph([AgentSpec(a, **spec_kw) for a in agent_ids], edges, output)


def chain(*ids):
    return make_graph(ids, list(zip(ids, ids[1:])), ids[-1])


def diamond():
    return make_graph(["A", "B", "C", "D"], [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")], "D")


@pytest.fixture
def tmp_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


# -- stub chat-completions server ---------------------------------------------------

import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class StubChatServer:
    """Minimal /chat/completions endpoint.

    ``statuses`` is consumed one per request (default 200); ``reply`` maps
    the parsed request body to the assistant text.
    """

    def __init__(self, statuses=(), reply=None, delay=0.0):
        self.statuses = list(statuses)
        self.reply = reply or (lambda body: "ok")
        self.delay = delay
        self.bodies = []
        self.headers = []
        self.paths = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                with stub._lock:
                    stub.bodies.append(raw)
                    stub.headers.append(dict(self.headers))
                    stub.paths.append(self.path)
                    status = stub.statuses.pop(0) if stub.statuses else 200
                    stub.in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub.in_flight)
                try:
                    if stub.delay:
                        import time

                        time.sleep(stub.delay)
                    if status != 200:
                        payload = json.dumps({"error": {"message": "busy"}}).encode()
                    else:
                        text = stub.reply(json.loads(raw))
                        payload = json.dumps({
                            "id": "stub",
                            "object": "chat.completion",
                            "choices": [{"index": 0, "message": {"role": "assistant", "content": text},
                                         "finish_reason": "stop"}],
                            "usage": {"prompt_tokens": 3, "completion_tokens": 1, "total_tokens": 4},
                        }).encode()
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                finally:
                    with stub._lock:
                        stub.in_flight -= 1

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


# -- scripted agent/judge/optimizer system -------------------------------------------

import re

from jointprompt.topology import PromptConfig

_TAG = re.compile(r"\[\[(\w+)\|v=(\d+)\]\]")
_SELF = re.compile(r"self=(\w+):(\d+) up=([\w:,]*) q=(.*)")


def tagged_prompt(agent, v):
    return f"[[{agent}|v={v}]] agent {agent}\n{{context}}\nQ: {{question}}"


class ScriptedSystem:
    """Agents, judge and optimizer driven by plain Python callables.

    Agent outputs look like ``self=B:0 up=A:1 q=<question>`` so the judge
    can see which prompt versions produced an output. ``decide(kind, agent,
    versions, question)`` returns 1 when the candidate (B) should win.
    ``propose(agent, v, request_text)`` returns the next version number.
    """

    def __init__(self, graph, decide=None, propose=None, judge_reply=None):
        self.graph = graph
        self.decide = decide or (lambda kind, agent, versions, q: 1)
        self.propose = propose or (lambda agent, v, text: v + 1)
        self.judge_reply = judge_reply
        self.agent_calls = Counting(self._agent)
        self.judge_calls = Counting(self._judge)
        self.optimizer_calls = Counting(self._optimize)

    def prompts(self, versions=None):
        versions = versions or {}
        return PromptConfig({a: tagged_prompt(a, versions.get(a, 0)) for a in self.graph.agent_ids})

    def gateway(self):
        return synthetic_gateway(self.agent_calls, self.optimizer_calls, self.judge_calls)

    def _agent(self, request):
        agent, v = _TAG.search(request.text).groups()
        ups = set()
        for m in _SELF.finditer(request.user):
            ups.add(f"{m.group(1)}:{m.group(2)}")
            ups.update(t for t in m.group(3).split(",") if t)
        q = request.user.rsplit("Q: ", 1)[1]
        return f"self={agent}:{v} up={','.join(sorted(ups))} q={q}"

    @staticmethod
    def parse_output(block):
        m = _SELF.search(block)
        versions = {m.group(1): int(m.group(2))}
        for tok in m.group(3).split(","):
            if tok:
                a, k = tok.split(":")
                versions[a] = int(k)
        return m.group(1), versions, m.group(4).strip()

    def _judge(self, request):
        text = request.text
        if self.judge_reply is not None:
            return self.judge_reply(text)
        if "Output B:" in text:
            kind, block = "intermediate", text.split("Output B:", 1)[1]
        else:
            kind, block = "global_", text.split("Answer B:", 1)[1]
        agent, versions, q = self.parse_output(block.strip().split("\n")[0])
        return "B" if self.decide(kind, agent, versions, q) else "A"

    def _optimize(self, request):
        ref = request.text.split("Reference prompt:", 1)[1]
        agent, v = _TAG.search(ref).groups()
        new = self.propose(agent, int(v), request.text)
        return f"<analyse>a</analyse><modification>m</modification><prompt>{tagged_prompt(agent, new)}</prompt>"
