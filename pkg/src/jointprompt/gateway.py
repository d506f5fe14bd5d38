"""Chat-completion access for agents, the optimizer model, and the judge.

Two backend kinds sit behind :class:`Gateway`:

* ``http_chat``: an OpenAI-compatible ``/chat/completions`` endpoint.
* ``synthetic``: a deterministic responder, either a JSON rule scenario or
  a Python callable, for network-free runs.

The gateway adds an on-disk response cache keyed by request digest,
retries with exponential backoff, and a per-profile in-flight cap.
"""

from __future__ import annotations

import hashlib
import importlib
import json
import logging
import os
import string
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import httpx

from . import errors

logger = logging.getLogger(__name__)

ROLES = ("system", "user")


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model: str
    temperature: float = 0.0
    max_tokens: int = 1024
    # Cache-busting marker. Part of the digest, never sent on the wire.
    nonce: str | None = None

    def __post_init__(self):
        msgs = tuple(m if isinstance(m, Message) else Message(**m) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise errors.InvalidRequest("a request needs at least one message")
        for i, m in enumerate(msgs):
            if m.role not in ROLES:
                raise errors.InvalidRequest(f"unsupported role {m.role!r}")
            if m.role == "system" and i != 0:
                raise errors.InvalidRequest("the system message must come first")
        if self.max_tokens < 1:
            raise errors.InvalidRequest("max_tokens must be positive")

    @property
    def system(self) -> str:
        return self.messages[0].content if self.messages[0].role == "system" else ""

    @property
    def user(self) -> str:
        return "\n".join(m.content for m in self.messages if m.role == "user")

    @property
    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    def canonical(self) -> dict:
        return {
            "max_tokens": self.max_tokens,
            "messages": [{"content": m.content, "role": m.role} for m in self.messages],
            "model": self.model,
            "nonce": self.nonce,
            "temperature": self.temperature,
        }

    def wire_body(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


def canonical_request_digest(request: ChatRequest) -> str:
    blob = json.dumps(request.canonical(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def encode_wire_body(request: ChatRequest) -> bytes:
    return json.dumps(request.wire_body(), ensure_ascii=False, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_backoff_ms: int = 500

    def __post_init__(self):
        if self.max_attempts < 1:
            raise errors.ConfigError("retry.max_attempts must be >= 1")
        if self.base_backoff_ms < 0:
            raise errors.ConfigError("retry.base_backoff_ms must be >= 0")


@dataclass(frozen=True)
class BackendProfile:
    name: str
    kind: str = "synthetic"
    model: str = "synthetic"
    endpoint_url: str = ""
    auth_env_var: str = ""
    max_in_flight: int = 8
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    cache_enabled: bool = False
    timeout_s: float = 120.0
    # Default temperature for callers that do not set their own
    # (optimizer and judge); agent requests use their gen_params.
    temperature: float | None = None
    max_tokens: int = 2048
    scenario_path: str = ""
    handler: str = ""

    def __post_init__(self):
        if not self.name:
            raise errors.ConfigError("backend profile needs a name")
        if self.kind not in ("http_chat", "synthetic"):
            raise errors.ConfigError(f"profile {self.name}: unknown kind {self.kind!r}")
        if self.kind == "http_chat" and not self.endpoint_url:
            raise errors.ConfigError(f"profile {self.name}: http_chat needs endpoint_url")
        if self.kind == "synthetic" and not (self.scenario_path or self.handler):
            raise errors.ConfigError(f"profile {self.name}: synthetic needs scenario_path or handler")
        if self.max_in_flight < 1:
            raise errors.ConfigError(f"profile {self.name}: max_in_flight must be >= 1")
        if isinstance(self.retry, Mapping):
            object.__setattr__(self, "retry", RetryPolicy(**self.retry))

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path | None = None) -> "BackendProfile":
        d = dict(d)
        if "retry" in d:
            d["retry"] = RetryPolicy(**d["retry"])
        if base_dir is not None and d.get("scenario_path"):
            p = Path(d["scenario_path"])
            if not p.is_absolute():
                d["scenario_path"] = str(Path(base_dir) / p)
        known = cls.__dataclass_fields__
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise errors.ConfigError(f"backend profile: unknown fields {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["retry"] = {"max_attempts": self.retry.max_attempts, "base_backoff_ms": self.retry.base_backoff_ms}
        return d


# -- synthetic backend ------------------------------------------------------


@dataclass(frozen=True)
class ScenarioRule:
    role: str = "any"  # "system", "user", or "any"
    substring: str | None = None
    digest: str | None = None
    response: str | None = None
    template: str | None = None

    def matches(self, request: ChatRequest, digest: str) -> bool:
        if self.digest is not None:
            return digest == self.digest
        if self.substring is None:
            return True
        if self.role == "any":
            haystack = request.text
        else:
            haystack = "\n".join(m.content for m in request.messages if m.role == self.role)
        return self.substring in haystack

    def respond(self, request: ChatRequest) -> str:
        if self.template is not None:
            return string.Template(self.template).safe_substitute(
                system=request.system, user=request.user, text=request.text, model=request.model
            )
        return self.response or ""


@dataclass(frozen=True)
class SyntheticScenario:
    """Ordered rules; the first match wins, else ``default_response``.

    A rule's ``template`` may reference ``$system``, ``$user``, ``$text``
    and ``$model``.
    """

    rules: tuple[ScenarioRule, ...] = ()
    default_response: str = ""

    def __call__(self, request: ChatRequest) -> str:
        digest = canonical_request_digest(request)
        for rule in self.rules:
            if rule.matches(request, digest):
                return rule.respond(request)
        return self.default_response

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticScenario":
        rules = []
        for r in d.get("rules", []):
            match = r.get("match", {})
            rules.append(
                ScenarioRule(
                    role=match.get("message_role", match.get("role", "any")),
                    substring=match.get("substring"),
                    digest=match.get("digest"),
                    response=r.get("response"),
                    template=r.get("template"),
                )
            )
        return cls(tuple(rules), d.get("default_response", ""))

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticScenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def load_handler(spec: str) -> Callable[[ChatRequest], str]:
    """Resolve ``"package.module:attr"``; a class or factory is called once."""
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise errors.ConfigError(f"handler {spec!r} must look like 'module:attribute'")
    obj = getattr(importlib.import_module(module_name), attr)
    if isinstance(obj, type) or getattr(obj, "is_factory", False):
        obj = obj()
    return obj


# -- on-disk cache --------------------------------------------------------------


class ResponseCache:
    """One JSON file per key: ``{"text": ..., "meta": {...}}``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        try:
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)["text"]
        except (FileNotFoundError, KeyError, json.JSONDecodeError):
            return None

    def put(self, key: str, text: str, meta: dict) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump({"text": text, "meta": meta}, fh, ensure_ascii=False, sort_keys=True)
        os.replace(tmp, path)


# -- gateway ----------------------------------------------------------------------


@dataclass
class ProfileStats:
    requests: int = 0
    backend_calls: int = 0
    cache_hits: int = 0
    failures: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Gateway:
    """Routes requests to named backend profiles.

    Thread-safe: callers may issue requests concurrently. Identical
    cacheable requests in flight at the same time are collapsed into one
    backend call so call counts do not depend on thread timing.
    """

    def __init__(
        self,
        profiles: Iterable[BackendProfile],
        cache_dir: str | Path | None = None,
        handlers: Mapping[str, Callable[[ChatRequest], str]] | None = None,
        http_client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.profiles = {p.name: p for p in profiles}
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self._handlers: dict[str, Callable[[ChatRequest], str]] = dict(handlers or {})
        self._client = http_client
        self._sleep = sleep
        self._slots = {name: threading.BoundedSemaphore(p.max_in_flight) for name, p in self.profiles.items()}
        self._stats = {name: ProfileStats() for name in self.profiles}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    def profile(self, name_or_profile: str | BackendProfile) -> BackendProfile:
        if isinstance(name_or_profile, BackendProfile):
            return name_or_profile
        try:
            return self.profiles[name_or_profile]
        except KeyError:
            raise errors.ConfigError(f"unknown backend profile {name_or_profile!r}") from None

    def stats(self) -> dict[str, dict]:
        with self._lock:
            return {name: s.to_dict() for name, s in sorted(self._stats.items())}

    def total_backend_calls(self) -> int:
        with self._lock:
            return sum(s.backend_calls for s in self._stats.values())

    def restore_stats(self, stats: Mapping[str, Mapping]) -> None:
        with self._lock:
            for name, values in stats.items():
                if name in self._stats:
                    self._stats[name] = ProfileStats(**values)

    def _bump(self, name: str, **deltas) -> None:
        with self._lock:
            st = self._stats[name]
            for k, v in deltas.items():
                setattr(st, k, getattr(st, k) + v)

    def complete(self, profile: str | BackendProfile, request: ChatRequest, *, use_cache: bool = True) -> str:
        prof = self.profile(profile)
        self._bump(prof.name, requests=1)
        if not (prof.cache_enabled and self.cache is not None):
            return self._call(prof, request)

        key = hashlib.sha256(f"{prof.name}\n{canonical_request_digest(request)}".encode()).hexdigest()
        with self._lock:
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        with key_lock:
            if use_cache:
                hit = self.cache.get(key)
                if hit is not None:
                    self._bump(prof.name, cache_hits=1)
                    return hit
            text = self._call(prof, request, cache_key=key)
        return text

    def _call(self, prof: BackendProfile, request: ChatRequest, cache_key: str | None = None) -> str:
        with self._slots[prof.name]:
            if prof.kind == "synthetic":
                text, usage = self._synthetic(prof, request), {}
                self._bump(prof.name, backend_calls=1)
            else:
                text, usage = self._http(prof, request)
        self._bump(
            prof.name,
            prompt_tokens=int(usage.get("prompt_tokens", 0) or 0),
            completion_tokens=int(usage.get("completion_tokens", 0) or 0),
        )
        if cache_key is not None:
            meta = {"timestamp": time.time(), "model": request.model, "usage": usage, "profile": prof.name}
            self.cache.put(cache_key, text, meta)
        return text

    def _synthetic(self, prof: BackendProfile, request: ChatRequest) -> str:
        handler = self._handlers.get(prof.name)
        if handler is None:
            with self._lock:
                handler = self._handlers.get(prof.name)
                if handler is None:
                    if prof.handler:
                        handler = load_handler(prof.handler)
                    else:
                        handler = SyntheticScenario.load(prof.scenario_path)
                    self._handlers[prof.name] = handler
        return handler(request)

    def _http(self, prof: BackendProfile, request: ChatRequest) -> tuple[str, dict]:
        headers = {"Content-Type": "application/json"}
        if prof.auth_env_var:
            token = os.environ.get(prof.auth_env_var)
            if not token:
                raise errors.AuthMissing(f"environment variable {prof.auth_env_var} is not set")
            headers["Authorization"] = f"Bearer {token}"
        url = prof.endpoint_url.rstrip("/") + "/chat/completions"
        body = encode_wire_body(request)
        client = self._client or httpx.Client(timeout=prof.timeout_s)
        last: Exception | None = None
        try:
            for attempt in range(prof.retry.max_attempts):
                if attempt:
                    self._sleep(prof.retry.base_backoff_ms * (2 ** (attempt - 1)) / 1000.0)
                self._bump(prof.name, backend_calls=1)
                try:
                    resp = client.post(url, content=body, headers=headers, timeout=prof.timeout_s)
                except httpx.TransportError as exc:
                    last = exc
                    logger.warning("%s: transport error on attempt %d: %s", prof.name, attempt + 1, exc)
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = errors.TransportError(f"HTTP {resp.status_code}")
                    logger.warning("%s: HTTP %d on attempt %d", prof.name, resp.status_code, attempt + 1)
                    continue
                if resp.status_code >= 400:
                    self._bump(prof.name, failures=1)
                    raise errors.TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                return _parse_chat_response(resp)
        finally:
            if self._client is None:
                client.close()
        self._bump(prof.name, failures=1)
        raise errors.TransportError(
            f"{prof.name}: gave up after {prof.retry.max_attempts} attempts ({last})"
        )


def _parse_chat_response(resp: httpx.Response) -> tuple[str, dict]:
    try:
        payload = resp.json()
        content = payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise errors.ProtocolError(f"response lacks assistant content: {resp.text[:200]}") from None
    if not isinstance(content, str):
        raise errors.ProtocolError("assistant content is not a string")
    usage = payload.get("usage") or {}
    return content, usage if isinstance(usage, dict) else {}
