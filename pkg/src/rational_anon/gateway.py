"""Chat-completion access for every role.

Three backend kinds share one ``complete`` surface:

* ``live``: POST ``{base_url}/chat/completions`` against any OpenAI-compatible
  server (non-streaming), with exponential-backoff retries.
* ``scripted``: canned responses for tests.
* ``replay``: responses looked up by request digest in a cassette file.

Any non-replay backend can additionally record every exchange to a cassette
(``record_to``), which is how deterministic end-to-end fixtures are made.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("live", "scripted", "replay")
DEFAULT_RETRY_LIMIT = 3
BACKOFF_BASE_S = 1.0


class GatewayError(Exception):
    """Base class for backend failures."""


class TransportError(GatewayError):
    """Network failure or HTTP >= 500 that persisted through every retry."""


class ProtocolError(GatewayError):
    """The server answered, but not with a usable completion envelope."""


class AuthError(GatewayError):
    """HTTP 401/403."""


class CassetteMiss(GatewayError):
    """Replay found no recorded response for the request digest."""


class CassetteIOError(GatewayError, OSError):
    """Cassette could not be read or written."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad chat role {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise ValueError(f"{self.role} message content must be non-empty")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    top_p: float | None = None
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.top_p is not None and not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p {self.top_p} outside (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    base_url: str | None = None
    model_name: str | None = None
    cassette_path: str | None = None
    api_key_env: str | None = None
    record_to: str | None = None
    responses: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "live" and not (self.base_url and self.model_name):
            raise ValueError("live backend needs base_url and model_name")
        if self.kind == "replay" and not self.cassette_path:
            raise ValueError("replay backend needs cassette_path")
        if self.kind == "replay" and self.record_to:
            raise ValueError("a replay backend cannot record")
        if self.responses is not None:
            object.__setattr__(self, "responses", tuple(self.responses))

    def to_dict(self) -> dict[str, Any]:
        d = {
            "kind": self.kind,
            "base_url": self.base_url,
            "model_name": self.model_name,
            "cassette_path": self.cassette_path,
            "api_key_env": self.api_key_env,
            "record_to": self.record_to,
        }
        if self.responses is not None:
            d["responses"] = list(self.responses)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> BackendDescriptor:
        return cls(
            kind=d["kind"],
            base_url=d.get("base_url"),
            model_name=d.get("model_name"),
            cassette_path=d.get("cassette_path"),
            api_key_env=d.get("api_key_env"),
            record_to=d.get("record_to"),
            responses=d.get("responses"),
        )


def _as_message_dicts(messages: Iterable[ChatMessage | Mapping[str, str]]) -> list[dict[str, str]]:
    out = []
    for m in messages:
        if isinstance(m, ChatMessage):
            out.append(m.to_dict())
        else:
            out.append({"role": m["role"], "content": m["content"]})
    return out


def build_request(messages, params: GenerationParams, model_name: str | None) -> dict[str, Any]:
    """The chat-completions request body; also the input to the digest."""
    body: dict[str, Any] = {
        "model": model_name or "",
        "messages": _as_message_dicts(messages),
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "stream": False,
    }
    if params.top_p is not None:
        body["top_p"] = params.top_p
    return body


def request_digest(request: Mapping[str, Any]) -> str:
    canon = json.dumps(request, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Cassettes
# ---------------------------------------------------------------------------


class Cassette:
    """Ordered digest -> response store backed by a JSON array file.

    Appends are serialized by a lock and flushed with an atomic rename, so a
    single cassette may be shared by several recording backends and threads.
    """

    def __init__(self, path: str | Path, entries: Sequence[Mapping[str, str]] = ()):
        self.path = Path(path)
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        for e in entries:
            digest = e["request_digest"]
            if digest in self._entries:
                raise CassetteIOError(f"duplicate digest {digest[:12]} in {self.path}")
            self._entries[digest] = e["response_text"]

    @classmethod
    def load(cls, path: str | Path, missing_ok: bool = False) -> Cassette:
        p = Path(path)
        if not p.exists():
            if missing_ok:
                return cls(p)
            raise CassetteIOError(f"cassette not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CassetteIOError(f"unreadable cassette {p}: {exc}") from exc
        if not isinstance(data, list):
            raise CassetteIOError(f"cassette {p} is not a JSON array")
        return cls(p, data)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, digest: object) -> bool:
        return digest in self._entries

    def get(self, digest: str) -> str:
        try:
            return self._entries[digest]
        except KeyError:
            raise CassetteMiss(f"no recorded response for digest {digest[:12]} in {self.path}") from None

    def entries(self) -> list[dict[str, str]]:
        return [{"request_digest": d, "response_text": r} for d, r in self._entries.items()]

    def record(self, digest: str, response_text: str) -> bool:
        """Append unless the digest is already present. Returns True if appended."""
        with self._lock:
            if digest in self._entries:
                return False
            self._entries[digest] = response_text
            self._flush()
            return True

    def _flush(self) -> None:
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".cassette-", suffix=".json")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(self.entries(), fh, ensure_ascii=False, indent=1)
                fh.write("\n")
            os.chmod(tmp, 0o644)  # mkstemp creates 0600
            os.replace(tmp, self.path)
        except OSError as exc:
            raise CassetteIOError(f"cannot write cassette {self.path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class Backend:
    """Common surface: ``complete(messages, params) -> str`` plus a call counter."""

    model_name: str | None = None

    def __init__(self) -> None:
        self.calls = 0
        self._count_lock = threading.Lock()

    def complete(self, messages, params: GenerationParams) -> str:
        with self._count_lock:
            self.calls += 1
        return self._complete(build_request(messages, params, self.model_name))

    def _complete(self, request: dict[str, Any]) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass


Responder = Callable[[list[dict[str, str]], dict[str, Any]], str]


class ScriptedBackend(Backend):
    """Answers from a fixed script.

    ``script`` is either a sequence of strings (served in order, the last one
    repeated once exhausted) or a callable ``(messages, request) -> str``.
    """

    def __init__(self, script: Sequence[str] | Responder, model_name: str | None = None):
        super().__init__()
        self.model_name = model_name
        self._lock = threading.Lock()
        if callable(script):
            self._responder: Responder | None = script
            self._script: list[str] = []
        else:
            self._responder = None
            self._script = list(script)
            if not self._script:
                raise ValueError("scripted backend needs at least one response")
        self._pos = 0
        self.requests: list[dict[str, Any]] = []

    def _complete(self, request: dict[str, Any]) -> str:
        with self._lock:
            self.requests.append(request)
            if self._responder is not None:
                return self._responder(request["messages"], request)
            text = self._script[min(self._pos, len(self._script) - 1)]
            self._pos += 1
            return text


class ReplayBackend(Backend):
    def __init__(self, cassette: Cassette, model_name: str | None = None):
        super().__init__()
        self.cassette = cassette
        self.model_name = model_name

    def _complete(self, request: dict[str, Any]) -> str:
        return self.cassette.get(request_digest(request))


class LiveBackend(Backend):
    def __init__(
        self,
        base_url: str,
        model_name: str,
        api_key: str | None = None,
        retry_limit: int = DEFAULT_RETRY_LIMIT,
        backoff_base: float = BACKOFF_BASE_S,
        timeout: float = 300.0,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        super().__init__()
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model_name = model_name
        self.retry_limit = retry_limit
        self.backoff_base = backoff_base
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def _complete(self, request: dict[str, Any]) -> str:
        last: Exception | None = None
        for attempt in range(self.retry_limit + 1):
            if attempt:
                delay = self.backoff_base * 2 ** (attempt - 1)
                logger.warning("retrying %s in %.1fs (attempt %d): %s", self.url, delay, attempt + 1, last)
                self._sleep(delay)
            try:
                resp = self._client.post(self.url, json=request)
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"{self.url} answered HTTP {resp.status_code}")
            if resp.status_code >= 500 or resp.status_code == 429:
                last = TransportError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ProtocolError(f"{self.url} rejected the request: HTTP {resp.status_code} {resp.text[:200]}")
            return _parse_envelope(resp)
        raise TransportError(f"{self.url} failed after {self.retry_limit + 1} attempts: {last}")

    def close(self) -> None:
        self._client.close()


def _parse_envelope(resp: httpx.Response) -> str:
    try:
        data = resp.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed completion envelope: {exc!r}") from exc
    if not isinstance(content, str):
        raise ProtocolError("completion content is not a string")
    return content


class RecordingBackend(Backend):
    """Forwards to ``inner`` and appends each (digest, response) to a cassette."""

    def __init__(self, inner: Backend, cassette: Cassette):
        super().__init__()
        self.inner = inner
        self.cassette = cassette
        self.model_name = inner.model_name

    def _complete(self, request: dict[str, Any]) -> str:
        with self.inner._count_lock:
            self.inner.calls += 1
        text = self.inner._complete(request)
        self.cassette.record(request_digest(request), text)
        return text

    def close(self) -> None:
        self.inner.close()


def open_backend(
    desc: BackendDescriptor,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
    cassettes: dict[str, Cassette] | None = None,
    **live_kwargs: Any,
) -> Backend:
    """Instantiate the backend a descriptor describes.

    ``cassettes`` is a path-keyed cache: descriptors that name the same file
    end up sharing one Cassette object (and its append lock).
    """
    cache = cassettes if cassettes is not None else {}

    def cassette(path: str, missing_ok: bool) -> Cassette:
        key = str(Path(path).resolve())
        if key not in cache:
            cache[key] = Cassette.load(path, missing_ok=missing_ok)
        return cache[key]

    if desc.kind == "replay":
        return ReplayBackend(cassette(desc.cassette_path, missing_ok=False), desc.model_name)
    if desc.kind == "scripted":
        backend: Backend = ScriptedBackend(desc.responses or ("",), desc.model_name)
    else:
        api_key = os.environ.get(desc.api_key_env) if desc.api_key_env else None
        backend = LiveBackend(desc.base_url, desc.model_name, api_key=api_key, retry_limit=retry_limit, **live_kwargs)
    if desc.record_to:
        backend = RecordingBackend(backend, cassette(desc.record_to, missing_ok=True))
    return backend


def complete(backend: Backend | BackendDescriptor, messages, params: GenerationParams) -> str:
    """Send one chat request and return the assistant text."""
    if isinstance(backend, BackendDescriptor):
        handle = open_backend(backend)
        try:
            return handle.complete(messages, params)
        finally:
            handle.close()
    return backend.complete(messages, params)


def record_run(desc: BackendDescriptor, cassette_path: str | Path) -> BackendDescriptor:
    """Wrap a live (or scripted) descriptor so every exchange lands in a cassette."""
    if desc.kind == "replay":
        raise ValueError("cannot record a replay backend")
    return replace(desc, record_to=str(cassette_path))
