"""Uniform text-generation client: live model servers, scripted mock, record/replay cache."""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .stores import StoreError, read_jsonl

DEFAULT_TIMEOUT_S = 30.0
DEFAULT_RETRIES = 3
ENV_BACKEND_URL = "BETTERCHECK_BACKEND_URL"


class BackendUnavailable(Exception):
    """The backend could not be reached after all retries."""


class ProtocolError(Exception):
    """The backend replied with something the adapter cannot parse."""

    def __init__(self, message: str, raw: bytes):
        self.raw = raw
        super().__init__(message)


class CacheMiss(Exception):
    """Replay-mode cache lookup failed."""


class MockKeyMissing(Exception):
    """Strict mock has no scripted response for a request."""


@dataclass(frozen=True)
class GenerationRequest:
    model: str
    prompt: str
    image: bytes | None = None
    repeat_index: int = 0
    temperature: float | None = None
    # Bookkeeping, not sent on the wire; the mock keys on these.
    image_id: str | None = None
    prompt_kind: str = "caption"
    sentence_digest: str | None = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.repeat_index < 0:
            raise ValueError("repeat_index must be non-negative")


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    model: str
    latency_ms: int
    source: str  # live | mock | cache


def request_digest(req: GenerationRequest) -> str:
    image_hash = hashlib.sha256(req.image or b"").hexdigest()
    payload = json.dumps(
        [req.model, req.prompt, image_hash, req.repeat_index, req.temperature],
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class OllamaBackend:
    """Adapter for the local model-server protocol: POST /api/generate."""

    source = "live"

    def __init__(self, base_url: str, timeout: float = DEFAULT_TIMEOUT_S, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def generate(self, req: GenerationRequest) -> str:
        body = {"model": req.model, "prompt": req.prompt, "stream": False}
        if req.image is not None:
            body["images"] = [base64.b64encode(req.image).decode("ascii")]
        if req.temperature is not None:
            body["options"] = {"temperature": req.temperature}
        resp = self.session.post(f"{self.base_url}/api/generate", json=body, timeout=self.timeout)
        resp.raise_for_status()
        try:
            return resp.json()["response"]
        except (ValueError, KeyError) as exc:
            raise ProtocolError(f"malformed backend reply: {exc}", raw=resp.content) from exc


class ChatCompletionsBackend:
    """Adapter for the chat-completions protocol (hosted models such as GPT-4o)."""

    source = "live"

    def __init__(self, base_url: str, api_key: str | None = None, timeout: float = DEFAULT_TIMEOUT_S, session=None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    def generate(self, req: GenerationRequest) -> str:
        content: list[dict] | str
        if req.image is not None:
            b64 = base64.b64encode(req.image).decode("ascii")
            content = [
                {"type": "text", "text": req.prompt},
                {"type": "image_url", "image_url": {"url": f"data:image/jpeg;base64,{b64}"}},
            ]
        else:
            content = req.prompt
        body: dict = {"model": req.model, "messages": [{"role": "user", "content": content}]}
        if req.temperature is not None:
            body["temperature"] = req.temperature
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = self.session.post(
            f"{self.base_url}/v1/chat/completions", json=body, headers=headers, timeout=self.timeout
        )
        resp.raise_for_status()
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError) as exc:
            raise ProtocolError(f"malformed backend reply: {exc}", raw=resp.content) from exc


class MockBackend:
    """Deterministic scripted backend for offline runs and tests.

    Script records are keyed by (image_id, prompt_kind, repeat_index) with an
    optional sentence_digest for check prompts; a null repeat_index matches any
    repeat. Lookup prefers the most specific key.
    """

    source = "mock"

    def __init__(self, script: dict, default: str | None = None):
        self.script = script
        self.default = default

    @classmethod
    def from_file(cls, script_file: Path | str, default: str | None = None) -> "MockBackend":
        script: dict = {}
        for lineno, rec in read_jsonl(script_file):
            try:
                key = (
                    rec["image_id"],
                    rec["prompt_kind"],
                    rec.get("repeat_index"),
                    rec.get("sentence_digest"),
                )
                response = rec["response"]
            except KeyError as exc:
                raise StoreError(f"script record missing field {exc}", path=script_file, line=lineno)
            if key in script:
                raise StoreError(f"duplicate script key {key!r}", path=script_file, line=lineno)
            script[key] = response
        return cls(script, default=default)

    def generate(self, req: GenerationRequest) -> str:
        candidates = [
            (req.image_id, req.prompt_kind, req.repeat_index, req.sentence_digest),
            (req.image_id, req.prompt_kind, None, req.sentence_digest),
            (req.image_id, req.prompt_kind, req.repeat_index, None),
            (req.image_id, req.prompt_kind, None, None),
        ]
        for key in candidates:
            if key in self.script:
                return self.script[key]
        if self.default is not None:
            return self.default
        raise MockKeyMissing(f"no scripted response for {candidates[0]!r}")


class ResponseCache:
    """Digest-keyed on-disk cache with record / replay / off modes."""

    def __init__(self, directory: Path | str, mode: str = "record"):
        if mode not in ("record", "replay", "off"):
            raise ValueError(f"unknown cache mode {mode!r}")
        self.directory = Path(directory)
        self.mode = mode
        self._lock = threading.Lock()
        if mode == "record":
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.directory / f"{digest}.json"

    def get(self, digest: str) -> str | None:
        if self.mode == "off":
            return None
        path = self._path(digest)
        if not path.exists():
            if self.mode == "replay":
                raise CacheMiss(f"no cached response for digest {digest}")
            return None
        return json.loads(path.read_text(encoding="utf-8"))["text"]

    def put(self, digest: str, text: str) -> None:
        if self.mode != "record":
            return
        with self._lock:
            tmp = self._path(digest).with_suffix(".tmp")
            tmp.write_text(json.dumps({"text": text}, ensure_ascii=False), encoding="utf-8")
            os.replace(tmp, self._path(digest))


class Gateway:
    """Front door for all generation calls: caching, retries, latency accounting."""

    def __init__(
        self,
        backend,
        cache: ResponseCache | None = None,
        retries: int = DEFAULT_RETRIES,
        backoff_s: float = 0.5,
        max_inflight: int = 4,
    ):
        self.backend = backend
        self.cache = cache
        self.retries = retries
        self.backoff_s = backoff_s
        self._inflight = threading.Semaphore(max_inflight)
        self.attempt_counts: list[int] = []

    def generate(self, req: GenerationRequest) -> GenerationResponse:
        digest = request_digest(req)
        if self.cache is not None:
            cached = self.cache.get(digest)
            if cached is not None:
                return GenerationResponse(text=cached, model=req.model, latency_ms=0, source="cache")

        last_exc: Exception | None = None
        with self._inflight:
            for attempt in range(1, self.retries + 1):
                start = time.monotonic()
                try:
                    text = self.backend.generate(req)
                    latency_ms = int((time.monotonic() - start) * 1000)
                    self.attempt_counts.append(attempt)
                    if self.cache is not None:
                        self.cache.put(digest, text)
                    return GenerationResponse(
                        text=text, model=req.model, latency_ms=latency_ms, source=self.backend.source
                    )
                except (requests.ConnectionError, requests.Timeout, requests.HTTPError) as exc:
                    last_exc = exc
                    if attempt < self.retries:
                        time.sleep(self.backoff_s * 2 ** (attempt - 1))
        self.attempt_counts.append(self.retries)
        raise BackendUnavailable(f"backend failed after {self.retries} attempts: {last_exc}") from last_exc


def backend_url_from_env(cli_value: str | None = None) -> str | None:
    return cli_value or os.environ.get(ENV_BACKEND_URL)
