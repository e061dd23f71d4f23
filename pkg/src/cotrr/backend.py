"""Chat-completions client: request types, retries, caching, conformance.

The engine talks one wire protocol (HTTP POST ``{base_url}/chat/completions``
with a JSON body of model, temperature, messages) regardless of provider.
Everything above the transport is provider-agnostic: bounded concurrency,
exponential-backoff retries on transient failures, and a content-addressed
on-disk response cache keyed by the full request.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import requests

DEFAULT_TEMPERATURE = 0.0
ROLES = ("system", "user")


class BackendError(Exception):
    """Base for everything the chat path can raise."""


class TransientBackendError(BackendError):
    """Timeout, HTTP 429, or HTTP 5xx; worth retrying."""


class PermanentBackendError(BackendError):
    """Protocol error (4xx other than 429); retrying cannot help."""


class MalformedReplyError(BackendError):
    """Endpoint answered but no completion text could be read."""


class RetriesExhausted(BackendError):
    """All retry attempts failed; carries the attempt count."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    data: bytes

    def data_url(self) -> str:
        b64 = base64.b64encode(self.data).decode("ascii")
        return f"data:{self.media_type};base64,{b64}"


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"message role must be one of {ROLES}, got {self.role!r}")
        if not self.parts:
            raise ValueError("message needs at least one content part")

    @classmethod
    def user(cls, *parts) -> "Message":
        return cls("user", tuple(parts))

    @classmethod
    def system(cls, text: str) -> "Message":
        return cls("system", (TextPart(text),))

    def text_content(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request needs at least one message")

    def with_extra_user_text(self, text: str) -> "ChatRequest":
        return ChatRequest(
            model=self.model,
            temperature=self.temperature,
            messages=self.messages + (Message.user(TextPart(text)),),
        )


@dataclass
class ChatResponse:
    text: str
    from_cache: bool
    attempts: int


def cache_key(request: ChatRequest) -> str:
    """sha256 over model, temperature, roles, text parts, raw image bytes."""
    canon: list = [request.model, float(request.temperature)]
    for msg in request.messages:
        entry: list = [msg.role]
        for part in msg.parts:
            if isinstance(part, TextPart):
                entry.append(["text", part.text])
            elif isinstance(part, ImagePart):
                digest = hashlib.sha256(part.data).hexdigest()
                entry.append(["image", part.media_type, digest])
            else:
                raise TypeError(f"unknown content part {type(part).__name__}")
        canon.append(entry)
    blob = json.dumps(canon, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """One file per request digest; atomic writes; safe concurrent readers."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, request: ChatRequest) -> dict | None:
        path = self._path(cache_key(request))
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, ValueError):
            return None

    def put(self, request: ChatRequest, text: str, attempts: int) -> None:
        key = cache_key(request)
        payload = json.dumps(
            {
                "model": request.model,
                "timestamp": time.time(),
                "attempts": attempts,
                "text": text,
            },
            ensure_ascii=False,
        )
        tmp = self._path(key).with_suffix(f".tmp.{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(payload, encoding="utf-8")
        os.replace(tmp, self._path(key))


@dataclass
class RetryPolicy:
    """Exponential backoff with full jitter."""

    max_attempts: int = 5
    initial_backoff: float = 1.0
    factor: float = 2.0
    sleep: Callable[[float], None] = time.sleep
    rng: random.Random = field(default_factory=random.Random)

    def backoff(self, attempt: int) -> float:
        cap = self.initial_backoff * self.factor ** (attempt - 1)
        return self.rng.uniform(0.0, cap)


class Backend:
    """Transport plus retries, caching, and an in-flight request bound.

    Safe for concurrent use from many workers; at most ``parallelism``
    requests are in flight at once.
    """

    def __init__(
        self,
        transport,
        *,
        model: str,
        temperature: float = DEFAULT_TEMPERATURE,
        cache: ResponseCache | None = None,
        retry: RetryPolicy | None = None,
        parallelism: int = 8,
    ):
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.transport = transport
        self.model = model
        self.temperature = temperature
        self.cache = cache
        self.retry = retry or RetryPolicy()
        self.parallelism = parallelism
        self._gate = threading.Semaphore(parallelism)

    def request(self, messages: Sequence[Message]) -> ChatRequest:
        return ChatRequest(
            model=self.model, temperature=self.temperature, messages=tuple(messages)
        )

    def chat(self, request: ChatRequest) -> ChatResponse:
        if self.cache is not None:
            hit = self.cache.get(request)
            if hit is not None:
                return ChatResponse(
                    text=hit["text"], from_cache=True, attempts=int(hit["attempts"])
                )

        last: Exception | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            try:
                with self._gate:
                    text = self.transport.send(request)
            except TransientBackendError as exc:
                last = exc
                if attempt < self.retry.max_attempts:
                    self.retry.sleep(self.retry.backoff(attempt))
                continue
            if not text:
                raise MalformedReplyError("endpoint returned an empty completion")
            if self.cache is not None:
                self.cache.put(request, text, attempt)
            return ChatResponse(text=text, from_cache=False, attempts=attempt)
        raise RetriesExhausted(
            f"gave up after {self.retry.max_attempts} attempts: {last}",
            attempts=self.retry.max_attempts,
        )


class HttpTransport:
    """Speaks the chat-completions protocol against one endpoint."""

    def __init__(self, base_url: str, api_key: str, timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    @staticmethod
    def _wire_messages(request: ChatRequest) -> list[dict]:
        wire = []
        for msg in request.messages:
            content = []
            for part in msg.parts:
                if isinstance(part, TextPart):
                    content.append({"type": "text", "text": part.text})
                else:
                    content.append(
                        {"type": "image_url", "image_url": {"url": part.data_url()}}
                    )
            wire.append({"role": msg.role, "content": content})
        return wire

    def send(self, request: ChatRequest) -> str:
        body = {
            "model": request.model,
            "temperature": request.temperature,
            "messages": self._wire_messages(request),
        }
        try:
            resp = self._session().post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"request failed: {exc}") from exc

        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code} from endpoint")
        if resp.status_code >= 400:
            raise PermanentBackendError(
                f"HTTP {resp.status_code} from endpoint: {resp.text[:300]}"
            )
        try:
            payload = resp.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise MalformedReplyError(f"cannot read completion text: {exc}") from exc
        if isinstance(content, list):
            content = "".join(
                c.get("text", "") for c in content if isinstance(c, dict)
            )
        if not isinstance(content, str) or not content:
            raise MalformedReplyError("completion content is empty")
        return content


class RecordingTransport:
    """Wraps a transport and keeps every outbound request for assertions."""

    def __init__(self, inner):
        self.inner = inner
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @property
    def send_count(self) -> int:
        return len(self.requests)

    def send(self, request: ChatRequest) -> str:
        with self._lock:
            self.requests.append(request)
        return self.inner.send(request)


def validate_request_conformance(
    requests_seen: Sequence[ChatRequest], temperature: float = 0.0
) -> list[str]:
    """Flag every request that strays from the demanded sampling temperature."""
    violations = []
    for i, req in enumerate(requests_seen):
        if req.temperature != temperature:
            violations.append(
                f"request {i}: temperature {req.temperature} != {temperature}"
            )
    return violations


@lru_cache(maxsize=4096)
def _encode_image_cached(path: str, max_side: int, quality: int) -> ImagePart:
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("RGB")
        longest = max(img.size)
        if longest > max_side:
            scale = max_side / longest
            img = img.resize(
                (max(1, round(img.width * scale)), max(1, round(img.height * scale))),
                Image.LANCZOS,
            )
        buf = io.BytesIO()
        img.save(buf, format="JPEG", quality=quality)
    return ImagePart(media_type="image/jpeg", data=buf.getvalue())


def encode_image_file(
    path: str | Path, max_side: int = 512, quality: int = 85
) -> ImagePart:
    """Re-encode an image for transmission: RGB JPEG, longest side clamped.

    The re-encoded bytes (not the source file) feed the cache key, so cache
    entries stay stable across differently-stored copies of the same pixels.
    """
    return _encode_image_cached(str(path), max_side, quality)
