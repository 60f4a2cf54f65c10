import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import requests
from django.conf import settings
from django.db import models

logger = logging.getLogger(__name__)

RETRYABLE_STATUSES = {429, 500, 502, 503, 504}
ROLES = ("system", "user", "assistant")


class LlmError(Exception):
    pass


class AuthMissing(LlmError):
    pass


class ProviderError(LlmError):
    pass


class CassetteMismatch(LlmError):
    pass


class CassetteExhausted(LlmError):
    pass


class IoMode(models.TextChoices):
    LIVE = "live", "Live"
    RECORD = "record", "Record"
    REPLAY = "replay", "Replay"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")
        if not self.content:
            raise ValueError("chat message content must be non-empty")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float
    max_tokens: int

    def payload(self) -> dict:
        return {
            "model": self.model,
            "messages": [m.to_dict() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    @property
    def digest(self) -> str:
        canonical = json.dumps(self.payload(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CassetteEntry:
    seq: int
    digest: str
    response: str

    def to_dict(self) -> dict:
        return {"seq": self.seq, "digest": self.digest, "response": self.response}

    @classmethod
    def from_dict(cls, data: dict) -> "CassetteEntry":
        return cls(seq=int(data["seq"]), digest=data["digest"], response=data["response"])


class Cassette:
    """Append-only JSON Lines recording of chat-completion calls, replayed in order."""

    def __init__(self, path: str | Path, position: int = 0):
        self.path = Path(path)
        self.position = position
        self._entries: list[CassetteEntry] | None = None

    @property
    def entries(self) -> list[CassetteEntry]:
        if self._entries is None:
            self._entries = []
            if self.path.exists():
                with self.path.open(encoding="utf-8") as handle:
                    for line in handle:
                        if line.strip():
                            self._entries.append(CassetteEntry.from_dict(json.loads(line)))
        return self._entries

    def next_response(self, request: ChatRequest) -> str:
        if self.position >= len(self.entries):
            raise CassetteExhausted(f"cassette {self.path} has no entry at seq {self.position}")
        entry = self.entries[self.position]
        if entry.digest != request.digest:
            raise CassetteMismatch(
                f"cassette {self.path} seq {entry.seq}: recorded request differs from the one being replayed"
            )
        self.position += 1
        return entry.response

    def append(self, request: ChatRequest, response: str) -> CassetteEntry:
        if self.position < len(self.entries):
            self.truncate(self.position)
        entry = CassetteEntry(seq=self.position, digest=request.digest, response=response)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")
        self.entries.append(entry)
        self.position += 1
        return entry

    def truncate(self, length: int) -> None:
        kept = self.entries[:length]
        with self.path.open("w", encoding="utf-8") as handle:
            for entry in kept:
                handle.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")
        self._entries = kept


class ChatCompletionClient:
    """Chat-completion wire client with record/replay through a cassette."""

    def __init__(
        self,
        io_mode: str = IoMode.LIVE,
        cassette: Cassette | None = None,
        endpoint: str | None = None,
        api_key_env: str | None = None,
        timeout: float | None = None,
        max_attempts: int | None = None,
        backoff_factor: float | None = None,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.io_mode = IoMode(io_mode)
        if self.io_mode != IoMode.LIVE and cassette is None:
            raise LlmError(f"io mode {self.io_mode.value} needs a cassette")
        self.cassette = cassette
        self.endpoint = (endpoint or getattr(settings, "LLM_API_BASE", "https://api.openai.com/v1")).rstrip("/")
        self.api_key_env = api_key_env or getattr(settings, "LLM_API_KEY_ENV", "OPENAI_API_KEY")
        self.timeout = timeout if timeout is not None else float(getattr(settings, "LLM_TIMEOUT_SECONDS", 60))
        self.max_attempts = max_attempts or int(getattr(settings, "LLM_MAX_ATTEMPTS", 3))
        self.backoff_factor = (
            backoff_factor if backoff_factor is not None else float(getattr(settings, "LLM_BACKOFF_FACTOR", 1.0))
        )
        self.session = session or requests.Session()
        self.sleep = sleep

    def _auth_header(self) -> dict[str, str]:
        key = os.getenv(self.api_key_env, "")
        if not key:
            raise AuthMissing(f"environment variable {self.api_key_env} is not set")
        return {"Authorization": f"Bearer {key}"}

    def complete(self, request: ChatRequest) -> str:
        if self.io_mode == IoMode.REPLAY:
            return self.cassette.next_response(request)
        text = self._post(request)
        if self.io_mode == IoMode.RECORD:
            self.cassette.append(request, text)
        return text

    def _post(self, request: ChatRequest) -> str:
        headers = {**self._auth_header(), "Content-Type": "application/json"}
        body = json.dumps(request.payload())
        last_error: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self.session.post(
                    f"{self.endpoint}/chat/completions",
                    headers=headers,
                    data=body,
                    timeout=self.timeout,
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
            else:
                if response.status_code < 400:
                    return self._first_choice(response)
                if response.status_code not in RETRYABLE_STATUSES:
                    raise ProviderError(f"chat completion failed: {response.status_code} {response.text}")
                last_error = ProviderError(f"chat completion failed: {response.status_code} {response.text}")

            if attempt < self.max_attempts:
                delay = self.backoff_factor * (2 ** (attempt - 1))
                logger.warning(
                    "[LLM] attempt %s/%s failed (%s); retrying in %.1fs",
                    attempt,
                    self.max_attempts,
                    last_error,
                    delay,
                )
                self.sleep(delay)

        raise ProviderError(f"chat completion failed after {self.max_attempts} attempts") from last_error

    @staticmethod
    def _first_choice(response) -> str:
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected chat completion body: {response.text[:200]}") from exc
        return content or ""
