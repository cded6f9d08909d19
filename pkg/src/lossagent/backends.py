"""Chat backends: scripted (offline, deterministic) and HTTP chat-completions."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Callable, Literal, Mapping, Optional, Protocol, Sequence

from .errors import BackendError

API_URL_ENV = "LOSSAGENT_API_URL"
API_KEY_ENV = "LOSSAGENT_API_KEY"


@dataclass(frozen=True)
class ChatMessage:
    role: Literal["system", "user", "assistant"]
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


class ChatBackend(Protocol):
    def complete(self, messages: Sequence[ChatMessage], temperature: float) -> str: ...


def prompt_hash(messages: Sequence[ChatMessage]) -> str:
    blob = json.dumps([m.to_dict() for m in messages], sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def chat(backend: ChatBackend, messages: Sequence[ChatMessage], temperature: float = 0.2) -> str:
    if not messages:
        raise ValueError("chat needs at least one message")
    for m in messages:
        if not m.content:
            raise ValueError(f"outgoing {m.role} message is empty")
    return backend.complete(list(messages), temperature)


class ScriptedBackend:
    """Offline backend whose reply is a pure function of the prompt.

    ``responder(messages, temperature)`` returns the reply text; raising
    :class:`BackendError` simulates a transport failure.
    """

    def __init__(self, responder: Callable[[Sequence[ChatMessage], float], str]):
        self.responder = responder

    def complete(self, messages, temperature):
        return self.responder(messages, temperature)

    @classmethod
    def from_mapping(cls, replies: Mapping[str, str], default: Optional[str] = None) -> "ScriptedBackend":
        """Look replies up by :func:`prompt_hash`."""

        def respond(messages, temperature):
            key = prompt_hash(messages)
            if key in replies:
                return replies[key]
            if default is None:
                raise BackendError(f"no scripted reply for prompt {key[:12]}", "scripted")
            return default

        return cls(respond)

    @classmethod
    def constant(cls, reply: str) -> "ScriptedBackend":
        return cls(lambda messages, temperature: reply)


class SequenceBackend:
    """Replays a fixed list of replies in order; entries that are exceptions are raised."""

    def __init__(self, replies: Sequence[object]):
        self.replies = list(replies)
        self.calls = 0

    def complete(self, messages, temperature):
        if self.calls >= len(self.replies):
            raise BackendError("scripted reply sequence exhausted", "scripted")
        item = self.replies[self.calls]
        self.calls += 1
        if isinstance(item, BaseException):
            raise item
        return str(item)


class HTTPChatBackend:
    """One chat-completions POST per call.

    Request ``{model, messages: [{role, content}], temperature}``; the reply is
    ``choices[0].message.content``.
    """

    def __init__(
        self,
        url: Optional[str] = None,
        api_key: Optional[str] = None,
        model: str = "default",
        timeout: float = 60.0,
        client=None,
    ):
        self.url = url or os.environ.get(API_URL_ENV)
        if not self.url:
            raise BackendError(f"no endpoint configured; set {API_URL_ENV}", "transport")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.model = model
        self.timeout = timeout
        self._client = client

    def complete(self, messages, temperature):
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "messages": [m.to_dict() for m in messages],
            "temperature": temperature,
        }
        try:
            if self._client is not None:
                resp = self._client.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            else:
                resp = httpx.post(self.url, json=payload, headers=headers, timeout=self.timeout)
        except httpx.TimeoutException as exc:
            raise BackendError(f"request timed out after {self.timeout}s", "timeout") from exc
        except httpx.HTTPError as exc:
            raise BackendError(str(exc), "transport") from exc
        if not 200 <= resp.status_code < 300:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", "http_status")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat response: {exc}", "malformed") from exc
        if not isinstance(content, str):
            raise BackendError("chat response content is not text", "malformed")
        return content
