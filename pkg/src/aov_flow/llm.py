"""OpenAI-compatible chat-completion client."""

from __future__ import annotations

import asyncio
import json
from collections.abc import Awaitable, Callable
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Literal

import httpx
import structlog
from tenacity import AsyncRetrying, RetryCallState, retry_if_exception_type, stop_after_attempt, wait_random_exponential

from .errors import LlmAuthError, LlmProtocolError, LlmRequestError, LlmTransportError
from .logs import register_secret

if TYPE_CHECKING:
    from .config import Config

logger = structlog.get_logger(__name__)

DEFAULT_API_BASE = "https://api.openai.com/v1"
DEFAULT_MODEL = "gpt-4o-mini"
MAX_BACKOFF = 60.0

Role = Literal["system", "user", "assistant"]


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown chat role: {self.role!r}")
        if self.role != "assistant" and not self.content.strip():
            raise ValueError(f"{self.role} message must not be empty")


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.7
    max_tokens: int = 4096
    model: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("completion request needs at least one message")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def build(cls, prompt: str, persona: str = "", **kwargs: Any) -> CompletionRequest:
        """One user turn, preceded by the persona as a system turn when given."""
        messages = [ChatMessage("system", persona)] if persona.strip() else []
        messages.append(ChatMessage("user", prompt))
        return cls(tuple(messages), **kwargs)

    def to_body(self, default_model: str) -> dict[str, Any]:
        """Chat-completions request body."""
        return {
            "model": self.model or default_model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


def encode_body(body: dict[str, Any]) -> bytes:
    """Exact bytes sent on the wire for a request body."""
    return json.dumps(body, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str = DEFAULT_API_BASE
    api_key: str = field(default="", repr=False)
    model: str = DEFAULT_MODEL
    timeout: float = 120.0
    attempts: int = 3
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    max_inflight: int = 8

    def validate(self) -> list[str]:
        """Return configuration errors; empty when usable."""
        errors = []
        url = httpx.URL(self.base_url)
        if url.scheme not in ("http", "https") or not url.host:
            errors.append(f"invalid provider base URL: {self.base_url!r}")
        if self.attempts < 1:
            errors.append("retry attempts must be at least 1")
        if self.max_inflight < 1:
            errors.append("max in-flight requests must be at least 1")
        if not self.api_key:
            errors.append("FLOW_API_KEY is not set")
        return errors


@dataclass
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    requests: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def add(self, other: Usage) -> None:
        self.prompt_tokens += other.prompt_tokens
        self.completion_tokens += other.completion_tokens
        self.requests += other.requests

    def as_dict(self) -> dict[str, int]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
            "requests": self.requests,
        }


@dataclass(frozen=True)
class Completion:
    content: str
    usage: Usage


class _RetryableStatus(Exception):
    def __init__(self, status: int):
        self.status = status
        super().__init__(f"HTTP {status}")


def _log_retry(state: RetryCallState) -> None:
    """tenacity ``before_sleep`` hook."""
    exc = state.outcome.exception() if state.outcome else None
    logger.warning(
        "llm attempt failed, backing off",
        attempt=state.attempt_number,
        error=str(exc),
        sleep=round(state.next_action.sleep, 3) if state.next_action else None,
    )


class LlmClient:
    """Chat-completion client with bounded concurrency, retries and usage accounting.

    Safe for concurrent use from one event loop.
    """

    def __init__(
        self,
        config: ProviderConfig,
        transport: httpx.AsyncBaseTransport | None = None,
        sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
    ):
        self.config = config
        self.usage = Usage()
        self._sleep = sleep
        self._semaphore = asyncio.Semaphore(config.max_inflight)
        self._http = httpx.AsyncClient(
            base_url=config.base_url,
            timeout=config.timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {config.api_key}", "Content-Type": "application/json"},
        )
        register_secret(config.api_key)

    @classmethod
    def from_config(cls, config: Config, transport: httpx.AsyncBaseTransport | None = None) -> LlmClient:
        """Client for the provider settings in ``config``."""
        return cls(config.provider_config(), transport=transport)

    async def __aenter__(self) -> LlmClient:
        return self

    async def __aexit__(self, *exc_info: object) -> None:
        await self.aclose()

    async def aclose(self) -> None:
        await self._http.aclose()

    async def complete(self, request: CompletionRequest) -> Completion:
        """Send one request, retrying rate limits and transient failures with backoff."""
        body = encode_body(request.to_body(self.config.model))
        retrying = AsyncRetrying(
            stop=stop_after_attempt(self.config.attempts),
            wait=wait_random_exponential(
                multiplier=self.config.backoff_base, exp_base=self.config.backoff_factor, max=MAX_BACKOFF
            ),
            retry=retry_if_exception_type((_RetryableStatus, httpx.TransportError)),
            sleep=self._sleep,
            before_sleep=_log_retry,
            reraise=True,
        )
        async with self._semaphore:
            try:
                async for attempt in retrying:
                    with attempt:
                        response = await self._send(body, attempt.retry_state.attempt_number)
            except (_RetryableStatus, httpx.TransportError) as exc:
                raise LlmTransportError(f"provider unavailable after {self.config.attempts} attempts: {exc}") from exc
        completion = self._parse(response)
        self.usage.add(completion.usage)
        return completion

    async def _send(self, body: bytes, attempt: int) -> httpx.Response:
        """POST one attempt and classify its HTTP status."""
        logger.debug("llm request", attempt=attempt, model=self.config.model, bytes=len(body))
        response = await self._http.post("/chat/completions", content=body)
        logger.info("llm response", attempt=attempt, status=response.status_code)
        status = response.status_code
        if status == 429 or status >= 500:
            raise _RetryableStatus(status)
        if status in (401, 403):
            raise LlmAuthError(f"provider rejected credentials (HTTP {status})")
        if 400 <= status < 500:
            raise LlmRequestError(f"provider rejected request (HTTP {status}): {response.text[:200]}")
        if status != 200:
            raise LlmProtocolError(f"unexpected HTTP {status}")
        return response

    @staticmethod
    def _parse(response: httpx.Response) -> Completion:
        """Extract the first choice's content and the usage counters."""
        try:
            payload = response.json()
        except ValueError as exc:
            raise LlmProtocolError(f"response is not JSON: {response.text[:200]!r}") from exc
        choices = payload.get("choices") if isinstance(payload, dict) else None
        if not isinstance(choices, list) or not choices:
            raise LlmProtocolError("response has no choices")
        message = choices[0].get("message") if isinstance(choices[0], dict) else None
        content = message.get("content") if isinstance(message, dict) else None
        if not isinstance(content, str):
            raise LlmProtocolError("first choice has no message content")
        usage_raw = payload.get("usage")
        if usage_raw is None:
            usage_raw = {}
        if not isinstance(usage_raw, dict):
            raise LlmProtocolError(f"usage must be an object, got {type(usage_raw).__name__}")
        try:
            usage = Usage(
                prompt_tokens=int(usage_raw.get("prompt_tokens", 0) or 0),
                completion_tokens=int(usage_raw.get("completion_tokens", 0) or 0),
                requests=1,
            )
        except (TypeError, ValueError) as exc:
            raise LlmProtocolError(f"usage token counts are not integers: {usage_raw!r}") from exc
        return Completion(content, usage)
