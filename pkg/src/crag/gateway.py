"""Generation backends: an OpenAI-style HTTP client and a scripted mock."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .prompts import RenderedPrompt

logger = logging.getLogger(__name__)

API_KEY_ENV = "CRAG_API_KEY"


class GatewayError(Exception):
    retryable = False
    kind = "backend"


class TransportError(GatewayError):
    retryable = True
    kind = "transport"


class RateLimitError(TransportError):
    kind = "rate_limit"


class AuthenticationError(GatewayError):
    kind = "authentication"


class BackendError(GatewayError):
    """The backend answered, but with an error that retrying will not fix."""


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.4
    max_new_tokens: int = 2048
    decoding: str = "greedy"  # "greedy" | "sampled"
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.decoding not in ("greedy", "sampled"):
            raise ValueError(f"unknown decoding {self.decoding!r}")

    @property
    def effective_temperature(self) -> float:
        # Greedy wins over the temperature field.
        return 0.0 if self.decoding == "greedy" else self.temperature

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "decoding": self.decoding,
            "seed": self.seed,
            "effective_temperature": self.effective_temperature,
        }


@dataclass
class Completion:
    text: str
    backend_id: str
    latency_ms: int = 0
    usage: tuple[int, int] | None = None
    retries: int = 0
    error: GatewayError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        return self.backoff_base * (2 ** (attempt - 1))


@dataclass
class InFlightCounter:
    """Thread-safe gauge of concurrent requests with a high-water mark."""

    current: int = 0
    peak: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __enter__(self) -> "InFlightCounter":
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)
        return self

    def __exit__(self, *exc) -> None:
        with self._lock:
            self.current -= 1


class Backend(Protocol):
    backend_id: str

    def complete(self, prompt: str, params: GenerationParams) -> tuple[str, tuple[int, int] | None]: ...


def fingerprint(prompt: str | RenderedPrompt) -> str:
    text = prompt.text if isinstance(prompt, RenderedPrompt) else prompt
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class MockBackend:
    """Looks responses up by prompt fingerprint; unmatched prompts get ``default``.

    ``errors`` maps fingerprints to messages raised as :class:`BackendError`,
    for exercising failure paths.
    """

    def __init__(
        self,
        script: Mapping[str, str] | None = None,
        default: str = "",
        errors: Mapping[str, str] | None = None,
        backend_id: str = "mock",
    ) -> None:
        self.script = dict(script or {})
        self.default = default
        self.errors = dict(errors or {})
        self.backend_id = backend_id
        self.in_flight = InFlightCounter()

    @classmethod
    def from_file(cls, path: str | Path, default: str = "") -> "MockBackend":
        script: dict[str, str] = {}
        errors: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    fp = obj["fingerprint"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad mock script record ({exc})") from exc
                if "error" in obj:
                    errors[fp] = str(obj["error"])
                else:
                    script[fp] = obj["response"]
        return cls(script, default=default, errors=errors)

    def complete(self, prompt: str, params: GenerationParams) -> tuple[str, tuple[int, int] | None]:
        with self.in_flight:
            fp = fingerprint(prompt)
            if fp in self.errors:
                raise BackendError(self.errors[fp])
            text = self.script.get(fp, self.default)
            return text, (len(prompt.split()), len(text.split()))


def mock_backend(script: Mapping[str, str], default: str = "") -> MockBackend:
    return MockBackend(script, default=default)


class HttpBackend:
    """OpenAI-style ``/chat/completions`` client.

    The whole prompt goes out as a single user message unless
    ``system_prompt`` is set. The credential comes from ``CRAG_API_KEY``.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        api_key_env: str = API_KEY_ENV,
        timeout: float = 60.0,
        system_prompt: str | None = None,
        client: httpx.Client | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(api_key_env, "")
        self.api_key_env = api_key_env
        self.system_prompt = system_prompt
        self.backend_id = f"http:{model}"
        self.in_flight = InFlightCounter()
        self._client = client or httpx.Client(timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def payload(self, prompt: str, params: GenerationParams) -> dict:
        messages = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        messages.append({"role": "user", "content": prompt})
        body = {
            "model": self.model,
            "messages": messages,
            "temperature": params.effective_temperature,
            "max_tokens": params.max_new_tokens,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        return body

    def complete(self, prompt: str, params: GenerationParams) -> tuple[str, tuple[int, int] | None]:
        if not self.api_key:
            raise AuthenticationError(f"missing credential: set {self.api_key_env}")
        try:
            with self.in_flight:
                resp = self._client.post(
                    self.endpoint,
                    json=self.payload(prompt, params),
                    headers={"Authorization": f"Bearer {self.api_key}"},
                )
        except httpx.TransportError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc

        status = resp.status_code
        if status in (401, 403):
            raise AuthenticationError(f"HTTP {status}: {resp.text[:200]}")
        if status == 429:
            raise RateLimitError(f"HTTP 429: {resp.text[:200]}")
        if status >= 500:
            raise TransportError(f"HTTP {status}: {resp.text[:200]}")
        if status >= 400:
            raise BackendError(f"HTTP {status}: {resp.text[:200]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
        if not isinstance(text, str):
            raise BackendError("completion content is not a string")
        usage = data.get("usage") or {}
        tokens = None
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            tokens = (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        return text, tokens


def generate(
    prompt: RenderedPrompt | str,
    params: GenerationParams,
    backend: Backend,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> Completion:
    """Run one prompt through ``backend``, retrying transport and rate-limit failures.

    Raises the last :class:`GatewayError` once retries are exhausted, or the
    first non-retryable one immediately.
    """
    text = prompt.text if isinstance(prompt, RenderedPrompt) else prompt
    attempt = 0
    while True:
        attempt += 1
        start = time.monotonic()
        try:
            output, usage = backend.complete(text, params)
        except GatewayError as exc:
            if not exc.retryable or attempt >= retry.max_attempts:
                raise
            delay = retry.delay(attempt)
            logger.warning("attempt %d/%d failed (%s); retrying in %.2fs", attempt, retry.max_attempts, exc, delay)
            sleep(delay)
            continue
        latency = max(0, int((time.monotonic() - start) * 1000))
        return Completion(output, backend.backend_id, latency, usage, retries=attempt - 1)


def batch_generate(
    prompts: Sequence[RenderedPrompt | str],
    params: GenerationParams,
    backend: Backend,
    parallelism: int = 1,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> list[Completion]:
    """Generate for every prompt, keeping input order and isolating failures.

    A failed item comes back as a Completion with empty text and ``error`` set.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def one(prompt: RenderedPrompt | str) -> Completion:
        try:
            return generate(prompt, params, backend, retry=retry, sleep=sleep)
        except GatewayError as exc:
            return Completion("", backend.backend_id, error=exc)

    if parallelism == 1:
        return [one(p) for p in prompts]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, prompts))

