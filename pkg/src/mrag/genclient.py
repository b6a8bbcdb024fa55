"""Text-generation and text-embedding providers.

Wire protocol (JSON over HTTP POST):

* ``{endpoint}/generate`` ``{prompt, max_tokens, temperature, seed, num_samples}``
  -> ``{texts: [...]}``
* ``{endpoint}/embed`` ``{texts: [...]}`` -> ``{dim, vectors: [[...], ...]}``

``MRAG_ENDPOINT`` overrides the configured endpoint and ``MRAG_OFFLINE=1``
swaps in the deterministic mocks defined here.
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx
import numpy as np

from .errors import (
    DimensionError,
    EmptyGenerationError,
    ProviderError,
    ProviderTimeoutError,
)
from .metrics import tokenize

logger = logging.getLogger(__name__)

CAPTION_TEMPERATURE = 0.0
SAMPLE_TEMPERATURE = 0.9
DEFAULT_MAX_TOKENS = 40


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = CAPTION_TEMPERATURE
    seed: int | None = None
    num_samples: int = 1

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass(frozen=True)
class GenerationResponse:
    texts: list[str]
    latency: float = 0.0


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = "http://127.0.0.1:8000"
    timeout: float = 30.0
    max_retries: int = 2
    max_in_flight: int = 4
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    token: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_env(cls, **kw) -> "ProviderConfig":
        if os.environ.get("MRAG_ENDPOINT"):
            kw["endpoint"] = os.environ["MRAG_ENDPOINT"]
        return cls(**kw)


def offline_forced() -> bool:
    return os.environ.get("MRAG_OFFLINE", "") in ("1", "true", "yes")


def backoff_delay(attempt: int, base: float, cap: float) -> float:
    """Wait before retry number ``attempt`` (1-based): ``base * 2**(attempt-1)``, capped."""
    return min(cap, base * 2 ** (attempt - 1))


def _check_texts(texts, expected: int) -> list[str]:
    if not isinstance(texts, list) or len(texts) != expected:
        raise ProviderError(f"expected {expected} texts, got {texts!r:.80}")
    for t in texts:
        if not isinstance(t, str) or not t.strip():
            raise EmptyGenerationError("provider returned an empty completion")
    return texts


class Provider:
    """Base class: bounds concurrent calls to ``max_in_flight``."""

    def __init__(self, max_in_flight: int = 4):
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._slots:
            t0 = time.perf_counter()
            texts = _check_texts(self._generate(request), request.num_samples)
            return GenerationResponse(texts, time.perf_counter() - t0)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            raise ValueError("embed needs at least one text")
        with self._slots:
            out = np.asarray(self._embed(list(texts)), dtype=np.float64)
        if out.ndim != 2 or out.shape[0] != len(texts):
            raise ProviderError(f"embed returned shape {out.shape} for {len(texts)} texts")
        return out

    def _generate(self, request: GenerationRequest) -> list[str]:
        raise NotImplementedError

    def _embed(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError


class HTTPProvider(Provider):
    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(config.max_in_flight)
        self.config = config
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {config.token}"} if config.token else {}
        self._client = httpx.Client(base_url=config.endpoint.rstrip("/"), timeout=config.timeout,
                                    headers=headers, transport=transport)
        self.attempts = 0

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        cfg = self.config
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self._sleep(backoff_delay(attempt, cfg.backoff_base, cfg.backoff_cap))
            self.attempts += 1
            try:
                resp = self._client.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = exc
                logger.warning("%s timed out (attempt %d)", path, attempt + 1)
                continue
            except httpx.TransportError as exc:
                last = exc
                logger.warning("%s transport error (attempt %d): %s", path, attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = ProviderError(f"{path}: HTTP {resp.status_code}")
                continue
            if resp.status_code >= 300:
                raise ProviderError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderError(f"{path}: response is not JSON") from exc
        if isinstance(last, httpx.TimeoutException):
            raise ProviderTimeoutError(
                f"{path}: timed out after {cfg.max_retries + 1} attempts") from last
        raise ProviderError(f"{path}: failed after {cfg.max_retries + 1} attempts: {last}") from last

    def _generate(self, request: GenerationRequest) -> list[str]:
        body = self._post("/generate", {
            "prompt": request.prompt, "max_tokens": request.max_tokens,
            "temperature": request.temperature, "seed": request.seed,
            "num_samples": request.num_samples,
        })
        return body.get("texts") if isinstance(body, dict) else None

    def _embed(self, texts: list[str]) -> np.ndarray:
        body = self._post("/embed", {"texts": texts})
        try:
            dim = int(body["dim"])
            vectors = np.asarray(body["vectors"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"/embed: malformed response ({exc})") from None
        if vectors.ndim != 2 or vectors.shape[1] != dim:
            raise ProviderError(f"/embed: vectors shape {vectors.shape} disagrees with dim {dim}")
        return vectors


# -- mocks -------------------------------------------------------------------

def _digest_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class PromptShape:
    """How mocks find the retrieved descriptions inside a prompt."""

    prefix: str = "Show similar images: "
    suffix: str = " The image describes: "
    separator: str = "\n"

    def descriptions(self, prompt: str) -> list[str]:
        body = prompt
        if body.startswith(self.prefix):
            body = body[len(self.prefix):]
        if self.suffix and body.endswith(self.suffix):
            body = body[: -len(self.suffix)]
        return [d for d in body.split(self.separator) if d.strip()]


class EchoLLM(Provider):
    """Returns the first retrieved description for every sample."""

    def __init__(self, shape: PromptShape | None = None, max_in_flight: int = 4):
        super().__init__(max_in_flight)
        self.shape = shape or PromptShape()

    def _first(self, prompt: str) -> str:
        lines = self.shape.descriptions(prompt)
        if not lines:
            raise EmptyGenerationError("no descriptions in prompt to echo")
        return lines[0]

    def _generate(self, request):
        return [self._first(request.prompt)] * request.num_samples


class ShuffleLLM(EchoLLM):
    """Seeded recombination of the retrieved descriptions.

    At temperature 0 every sample is the first description.  Otherwise
    sample 0 is the first description and sample i > 0 is a token shuffle
    of a randomly picked description, kept distinct from earlier samples
    where possible.
    """

    def __init__(self, seed: int = 0, shape: PromptShape | None = None, max_in_flight: int = 4):
        super().__init__(shape, max_in_flight)
        self.seed = seed

    def _generate(self, request):
        first = self._first(request.prompt)
        if request.temperature == 0:
            return [first] * request.num_samples
        lines = self.shape.descriptions(request.prompt)
        seed = self.seed if request.seed is None else request.seed
        out = [first]
        for i in range(1, request.num_samples):
            rng = random.Random(_digest_seed(seed, request.prompt, i))
            text = first
            for _ in range(16):
                toks = rng.choice(lines).split()
                rng.shuffle(toks)
                text = " ".join(toks)
                if text not in out:
                    break
            out.append(text)
        return out


class JunkLLM(Provider):
    def __init__(self, text: str = "zxq vrrb plom", max_in_flight: int = 4):
        super().__init__(max_in_flight)
        self.text = text

    def _generate(self, request):
        return [self.text] * request.num_samples


class HashEmbedder(Provider):
    """Unit-norm sum of per-token pseudo-random Gaussian vectors.

    Each token's vector is drawn from a PCG64 stream seeded by a SHA-256 of
    (seed, token), so outputs are identical on every platform.
    """

    def __init__(self, dim: int, seed: int = 0, max_in_flight: int = 4):
        super().__init__(max_in_flight)
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def token_vector(self, token: str) -> np.ndarray:
        with self._lock:
            vec = self._cache.get(token)
            if vec is None:
                rng = np.random.Generator(np.random.PCG64(_digest_seed(self.seed, token)))
                vec = rng.standard_normal(self.dim)
                self._cache[token] = vec
            return vec

    def _embed(self, texts):
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            toks = tokenize(text) or [""]
            acc = np.zeros(self.dim)
            for t in toks:
                acc = acc + self.token_vector(t)
            out[i] = acc / np.linalg.norm(acc)
        return out


# -- module-level helpers ----------------------------------------------------

def generate(provider: Provider, request: GenerationRequest) -> GenerationResponse:
    return provider.generate(request)


def generate_many(provider: Provider, requests: Sequence[GenerationRequest],
                  workers: int = 1, on_error: str = "raise") -> list:
    """Issue requests concurrently; results come back in request order.

    With ``on_error="return"`` failures are returned in place as exceptions.
    """
    def call(req):
        try:
            return provider.generate(req)
        except Exception as exc:  # noqa: BLE001 - handed back to the caller
            if on_error == "return":
                return exc
            raise

    if workers <= 1:
        return [call(r) for r in requests]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(call, requests))


def embed_text(provider: Provider, texts: Sequence[str], dim: int | None = None) -> np.ndarray:
    vectors = provider.embed(texts)
    if dim is not None and vectors.shape[1] != dim:
        raise DimensionError(f"embedding provider returned d={vectors.shape[1]}, dataset has d={dim}")
    return vectors


def make_llm(config: ProviderConfig | None, offline: bool = False, seed: int = 0,
             shape: PromptShape | None = None) -> Provider:
    if offline or offline_forced() or config is None:
        return ShuffleLLM(seed, shape, max_in_flight=config.max_in_flight if config else 4)
    return HTTPProvider(config)


def make_embedder(config: ProviderConfig | None, dim: int, offline: bool = False,
                  seed: int = 0) -> Provider:
    if offline or offline_forced() or config is None:
        return HashEmbedder(dim, seed, max_in_flight=config.max_in_flight if config else 4)
    return HTTPProvider(config)
