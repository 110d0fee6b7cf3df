"""HTTP client for completions-style model servers (echo + logprobs)."""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Sequence

import httpx
from tenacity import retry_if_exception, stop_after_attempt, wait_exponential, Retrying

from ..errors import CompletionUnavailable, LikelihoodUnavailable, SignalUnavailable
from .base import (
    LikelihoodQuery,
    SequenceLogProb,
    SignalDistribution,
    check_distribution,
    fallback_count_tokens,
    restricted_softmax,
    truncate_at_stop,
)

log = logging.getLogger(__name__)

DEFAULT_FIELDS = {
    "text": "choices.0.text",
    "tokens": "choices.0.logprobs.tokens",
    "token_logprobs": "choices.0.logprobs.token_logprobs",
    "text_offset": "choices.0.logprobs.text_offset",
    "top_logprobs": "choices.0.logprobs.top_logprobs",
    "token_count": "count",
}


@dataclass
class RemoteConfig:
    endpoint: str
    model: str
    api_key_env: str | None = "REPOCTX_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    max_concurrency: int = 8
    completions_path: str = "/v1/completions"
    tokenize_path: str | None = None
    signal_mode: str = "top_logprobs"
    top_logprobs: int = 20
    fields: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_FIELDS))
    debug: bool = False

    def __post_init__(self):
        if self.signal_mode not in ("top_logprobs", "echo"):
            raise ValueError(f"unknown signal_mode {self.signal_mode!r}")


def dig(obj: Any, path: str) -> Any:
    for part in path.split("."):
        obj = obj[int(part)] if isinstance(obj, list) else obj[part]
    return obj


def _retryable(exc: BaseException) -> bool:
    if isinstance(exc, httpx.HTTPStatusError):
        return exc.response.status_code == 429 or exc.response.status_code >= 500
    return isinstance(exc, httpx.TransportError)


class RemoteBackend:
    """Thread-safe client; in-flight requests are capped by ``max_concurrency``."""

    def __init__(self, config: RemoteConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {}
        key = os.environ.get(config.api_key_env) if config.api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=config.endpoint, headers=headers, timeout=config.timeout, transport=transport
        )
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self._warned_tokenizer = False

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        if self.config.debug:
            log.debug("POST %s %s", path, payload)
        retrying = Retrying(
            stop=stop_after_attempt(1 + self.config.max_retries),
            wait=wait_exponential(multiplier=self.config.backoff, max=30),
            retry=retry_if_exception(_retryable),
            reraise=True,
        )
        with self._slots:
            for attempt in retrying:
                with attempt:
                    resp = self._client.post(path, json={"model": self.config.model, **payload})
                    resp.raise_for_status()
        body = resp.json()
        if self.config.debug:
            log.debug("response %s", body)
        return body

    def _field(self, body: dict, name: str) -> Any:
        return dig(body, self.config.fields[name])

    def count_tokens(self, text: str) -> int:
        if self.config.tokenize_path:
            try:
                body = self._post(self.config.tokenize_path, {"prompt": text})
                value = self._field(body, "token_count")
                return len(value) if isinstance(value, list) else int(value)
            except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                if not self._warned_tokenizer:
                    log.warning("tokenizer endpoint failed (%s); using local approximation", exc)
                    self._warned_tokenizer = True
        return fallback_count_tokens(text)

    def sequence_logprob(self, q: LikelihoodQuery) -> SequenceLogProb:
        """Echo the prompt+target and sum the logprobs of tokens ending inside the target."""
        payload = {"prompt": q.prompt + q.target, "max_tokens": 0, "echo": True, "logprobs": 1, "temperature": 0}
        try:
            body = self._post(self.config.completions_path, payload)
            tokens = self._field(body, "tokens")
            lps = self._field(body, "token_logprobs")
            offsets = self._field(body, "text_offset")
        except (httpx.HTTPError, KeyError, IndexError, TypeError) as exc:
            raise LikelihoodUnavailable(f"likelihood request failed: {exc}") from exc
        boundary = len(q.prompt)
        per = []
        for tok, lp, off in zip(tokens, lps, offsets):
            if off + len(tok) <= boundary:
                continue
            if lp is None:
                raise LikelihoodUnavailable("missing logprob for a target token")
            per.append(min(0.0, float(lp)))
        if not per:
            raise LikelihoodUnavailable("no target tokens in echoed response")
        return SequenceLogProb(sum(per), tuple(per))

    def next_token_distribution(self, prompt: str, candidates: Sequence[str]) -> SignalDistribution:
        if self.config.signal_mode == "echo":
            try:
                scores = {c: self.sequence_logprob(LikelihoodQuery(prompt, c)).total for c in candidates}
            except LikelihoodUnavailable as exc:
                raise SignalUnavailable(str(exc)) from exc
            return check_distribution(restricted_softmax(scores), candidates)
        payload = {"prompt": prompt, "max_tokens": 1, "logprobs": self.config.top_logprobs, "temperature": 0}
        try:
            body = self._post(self.config.completions_path, payload)
            top = self._field(body, "top_logprobs")[0]
        except (httpx.HTTPError, KeyError, IndexError, TypeError) as exc:
            raise SignalUnavailable(f"signal request failed: {exc}") from exc
        return match_candidates(top, candidates)

    def complete(self, prompt: str, max_tokens: int, stop: Sequence[str] = ()) -> str:
        if max_tokens <= 0:
            return ""
        payload = {"prompt": prompt, "max_tokens": max_tokens, "temperature": 0}
        if stop:
            payload["stop"] = list(stop)
        try:
            text = self._field(self._post(self.config.completions_path, payload), "text")
        except (httpx.HTTPError, KeyError, IndexError, TypeError) as exc:
            raise CompletionUnavailable(f"completion request failed: {exc}") from exc
        return truncate_at_stop(text, stop)


def match_candidates(top: dict[str, float], candidates: Sequence[str]) -> SignalDistribution:
    """Map backend top-logprob tokens onto literal signal strings by prefix.

    A returned piece matches a candidate when one is a prefix of the other
    (ignoring surrounding whitespace); the best-scoring piece wins.
    """
    scores: dict[str, float] = {}
    for cand in candidates:
        best = None
        for tok, lp in top.items():
            piece = tok.strip()
            if piece and (cand.startswith(piece) or piece.startswith(cand)):
                best = lp if best is None else max(best, lp)
        scores[cand] = float("-inf") if best is None else float(best)
    if all(v == float("-inf") for v in scores.values()):
        raise SignalUnavailable("no signal token among the backend's top logprobs")
    return check_distribution(restricted_softmax(scores), candidates)
