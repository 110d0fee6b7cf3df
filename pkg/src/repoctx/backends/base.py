"""Backend contract and helpers shared by every generator implementation."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence, runtime_checkable

from ..errors import SignalUnavailable

_FALLBACK_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

SignalDistribution = dict[str, float]


@dataclass(frozen=True)
class LikelihoodQuery:
    prompt: str
    target: str

    def __post_init__(self):
        if not self.target:
            raise ValueError("likelihood target must be non-empty")


@dataclass(frozen=True)
class SequenceLogProb:
    total: float
    per_token: tuple[float, ...] = field(default=())


@runtime_checkable
class GeneratorBackend(Protocol):
    def count_tokens(self, text: str) -> int: ...

    def sequence_logprob(self, q: LikelihoodQuery) -> SequenceLogProb: ...

    def next_token_distribution(self, prompt: str, candidates: Sequence[str]) -> SignalDistribution: ...

    def complete(self, prompt: str, max_tokens: int, stop: Sequence[str] = ()) -> str: ...


def fallback_count_tokens(text: str) -> int:
    """Whitespace-separated runs, split further so each punctuation character is its own token."""
    return len(_FALLBACK_TOKEN_RE.findall(text))


def truncate_to_tokens(text: str, max_tokens: int) -> str:
    """Cut ``text`` after its ``max_tokens``-th fallback token."""
    if max_tokens <= 0:
        return ""
    if fallback_count_tokens(text) <= max_tokens:
        return text
    for i, m in enumerate(_FALLBACK_TOKEN_RE.finditer(text), 1):
        if i == max_tokens:
            return text[: m.end()]
    return text


def truncate_at_stop(text: str, stop: Sequence[str]) -> str:
    cut = len(text)
    for s in stop:
        if s:
            pos = text.find(s)
            if pos != -1:
                cut = min(cut, pos)
    return text[:cut]


def restricted_softmax(log_scores: Mapping[str, float]) -> SignalDistribution:
    """Softmax over exactly the given keys."""
    if not log_scores:
        raise SignalUnavailable("empty candidate set")
    hi = max(log_scores.values())
    if math.isinf(hi) and hi < 0:
        raise SignalUnavailable("no candidate received probability mass")
    exps = {k: math.exp(v - hi) for k, v in log_scores.items()}
    z = math.fsum(exps.values())
    return {k: v / z for k, v in exps.items()}


def check_distribution(dist: Mapping[str, float], candidates: Sequence[str]) -> SignalDistribution:
    if set(dist) != set(candidates):
        raise SignalUnavailable(f"distribution keys {sorted(dist)} != candidates {sorted(candidates)}")
    total = math.fsum(dist.values())
    if any(p < 0 for p in dist.values()) or total <= 0:
        raise SignalUnavailable("invalid probabilities")
    if abs(total - 1.0) > 1e-9:
        dist = {k: v / total for k, v in dist.items()}
    return {c: float(dist[c]) for c in candidates}


def fingerprint(method: str, **payload) -> str:
    """Stable request key used by scripted mocks and record/replay."""
    blob = json.dumps({"method": method, **payload}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:32]
