"""Deterministic generator backends for tests, desk-scale runs and replay."""

from __future__ import annotations

import math
import re
import threading
from collections import deque
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from ..chunk_index import tokenize
from ..corpus import CompletionInstance
from ..errors import CompletionUnavailable, LikelihoodUnavailable, SignalUnavailable
from ..prompting import FimMarkers, ParsedPrompt, SignalTokens, parse_prompt
from .base import (
    LikelihoodQuery,
    SequenceLogProb,
    SignalDistribution,
    check_distribution,
    fallback_count_tokens,
    fingerprint,
    restricted_softmax,
    truncate_at_stop,
    truncate_to_tokens,
)

_ERRORS = {
    "sequence_logprob": LikelihoodUnavailable,
    "next_token_distribution": SignalUnavailable,
    "complete": CompletionUnavailable,
}


class ScriptedBackend:
    """Answers from a fingerprint table first, then from per-method FIFO queues.

    A distribution response may be given as probabilities or as
    ``{"logits": {...}}``; exception instances in a script are raised.
    """

    def __init__(
        self,
        script: Mapping[str, Any] | None = None,
        queues: Mapping[str, Iterable[Any]] | None = None,
    ):
        self.script = dict(script or {})
        self.queues = {k: deque(v) for k, v in (queues or {}).items()}
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def _answer(self, method: str, fp: str) -> Any:
        with self._lock:
            self.calls.append((method, fp))
            if fp in self.script:
                resp = self.script[fp]
            elif self.queues.get(method):
                resp = self.queues[method].popleft()
            else:
                raise _ERRORS[method](f"no scripted {method} response for {fp}")
        if isinstance(resp, BaseException):
            raise resp
        return resp

    def count_tokens(self, text: str) -> int:
        return fallback_count_tokens(text)

    def sequence_logprob(self, q: LikelihoodQuery) -> SequenceLogProb:
        resp = self._answer("sequence_logprob", fingerprint("sequence_logprob", prompt=q.prompt, target=q.target))
        if isinstance(resp, Mapping):
            per = tuple(float(x) for x in resp.get("per_token", ()))
            total = float(resp["total"]) if "total" in resp else math.fsum(per)
        else:
            total, per = float(resp), (float(resp),)
        if total > 0:
            raise LikelihoodUnavailable("scripted log-probability is positive")
        return SequenceLogProb(total, per)

    def next_token_distribution(self, prompt: str, candidates: Sequence[str]) -> SignalDistribution:
        fp = fingerprint("next_token_distribution", prompt=prompt, candidates=list(candidates))
        resp = self._answer("next_token_distribution", fp)
        if isinstance(resp, Mapping) and "logits" in resp:
            return check_distribution(restricted_softmax(resp["logits"]), candidates)
        return check_distribution(resp, candidates)

    def complete(self, prompt: str, max_tokens: int, stop: Sequence[str] = ()) -> str:
        fp = fingerprint("complete", prompt=prompt, max_tokens=max_tokens, stop=list(stop))
        text = str(self._answer("complete", fp))
        return truncate_to_tokens(truncate_at_stop(text, stop), max_tokens)


_BINDING_RE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=(?!=)\s*(.+?)\s*$")


def bindings(text: str) -> dict[str, str]:
    """``name = expression`` lines, keyed by name (last one wins)."""
    out = {}
    for line in text.split("\n"):
        m = _BINDING_RE.match(line)
        if m:
            out[m.group(1)] = m.group(2)
    return out


def overlap_fraction(target: str, context: str) -> float:
    """Share of the target's distinct tokens that also occur in ``context``."""
    want = tokenize(target)
    if not want:
        return 0.0
    return len(want & tokenize(context)) / len(want)


def conflicts(target: str, context: str) -> dict[str, str]:
    """Target bindings that some context line assigns a different expression to.

    Maps each such name to the last differing expression, so an agreeing
    binding elsewhere in the context does not mask a contradiction.
    """
    own = bindings(target)
    out = {}
    for line in context.split("\n"):
        m = _BINDING_RE.match(line)
        if m and m.group(1) in own and m.group(2) != own[m.group(1)]:
            out[m.group(1)] = m.group(2)
    return out


def conflict_fraction(target: str, context: str) -> float:
    own = bindings(target)
    if not own:
        return 0.0
    return len(conflicts(target, context)) / len(own)


@dataclass(frozen=True)
class OverlapParams:
    base_nll: float = 2.0
    gain: float = 0.5
    conflict_penalty: float = 0.0
    sharpness: float = 40.0
    t_pos: float = 0.10
    t_neg: float = -0.05

    def __post_init__(self):
        if self.base_nll <= 0 or not (0.0 <= self.gain < 1.0) or self.conflict_penalty < 0:
            raise ValueError("need base_nll > 0, 0 <= gain < 1, conflict_penalty >= 0")


class OverlapOracle:
    """Analytic stand-in for a code LLM.

    Target NLL is ``n_tokens * base_nll * (1 - gain*overlap + penalty*conflict)``
    where overlap and conflict are measured against the cross-file chunks in
    the prompt only. Signal decisions and completions need to know which
    instance a prompt belongs to, so instances are registered up front and
    recognised from the in-file text.
    """

    def __init__(
        self,
        params: OverlapParams = OverlapParams(),
        instances: Iterable[CompletionInstance] = (),
        markers: FimMarkers = FimMarkers(),
        tokens: SignalTokens = SignalTokens(),
        placeholder: str = "_",
    ):
        self.params = params
        self.markers = markers
        self.tokens = tokens
        self.placeholder = placeholder
        self._instances: dict[str, list[CompletionInstance]] = {}
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()
        for inst in instances:
            self.register(inst)

    def register(self, instance: CompletionInstance) -> None:
        if not instance.target_lines:
            raise ValueError(f"{instance.id}: oracle instances need a target")
        key = instance.prefix_text[-40:]
        self._instances.setdefault(key, []).append(instance)

    def _log(self, method: str, prompt: str) -> None:
        with self._lock:
            self.calls.append((method, fingerprint(method, prompt=prompt)))

    def _parse(self, prompt: str) -> ParsedPrompt:
        parsed = parse_prompt(prompt, self.markers, self.tokens)
        if parsed is None:
            raise SignalUnavailable("prompt has no fill-in-the-middle markers")
        return parsed

    def _lookup(self, parsed: ParsedPrompt) -> CompletionInstance:
        left = parsed.left
        pool = self._instances.get(left[-40:], []) if len(left) >= 40 else [
            i for group in self._instances.values() for i in group
        ]
        hits = [i for i in pool if i.prefix_text.endswith(left) and i.suffix_text.startswith(parsed.right)]
        if len(hits) != 1:
            raise SignalUnavailable(f"prompt matches {len(hits)} registered instances")
        return hits[0]

    # -- analytic model -------------------------------------------------------------------

    def nll(self, target: str, context: str) -> float:
        p = self.params
        n = fallback_count_tokens(target)
        factor = 1.0 - p.gain * overlap_fraction(target, context) + p.conflict_penalty * conflict_fraction(target, context)
        return n * p.base_nll * factor

    def contribution(self, target: str, chunk_text: str) -> float:
        """Closed-form relative NLL reduction from adding one chunk."""
        p = self.params
        return p.gain * overlap_fraction(target, chunk_text) - p.conflict_penalty * conflict_fraction(target, chunk_text)

    # -- backend surface ------------------------------------------------------------------

    def count_tokens(self, text: str) -> int:
        return fallback_count_tokens(text)

    def sequence_logprob(self, q: LikelihoodQuery) -> SequenceLogProb:
        self._log("sequence_logprob", q.prompt + "\x00" + q.target)
        parsed = parse_prompt(q.prompt, self.markers, self.tokens)
        context = "\n".join(parsed.context_bodies) if parsed else ""
        n = fallback_count_tokens(q.target)
        if n == 0:
            return SequenceLogProb(0.0, ())
        per = -self.nll(q.target, context) / n
        return SequenceLogProb(math.fsum([per] * n), (per,) * n)

    def next_token_distribution(self, prompt: str, candidates: Sequence[str]) -> SignalDistribution:
        self._log("next_token_distribution", prompt)
        parsed = self._parse(prompt)
        inst = self._lookup(parsed)
        target = inst.target_text
        t = self.tokens
        if set(candidates) == set(t.adaptive):
            known = "\n".join((parsed.left, parsed.right) + parsed.context_bodies)
            coverage = overlap_fraction(target, known)
            return check_distribution({t.mc: 1.0 - coverage, t.ec: coverage}, candidates)
        if set(candidates) == set(t.polarity):
            if parsed.candidate is None:
                raise SignalUnavailable("no chunk awaiting judgment")
            s = self.contribution(target, parsed.candidate)
            k = self.params.sharpness
            logits = {t.pos: k * (s - self.params.t_pos), t.neg: k * (self.params.t_neg - s), t.neu: 0.0}
            return check_distribution(restricted_softmax(logits), candidates)
        raise SignalUnavailable(f"unsupported candidate set {list(candidates)}")

    def complete(self, prompt: str, max_tokens: int, stop: Sequence[str] = ()) -> str:
        """Copy the target, misled by conflicting chunk bindings, blind to unseen tokens."""
        self._log("complete", prompt)
        try:
            parsed = self._parse(prompt)
            inst = self._lookup(parsed)
        except SignalUnavailable as exc:
            raise CompletionUnavailable(str(exc)) from None
        context = "\n".join(parsed.context_bodies)
        known = tokenize("\n".join((parsed.left, parsed.right, context)))
        wrong = conflicts(inst.target_text, context)
        lines = []
        for line in inst.target_lines:
            m = _BINDING_RE.match(line)
            if m and m.group(1) in wrong:
                line = line[: m.start(2)] + wrong[m.group(1)]
            lines.append(line)
        text = re.sub(r"\w+", lambda m: m.group(0) if m.group(0) in known else self.placeholder, "\n".join(lines))
        return truncate_to_tokens(truncate_at_stop(text, stop), max_tokens)
