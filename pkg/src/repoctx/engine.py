"""Filter-then-generate inference: decide retrieval, judge chunks one by one, keep positives."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import IO, Sequence

from .backends.base import GeneratorBackend
from .chunk_index import CrossFileIndex, RankedChunk, retrieve
from .corpus import CompletionInstance
from .errors import CompletionUnavailable, SignalUnavailable
from .prompting import (
    FimMarkers,
    PromptBudget,
    PromptMode,
    PromptPlan,
    SignalTokens,
    assemble_prompt as _assemble,
    signal_prompt,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EngineConfig:
    t_c: float = 0.3
    t_p: float = 0.3
    t_n: float = 0.3
    max_prompt_tokens: int = 4096
    in_file_budget: int = 1024
    cross_file_budget: int = 3072
    top_k: int = 10
    query_window: int = 10
    max_generation_tokens: int = 128
    stop_sequences: tuple[str, ...] = ()
    tokens: SignalTokens = SignalTokens()
    markers: FimMarkers = FimMarkers()
    retrieval_fallback: str = "<MC>"
    keep_judged_inline: bool = False

    def __post_init__(self):
        for name in ("t_c", "t_p", "t_n"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        PromptBudget(self.max_prompt_tokens, self.in_file_budget, self.cross_file_budget)
        if self.retrieval_fallback not in self.tokens.adaptive:
            raise ValueError("retrieval_fallback must be one of the adaptive tokens")

    @property
    def budget(self) -> PromptBudget:
        return PromptBudget(self.max_prompt_tokens, self.in_file_budget, self.cross_file_budget)


class StepKind(str, enum.Enum):
    DECIDE = "decide"
    JUDGE = "judge"
    REASSESS = "reassess"


class StopReason(str, enum.Enum):
    INITIAL_EC = "InitialEC"
    SUFFICIENT_AFTER_CHUNK = "SufficientAfterChunk"
    CANDIDATES_EXHAUSTED = "CandidatesExhausted"


@dataclass(frozen=True)
class Decision:
    kind: StepKind
    probabilities: dict[str, float] | None
    chosen: str
    rank: int | None = None
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "step": self.kind.value,
            "rank": self.rank,
            "probs": self.probabilities,
            "chosen": self.chosen,
            "fallback": self.fallback,
        }


@dataclass
class EngineTrace:
    decisions: list[Decision] = field(default_factory=list)
    kept_chunks: list[RankedChunk] = field(default_factory=list)
    stopped_reason: StopReason | None = None

    def to_lines(self) -> list[str]:
        lines = [json.dumps(d.to_dict(), sort_keys=True) for d in self.decisions]
        lines.append(json.dumps({
            "kept": [rc.rank for rc in self.kept_chunks],
            "stopped": self.stopped_reason.value if self.stopped_reason else None,
        }, sort_keys=True))
        return lines

    def write(self, out: IO[str], instance_id: str) -> None:
        for line in self.to_lines():
            out.write(json.dumps({"instance_id": instance_id, "event": json.loads(line)}, sort_keys=True) + "\n")


@dataclass
class CompletionResult:
    instance_id: str
    generated: str
    trace: EngineTrace
    prompt: PromptPlan


def assemble_prompt(
    instance: CompletionInstance,
    kept_chunks: Sequence[RankedChunk],
    cfg: EngineConfig,
    count_tokens,
    mode: PromptMode = PromptMode.INFERENCE,
) -> PromptPlan:
    return _assemble(instance, kept_chunks, cfg.budget, count_tokens, mode, cfg.markers)


def _select_adaptive(dist: dict[str, float], cfg: EngineConfig) -> str:
    return cfg.tokens.mc if dist[cfg.tokens.mc] >= cfg.t_c else cfg.tokens.ec


def _select_polarity(dist: dict[str, float], cfg: EngineConfig) -> str:
    t = cfg.tokens
    if dist[t.pos] >= cfg.t_p:
        return t.pos
    if dist[t.neg] >= cfg.t_n:
        return t.neg
    return t.neu


def decide_retrieval(prompt: PromptPlan, backend: GeneratorBackend, cfg: EngineConfig,
                     kind: StepKind = StepKind.DECIDE, rank: int | None = None) -> Decision:
    """``<MC>`` iff P(<MC>) >= t_c over the adaptive pair; fallback on unavailability."""
    try:
        dist = backend.next_token_distribution(prompt.text, list(cfg.tokens.adaptive))
    except SignalUnavailable as exc:
        log.warning("adaptive signal unavailable (%s); falling back to %s", exc, cfg.retrieval_fallback)
        return Decision(kind, None, cfg.retrieval_fallback, rank, True)
    return Decision(kind, dist, _select_adaptive(dist, cfg), rank)


def judge_chunk(prompt_with_chunk: PromptPlan, backend: GeneratorBackend, cfg: EngineConfig,
                rank: int | None = None) -> Decision:
    """``<pos>`` takes priority, then ``<neg>``, else ``<neu>``; unavailability means ``<neu>``."""
    try:
        dist = backend.next_token_distribution(prompt_with_chunk.text, list(cfg.tokens.polarity))
    except SignalUnavailable as exc:
        log.warning("polarity signal unavailable (%s); treating chunk as neutral", exc)
        return Decision(StepKind.JUDGE, None, cfg.tokens.neu, rank, True)
    return Decision(StepKind.JUDGE, dist, _select_polarity(dist, cfg), rank)


def filter_chunks(
    instance: CompletionInstance,
    index: CrossFileIndex,
    backend: GeneratorBackend,
    cfg: EngineConfig = EngineConfig(),
) -> EngineTrace:
    """Run the decision loop only; returns the trace with the kept chunks."""
    count = backend.count_tokens
    t = cfg.tokens
    trace = EngineTrace()
    history: list[tuple[RankedChunk, str]] = []

    def state(extra: Sequence[tuple[RankedChunk, str | None]] = ()) -> PromptPlan:
        return signal_prompt(instance, list(history) + list(extra), cfg.budget, count, t, cfg.markers)

    first = decide_retrieval(state(), backend, cfg)
    trace.decisions.append(first)
    if first.chosen == t.ec:
        trace.stopped_reason = StopReason.INITIAL_EC
        return trace

    result = retrieve(index, instance.prefix_lines, cfg.top_k, cfg.query_window)
    trace.stopped_reason = StopReason.CANDIDATES_EXHAUSTED
    for rc in result.ranked:
        verdict = judge_chunk(state([(rc, None)]), backend, cfg, rc.rank)
        trace.decisions.append(verdict)
        if verdict.chosen != t.pos:
            if cfg.keep_judged_inline:
                history.append((rc, verdict.chosen))
            continue
        history.append((rc, t.pos))
        trace.kept_chunks.append(rc)
        again = decide_retrieval(state(), backend, cfg, StepKind.REASSESS, rc.rank)
        trace.decisions.append(again)
        if again.chosen == t.ec:
            trace.stopped_reason = StopReason.SUFFICIENT_AFTER_CHUNK
            break
    return trace


def export_filtered_prompt(
    instance: CompletionInstance,
    index: CrossFileIndex,
    backend: GeneratorBackend,
    cfg: EngineConfig = EngineConfig(),
) -> tuple[PromptPlan, EngineTrace]:
    """Same filtering path as :func:`run`, stopping before generation."""
    trace = filter_chunks(instance, index, backend, cfg)
    plan = assemble_prompt(instance, trace.kept_chunks, cfg, backend.count_tokens, PromptMode.EXPORT)
    return plan, trace


def run(
    instance: CompletionInstance,
    index: CrossFileIndex,
    backend: GeneratorBackend,
    cfg: EngineConfig = EngineConfig(),
) -> CompletionResult:
    trace = filter_chunks(instance, index, backend, cfg)
    plan = assemble_prompt(instance, trace.kept_chunks, cfg, backend.count_tokens, PromptMode.INFERENCE)
    try:
        generated = backend.complete(plan.text, cfg.max_generation_tokens, list(cfg.stop_sequences))
    except CompletionUnavailable as exc:
        exc.instance_id = instance.id
        raise
    return CompletionResult(instance.id, generated, trace, plan)
