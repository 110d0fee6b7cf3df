"""Likelihood-delta contribution scores and three-way chunk polarity labels."""

from __future__ import annotations

import enum
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

from .backends.base import GeneratorBackend, LikelihoodQuery
from .chunk_index import CodeChunk, RankedChunk
from .corpus import CompletionInstance
from .errors import DegenerateTarget, LikelihoodUnavailable
from .prompting import FimMarkers, PromptBudget, PromptMode, assemble_prompt

log = logging.getLogger(__name__)

MIN_NLL = 1e-6


@dataclass(frozen=True)
class LabelerConfig:
    t_pos: float = 0.10
    t_neg: float = -0.05

    def __post_init__(self):
        if not (self.t_neg < 0 < self.t_pos):
            raise ValueError("thresholds must satisfy t_neg < 0 < t_pos")


@dataclass(frozen=True)
class ContributionScore:
    s: float
    nll_without: float
    nll_with: float


class Polarity(str, enum.Enum):
    POSITIVE = "positive"
    NEUTRAL = "neutral"
    NEGATIVE = "negative"
    UNAVAILABLE = "unavailable"


@dataclass(frozen=True)
class PolarityLabel:
    value: Polarity
    score: ContributionScore | None = None
    error: str | None = None


@dataclass(frozen=True)
class LabeledChunk:
    chunk: CodeChunk
    label: PolarityLabel
    retrieval_rank: int
    retrieval_score: float = 0.0

    @property
    def polarity(self) -> Polarity:
        return self.label.value

    def as_ranked(self) -> RankedChunk:
        return RankedChunk(self.chunk, self.retrieval_rank, self.retrieval_score)


def score_from_nll(nll_without: float, nll_with: float) -> ContributionScore:
    """Relative NLL reduction; positive when the chunk makes the target more likely.

    Uses NLL magnitudes rather than raw (negative) log-likelihoods so that the
    sign agrees with the positive threshold.
    """
    if nll_without < MIN_NLL:
        raise DegenerateTarget(f"baseline NLL {nll_without!r} too small to normalise by")
    return ContributionScore((nll_without - nll_with) / nll_without, nll_without, nll_with)


def classify(score: ContributionScore, cfg: LabelerConfig = LabelerConfig()) -> PolarityLabel:
    if score.s > cfg.t_pos:
        return PolarityLabel(Polarity.POSITIVE, score)
    if score.s < cfg.t_neg:
        return PolarityLabel(Polarity.NEGATIVE, score)
    return PolarityLabel(Polarity.NEUTRAL, score)


def _nll(instance: CompletionInstance, chunks: Sequence[RankedChunk], backend: GeneratorBackend,
         budget: PromptBudget, markers: FimMarkers) -> float:
    plan = assemble_prompt(instance, chunks, budget, backend.count_tokens, PromptMode.LABELING, markers)
    try:
        return -backend.sequence_logprob(LikelihoodQuery(plan.text, instance.target_text)).total
    except LikelihoodUnavailable as exc:
        exc.instance_id = instance.id
        raise


def baseline_nll(instance: CompletionInstance, backend: GeneratorBackend,
                 budget: PromptBudget = PromptBudget(), markers: FimMarkers = FimMarkers()) -> float:
    return _nll(instance, [], backend, budget, markers)


def contribution_score(
    instance: CompletionInstance,
    chunk: CodeChunk | RankedChunk,
    backend: GeneratorBackend,
    budget: PromptBudget = PromptBudget(),
    markers: FimMarkers = FimMarkers(),
    nll_without: float | None = None,
) -> ContributionScore:
    if not instance.target_lines:
        raise DegenerateTarget(f"{instance.id}: scoring needs a target")
    ranked = chunk if isinstance(chunk, RankedChunk) else RankedChunk(chunk, 1, 0.0)
    if nll_without is None:
        nll_without = baseline_nll(instance, backend, budget, markers)
    nll_with = _nll(instance, [ranked], backend, budget, markers)
    return score_from_nll(nll_without, nll_with)


def label_chunks(
    instance: CompletionInstance,
    ranked_chunks: Sequence[RankedChunk],
    backend: GeneratorBackend,
    cfg: LabelerConfig = LabelerConfig(),
    budget: PromptBudget = PromptBudget(),
    markers: FimMarkers = FimMarkers(),
    workers: int = 1,
) -> list[LabeledChunk]:
    """One label per chunk, in the given order; the chunk-free NLL is computed once."""
    if not ranked_chunks:
        return []
    nll_without = baseline_nll(instance, backend, budget, markers)
    if nll_without < MIN_NLL:
        raise DegenerateTarget(f"{instance.id}: baseline NLL {nll_without!r} too small to normalise by")

    def one(rc: RankedChunk) -> LabeledChunk:
        try:
            score = contribution_score(instance, rc, backend, budget, markers, nll_without)
            label = classify(score, cfg)
        except LikelihoodUnavailable as exc:
            log.warning("%s: chunk %s:%d unavailable: %s", instance.id, rc.chunk.path, rc.chunk.start_line, exc)
            label = PolarityLabel(Polarity.UNAVAILABLE, error=str(exc))
        return LabeledChunk(rc.chunk, label, rc.rank, rc.score)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, ranked_chunks))
    return [one(rc) for rc in ranked_chunks]


@dataclass
class PolarityHistogram:
    per_instance: dict[str, dict[str, int]] = field(default_factory=dict)
    # polarity -> {chunks-per-instance: number of instances}
    buckets: dict[str, dict[int, int]] = field(default_factory=dict)
    totals: dict[str, int] = field(default_factory=dict)

    def table(self) -> str:
        if not self.per_instance:
            return "(no instances)\n"
        kinds = [p.value for p in (Polarity.POSITIVE, Polarity.NEUTRAL, Polarity.NEGATIVE)]
        top = max((max(b) for b in self.buckets.values() if b), default=0)
        lines = ["count  " + "  ".join(f"{k:>9}" for k in kinds)]
        for n in range(top + 1):
            lines.append(f"{n:>5}  " + "  ".join(f"{self.buckets[k].get(n, 0):>9}" for k in kinds))
        lines.append("total  " + "  ".join(f"{self.totals[k]:>9}" for k in kinds))
        return "\n".join(lines) + "\n"


def polarity_distribution(labeled: Mapping[str, Sequence[LabeledChunk]]) -> PolarityHistogram:
    """Per-instance polarity counts and how many instances have each count."""
    hist = PolarityHistogram()
    kinds = (Polarity.POSITIVE, Polarity.NEUTRAL, Polarity.NEGATIVE)
    if not labeled:
        return hist
    hist.buckets = {k.value: {} for k in kinds}
    hist.totals = {k.value: 0 for k in kinds}
    for inst_id in sorted(labeled):
        counts = Counter(lc.polarity for lc in labeled[inst_id])
        row = {k.value: counts.get(k, 0) for k in kinds}
        hist.per_instance[inst_id] = row
        for k, n in row.items():
            hist.buckets[k][n] = hist.buckets[k].get(n, 0) + 1
            hist.totals[k] += n
    return hist


def label_record(instance_id: str, lc: LabeledChunk) -> dict:
    sc = lc.label.score
    return {
        "instance_id": instance_id,
        "path": lc.chunk.path,
        "start_line": lc.chunk.start_line,
        "end_line": lc.chunk.end_line,
        "rank": lc.retrieval_rank,
        "s": None if sc is None else sc.s,
        "nll_with": None if sc is None else sc.nll_with,
        "nll_without": None if sc is None else sc.nll_without,
        "label": lc.polarity.value,
    }


def write_labels(labeled: Mapping[str, Sequence[LabeledChunk]], out: IO[str]) -> int:
    n = 0
    for inst_id in sorted(labeled):
        for lc in labeled[inst_id]:
            out.write(json.dumps(label_record(inst_id, lc), sort_keys=True) + "\n")
            n += 1
    return n
