"""Strategy comparison: EM/ES scoring, cross-file length accounting, negative subsets."""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Callable, Iterable, Mapping, Sequence

from . import engine
from .backends.base import GeneratorBackend
from .chunk_index import CrossFileIndex, retrieve
from .corpus import CompletionInstance
from .errors import BackendError, PromptOverflow
from .labeler import LabeledChunk, Polarity
from .metrics import edit_similarity, exact_match
from .prompting import BANNER

log = logging.getLogger(__name__)

IndexFactory = Callable[[str], CrossFileIndex]


class StrategyKind(str, enum.Enum):
    NO_RETRIEVE = "none"
    FULL_RETRIEVE = "full"
    FILTERED = "filter"
    EXTERNAL_PROMPT_REPLAY = "replay"


@dataclass(frozen=True)
class StrategySpec:
    kind: StrategyKind
    overrides: Mapping[str, object] = field(default_factory=dict)

    def config(self, base: engine.EngineConfig) -> engine.EngineConfig:
        return dataclasses.replace(base, **self.overrides) if self.overrides else base


@dataclass
class EvalRow:
    id: str
    strategy: str
    em: bool = False
    es: float = 0.0
    cross_file_tokens: int = 0
    signal_tokens_generated: int = 0
    generated: str = ""
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvalReport:
    strategy: str
    rows: list[EvalRow]

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.id)

    @property
    def ok_rows(self) -> list[EvalRow]:
        return [r for r in self.rows if r.error is None]

    @property
    def aggregates(self) -> dict:
        ok = self.ok_rows
        n = len(ok)

        def mean(xs):
            return sum(xs) / n if n else 0.0

        return {
            "n": n,
            "n_failed": len(self.rows) - n,
            "em_pct": 100.0 * mean([r.em for r in ok]),
            "es_mean_pct": 100.0 * mean([r.es for r in ok]),
            "mean_cross_file_tokens": mean([r.cross_file_tokens for r in ok]),
            "mean_signal_tokens": mean([r.signal_tokens_generated for r in ok]),
        }

    def subset(self, ids: Iterable[str]) -> "EvalReport":
        keep = set(ids)
        return EvalReport(self.strategy, [r for r in self.rows if r.id in keep])

    def write(self, out: IO[str]) -> None:
        for r in self.rows:
            out.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        out.write(json.dumps({"strategy": self.strategy, "aggregates": self.aggregates}, sort_keys=True) + "\n")


def _cross_file_tokens_of(prompt: str, marker: str, count) -> int:
    head = prompt.split(marker, 1)[0] if marker in prompt else ""
    return count(head) if head.startswith(BANNER) else 0


def evaluate_instance(
    instance: CompletionInstance,
    index_factory: IndexFactory | None,
    backend: GeneratorBackend,
    spec: StrategySpec,
    cfg: engine.EngineConfig,
    external_prompt: str | None = None,
) -> EvalRow:
    row = EvalRow(instance.id, spec.kind.value)
    count = backend.count_tokens
    try:
        if spec.kind is StrategyKind.FILTERED:
            res = engine.run(instance, index_factory(instance.target_path), backend, cfg)
            generated, plan = res.generated, res.prompt
            row.signal_tokens_generated = len(res.trace.decisions)
        elif spec.kind is StrategyKind.EXTERNAL_PROMPT_REPLAY:
            if external_prompt is None:
                raise PromptOverflow(f"{instance.id}: no exported prompt to replay")
            generated = backend.complete(external_prompt, cfg.max_generation_tokens, list(cfg.stop_sequences))
            row.cross_file_tokens = _cross_file_tokens_of(external_prompt, cfg.markers.prefix, count)
            plan = None
        else:
            kept = ()
            if spec.kind is StrategyKind.FULL_RETRIEVE:
                kept = retrieve(index_factory(instance.target_path), instance.prefix_lines,
                                cfg.top_k, cfg.query_window).ranked
            plan = engine.assemble_prompt(instance, kept, cfg, count)
            generated = backend.complete(plan.text, cfg.max_generation_tokens, list(cfg.stop_sequences))
    except (BackendError, PromptOverflow) as exc:
        log.warning("%s [%s]: %s", instance.id, spec.kind.value, exc)
        row.error = f"{type(exc).__name__}: {exc}"
        return row
    if plan is not None:
        row.cross_file_tokens = plan.token_counts.cross_file
    ref = instance.target_text
    row.generated = generated
    row.em = exact_match(generated, ref)
    row.es = edit_similarity(generated, ref)
    return row


def run_strategy(
    instances: Sequence[CompletionInstance],
    index_builder: IndexFactory | None,
    backend: GeneratorBackend,
    spec: StrategySpec,
    base_config: engine.EngineConfig = engine.EngineConfig(),
    workers: int = 1,
    external_prompts: Mapping[str, str] | None = None,
) -> EvalReport:
    cfg = spec.config(base_config)
    prompts = external_prompts or {}

    def one(inst: CompletionInstance) -> EvalRow:
        return evaluate_instance(inst, index_builder, backend, spec, cfg, prompts.get(inst.id))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, instances))
    else:
        rows = [one(i) for i in instances]
    return EvalReport(spec.kind.value, rows)


def negative_subset(
    instances: Sequence[CompletionInstance], labeled: Mapping[str, Sequence[LabeledChunk]]
) -> list[CompletionInstance]:
    """Instances whose labeled top-k holds at least one negative chunk."""
    return [
        inst for inst in instances
        if any(lc.polarity is Polarity.NEGATIVE for lc in labeled.get(inst.id, ()))
    ]


@dataclass
class LengthReport:
    means: dict[str, float]
    filtered_to_full: float | None

    def table(self) -> str:
        lines = [f"{'strategy':<10} {'mean_cross_file_tokens':>24}"]
        lines += [f"{k:<10} {v:>24.2f}" for k, v in self.means.items()]
        if self.filtered_to_full is not None:
            lines.append(f"filter/full ratio: {self.filtered_to_full:.4f}")
        return "\n".join(lines) + "\n"


def length_report(reports: Sequence[EvalReport]) -> LengthReport:
    if reports:
        ids = {r.id for r in reports[0].rows}
        for rep in reports[1:]:
            if {r.id for r in rep.rows} != ids:
                raise ValueError("length_report needs the same instance set for every strategy")
    means = {rep.strategy: rep.aggregates["mean_cross_file_tokens"] for rep in reports}
    ratio = None
    full = means.get(StrategyKind.FULL_RETRIEVE.value)
    if StrategyKind.FILTERED.value in means and full:
        ratio = means[StrategyKind.FILTERED.value] / full
    return LengthReport(means, ratio)


def summary_table(reports: Sequence[EvalReport]) -> str:
    head = f"{'strategy':<8} {'n':>5} {'failed':>6} {'EM%':>7} {'ES%':>7} {'xfile_tok':>10} {'signal_tok':>10}"
    lines = [head]
    for rep in reports:
        a = rep.aggregates
        lines.append(
            f"{rep.strategy:<8} {a['n']:>5} {a['n_failed']:>6} {a['em_pct']:>7.2f} {a['es_mean_pct']:>7.2f} "
            f"{a['mean_cross_file_tokens']:>10.1f} {a['mean_signal_tokens']:>10.2f}"
        )
    return "\n".join(lines) + "\n"
