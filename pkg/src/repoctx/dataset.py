"""Target sampling, quality filters and verbalized training records."""

from __future__ import annotations

import enum
import json
import logging
import os
import random
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

from .corpus import CompletionInstance, RepoSnapshot, Setting, count_local_imports, import_modules
from .errors import FormatInapplicable
from .labeler import LabeledChunk, Polarity
from .metrics import edit_similarity
from .prompting import (
    FimMarkers,
    PromptBudget,
    Role,
    Segment,
    SignalTokens,
    fit_in_file,
    render_chunk,
)
from .backends.base import fallback_count_tokens

log = logging.getLogger(__name__)

HEADER = "# repoctx training records v1"
MIN_LOCAL_IMPORTS = 3
MIN_TARGET_TOKENS = 6


class TargetKind(str, enum.Enum):
    SINGLE_LINE = "single_line"
    CHUNK = "chunk"
    FUNCTION = "function"


class RecordFormat(str, enum.Enum):
    ALL_CANDIDATES = "all_candidates"
    POSITIVE_ONLY = "positive_only"


@dataclass(frozen=True)
class SamplingConfig:
    targets_per_repo: int = 10
    target_kinds: Mapping[TargetKind, float] = field(
        default_factory=lambda: {TargetKind.SINGLE_LINE: 1.0, TargetKind.CHUNK: 1.0, TargetKind.FUNCTION: 1.0}
    )
    infilling_fraction: float = 0.5
    rng_seed: int = 0
    chunk_min: int = 2
    chunk_max: int = 20
    function_max: int = 49
    attempts_per_target: int = 20

    def __post_init__(self):
        if not self.target_kinds or any(w <= 0 for w in self.target_kinds.values()):
            raise ValueError("target kind weights must be positive")
        if not (1 <= self.chunk_min <= self.chunk_max):
            raise ValueError("bad chunk length bounds")
        if not 0.0 <= self.infilling_fraction <= 1.0:
            raise ValueError("infilling_fraction must lie in [0, 1]")


def _is_comment_or_blank(line: str) -> bool:
    s = line.strip()
    return not s or s.startswith("#")


def is_eligible_target(target_lines: Sequence[str]) -> bool:
    """Reject comment-only, import-bearing or short (< 6 tokens, punctuation included) targets."""
    if not target_lines or all(_is_comment_or_blank(l) for l in target_lines):
        return False
    if any(import_modules(l) is not None for l in target_lines):
        return False
    return fallback_count_tokens("\n".join(target_lines)) >= MIN_TARGET_TOKENS


_DEF_RE = re.compile(r"^(\s*)(async\s+)?def\s+\w+")


def _indent(line: str) -> int:
    return len(line) - len(line.lstrip())


def function_bodies(lines: Sequence[str], max_len: int = 49) -> list[tuple[int, int]]:
    """0-based inclusive spans of function bodies found lexically (def line + deeper indent)."""
    spans = []
    for i, line in enumerate(lines):
        m = _DEF_RE.match(line)
        if not m:
            continue
        base = len(m.group(1))
        j = i + 1
        # skip continuation lines of a multi-line signature
        while j < len(lines) and j - i < 10 and not lines[j - 1].split("#", 1)[0].rstrip().endswith(":"):
            j += 1
        start = j
        end = start - 1
        k = start
        while k < len(lines):
            if lines[k].strip() and _indent(lines[k]) <= base:
                break
            if lines[k].strip():
                end = k
            k += 1
        if end >= start and end - start + 1 <= max_len:
            spans.append((start, end))
    return spans


def _make_instance(repo: RepoSnapshot, path: str, lines: Sequence[str], start: int, end: int,
                   kind: TargetKind, setting: Setting) -> CompletionInstance:
    suffix = list(lines[end + 1 :]) if setting is Setting.INFILLING else []
    return CompletionInstance(
        id=f"{repo.name}/{path}:{start + 1}-{end + 1}:{kind.value}:{setting.value}",
        target_path=path,
        prefix_lines=list(lines[:start]),
        suffix_lines=suffix,
        target_lines=list(lines[start : end + 1]),
        setting=setting,
        repo=repo,
    )


def sample_targets(repo: RepoSnapshot, cfg: SamplingConfig = SamplingConfig()) -> list[CompletionInstance]:
    """Draw targets from files with enough local imports; reproducible under ``rng_seed``."""
    rng = random.Random(cfg.rng_seed)
    eligible = [f for f in repo.files if count_local_imports(f, repo) >= MIN_LOCAL_IMPORTS]
    if not eligible:
        log.warning("%s: no file has >= %d local imports", repo.name, MIN_LOCAL_IMPORTS)
        return []
    kinds = sorted(cfg.target_kinds, key=lambda k: k.value)
    weights = [cfg.target_kinds[k] for k in kinds]
    out: list[CompletionInstance] = []
    seen: set[tuple[str, int, int]] = set()
    for _ in range(cfg.targets_per_repo * cfg.attempts_per_target):
        if len(out) >= cfg.targets_per_repo:
            break
        f = rng.choice(eligible)
        kind = rng.choices(kinds, weights)[0]
        setting = Setting.INFILLING if rng.random() < cfg.infilling_fraction else Setting.LEFT_TO_RIGHT
        n = len(f.lines)
        if kind is TargetKind.SINGLE_LINE:
            start = rng.randrange(n)
            end = start
        elif kind is TargetKind.CHUNK:
            length = rng.randint(cfg.chunk_min, cfg.chunk_max)
            if length > n:
                continue
            start = rng.randrange(n - length + 1)
            end = start + length - 1
        else:
            spans = function_bodies(f.lines, cfg.function_max)
            if not spans:
                continue
            start, end = rng.choice(spans)
        if (f.path, start, end) in seen or not is_eligible_target(f.lines[start : end + 1]):
            continue
        seen.add((f.path, start, end))
        out.append(_make_instance(repo, f.path, f.lines, start, end, kind, setting))
    return out


def _windows(lines: Sequence[str], size: int) -> Iterator[str]:
    if not lines:
        return
    if len(lines) <= size:
        yield "\n".join(lines)
        return
    for i in range(len(lines) - size + 1):
        yield "\n".join(lines[i : i + size])


def sufficiency_filter(instance: CompletionInstance, labeled: Sequence[LabeledChunk], threshold: float = 0.5) -> bool:
    """True iff some positive chunk or in-file window of |Y| lines resembles the target (ES > threshold)."""
    target = instance.target_text
    size = len(instance.target_lines)
    sources = [list(lc.chunk.lines) for lc in labeled if lc.polarity is Polarity.POSITIVE]
    sources += [instance.prefix_lines, instance.suffix_lines]
    best = 0.0
    for src in sources:
        for window in _windows(src, size):
            best = max(best, edit_similarity(window, target))
            if best > threshold:
                return True
    return False


@dataclass(frozen=True)
class TrainingRecord:
    instance_id: str
    format: RecordFormat
    segments: tuple[Segment, ...]

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "format": self.format.value,
                "segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingRecord":
        return cls(d["instance_id"], RecordFormat(d["format"]), tuple(Segment.from_dict(s) for s in d["segments"]))

    @property
    def text(self) -> str:
        return "".join(s.text for s in self.segments)


def verbalize(
    instance: CompletionInstance,
    labeled: Sequence[LabeledChunk],
    fmt: RecordFormat,
    rng: random.Random,
    signal_weight: float = 2.0,
    tokens: SignalTokens = SignalTokens(),
    markers: FimMarkers = FimMarkers(),
    budget: PromptBudget | None = PromptBudget(),
) -> TrainingRecord:
    usable = [lc for lc in labeled if lc.polarity is not Polarity.UNAVAILABLE]
    positives = [lc for lc in usable if lc.polarity is Polarity.POSITIVE]
    polarity_token = {Polarity.POSITIVE: tokens.pos, Polarity.NEUTRAL: tokens.neu, Polarity.NEGATIVE: tokens.neg}

    if fmt is RecordFormat.ALL_CANDIDATES:
        if not positives:
            raise FormatInapplicable(f"{instance.id}: all-candidates format needs a positive chunk")
        order = list(usable)
        rng.shuffle(order)
        last = rng.choice([lc for lc in order if lc.polarity is Polarity.POSITIVE])
        order.remove(last)
        order.append(last)
    else:
        order = sorted(positives, key=lambda lc: lc.retrieval_rank)

    if budget is not None:
        region = fit_in_file(instance, markers, budget.in_file_budget, fallback_count_tokens)
        left, right = region.left, region.right
    else:
        left, right = instance.prefix_text, instance.suffix_text

    def seg(role: Role, text: str) -> Segment:
        return Segment.of(role, text, signal_weight)

    segs = [seg(Role.PREFIX_MARKER, markers.prefix), seg(Role.LEFT_CONTEXT, left),
            seg(Role.SUFFIX_MARKER, markers.suffix), seg(Role.RIGHT_CONTEXT, right)]
    for lc in order:
        segs += [seg(Role.MC, tokens.mc), seg(Role.CHUNK_BODY, render_chunk(lc.chunk)),
                 seg(Role.POLARITY_TOKEN, polarity_token[lc.polarity])]
    segs += [seg(Role.EC, tokens.ec), seg(Role.MIDDLE_MARKER, markers.middle)]
    if fmt is RecordFormat.POSITIVE_ONLY:
        segs.append(seg(Role.TARGET, instance.target_text))
    return TrainingRecord(instance.id, fmt, tuple(segs))


_ROLE_CODES = {
    Role.PREFIX_MARKER: "P", Role.LEFT_CONTEXT: "L", Role.SUFFIX_MARKER: "S", Role.RIGHT_CONTEXT: "R",
    Role.MC: "M", Role.CHUNK_BODY: "C", Role.EC: "E", Role.MIDDLE_MARKER: "I", Role.TARGET: "Y",
}
_GRAMMAR = {
    RecordFormat.ALL_CANDIDATES: re.compile(r"PLSR(MC[pun])*MCpEI"),
    RecordFormat.POSITIVE_ONLY: re.compile(r"PLSR(MCp)*EIY"),
}


def role_string(record: TrainingRecord, tokens: SignalTokens = SignalTokens()) -> str:
    codes = {tokens.pos: "p", tokens.neu: "u", tokens.neg: "n"}
    return "".join(
        codes.get(s.text, "?") if s.role is Role.POLARITY_TOKEN else _ROLE_CODES.get(s.role, "?")
        for s in record.segments
    )


def check_grammar(record: TrainingRecord, tokens: SignalTokens = SignalTokens()) -> bool:
    return _GRAMMAR[record.format].fullmatch(role_string(record, tokens)) is not None


def export_records(records: Iterable[TrainingRecord], path: str | os.PathLike) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(HEADER + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n


def load_records(path: str | os.PathLike) -> Iterator[TrainingRecord]:
    """Stream records back one line at a time."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            yield TrainingRecord.from_dict(json.loads(line))
