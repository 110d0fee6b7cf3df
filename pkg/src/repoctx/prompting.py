"""Prompt rendering shared by labeling, inference, export and dataset building.

Two layouts exist:

* the *generation* layout: a commented cross-file block followed by the
  fill-in-the-middle markers and in-file context. Used for every completion
  call, for likelihood scoring and for exported prompts, so all strategies see
  the same format.
* the *signal* layout: in-file context first, then ``<MC>`` + chunk + polarity
  token repeated. Used for the signal-token decisions and for training records.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .chunk_index import CodeChunk, RankedChunk
from .corpus import CompletionInstance
from .errors import PromptOverflow

CountFn = Callable[[str], int]

BANNER = "# Here are relevant code fragments from other files of the repo:\n"
SEPARATOR = "# " + "-" * 50
FOUND_IN = "# the below code fragment can be found in:"


@dataclass(frozen=True)
class SignalTokens:
    ec: str = "<EC>"
    mc: str = "<MC>"
    pos: str = "<pos>"
    neg: str = "<neg>"
    neu: str = "<neu>"

    def __post_init__(self):
        if len({self.ec, self.mc, self.pos, self.neg, self.neu}) != 5:
            raise ValueError("signal tokens must be distinct")

    @property
    def adaptive(self) -> tuple[str, str]:
        return (self.ec, self.mc)

    @property
    def polarity(self) -> tuple[str, str, str]:
        return (self.pos, self.neg, self.neu)

    @property
    def all(self) -> tuple[str, ...]:
        return self.adaptive + self.polarity


@dataclass(frozen=True)
class FimMarkers:
    prefix: str = "<fim_prefix>"
    suffix: str = "<fim_suffix>"
    middle: str = "<fim_middle>"


class Role(str, enum.Enum):
    PREFIX_MARKER = "PrefixMarker"
    LEFT_CONTEXT = "LeftContext"
    SUFFIX_MARKER = "SuffixMarker"
    RIGHT_CONTEXT = "RightContext"
    CROSS_FILE_HEADER = "CrossFileHeader"
    MC = "MC"
    CHUNK_BODY = "ChunkBody"
    POLARITY_TOKEN = "PolarityToken"
    EC = "EC"
    MIDDLE_MARKER = "MiddleMarker"
    TARGET = "Target"


SIGNAL_ROLES = frozenset({Role.MC, Role.POLARITY_TOKEN, Role.EC})
SUPERVISED_ROLES = SIGNAL_ROLES | {Role.TARGET}


@dataclass(frozen=True)
class Segment:
    role: Role
    text: str
    supervised: bool = False
    loss_weight: float = 0.0

    @classmethod
    def of(cls, role: Role, text: str, signal_weight: float = 2.0) -> "Segment":
        if role in SIGNAL_ROLES:
            return cls(role, text, True, signal_weight)
        if role is Role.TARGET:
            return cls(role, text, True, 1.0)
        return cls(role, text)

    def to_dict(self) -> dict:
        return {"role": self.role.value, "text": self.text, "supervised": self.supervised, "loss_weight": self.loss_weight}

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        return cls(Role(d["role"]), d["text"], bool(d["supervised"]), float(d["loss_weight"]))


@dataclass(frozen=True)
class TokenCounts:
    in_file: int
    cross_file: int
    total: int


@dataclass(frozen=True)
class PromptPlan:
    segments: tuple[Segment, ...]
    token_counts: TokenCounts
    chunk_ranks: tuple[int, ...] = ()
    dropped_ranks: tuple[int, ...] = field(default=(), compare=False)

    @property
    def text(self) -> str:
        return "".join(s.text for s in self.segments)


class PromptMode(str, enum.Enum):
    INFERENCE = "inference"
    LABELING = "labeling"
    EXPORT = "export"


@dataclass(frozen=True)
class PromptBudget:
    max_prompt_tokens: int = 4096
    in_file_budget: int = 1024
    cross_file_budget: int = 3072

    def __post_init__(self):
        if self.in_file_budget + self.cross_file_budget > self.max_prompt_tokens:
            raise ValueError("in_file_budget + cross_file_budget must not exceed max_prompt_tokens")


def render_chunk(chunk: CodeChunk) -> str:
    """Four comment header lines followed by the chunk body, each line commented."""
    head = [SEPARATOR, FOUND_IN, f"# {chunk.path}", SEPARATOR]
    return "".join(line + "\n" for line in head + [f"# {line}" for line in chunk.lines])


def render_cross_file_block(chunks: Iterable[CodeChunk]) -> str:
    rendered = [render_chunk(c) for c in chunks]
    if not rendered:
        return ""
    return BANNER + "".join(rendered)


def parse_rendered_chunks(text: str, strip_tokens: Sequence[str] = ()) -> list[tuple[str, str]]:
    """Recover (path, body) pairs from text containing rendered chunks."""
    for tok in strip_tokens:
        text = text.replace(tok, "\n")
    lines = text.split("\n")
    out = []
    i = 0
    while i + 3 < len(lines):
        if lines[i] == SEPARATOR and lines[i + 1] == FOUND_IN and lines[i + 3] == SEPARATOR:
            path = lines[i + 2][2:]
            i += 4
            body = []
            while i < len(lines) and lines[i].startswith("#") and lines[i] != SEPARATOR:
                body.append(lines[i][2:])
                i += 1
            out.append((path, "\n".join(body)))
        else:
            i += 1
    return out


# -- budget helpers -------------------------------------------------------------------------


def _line_starts(text: str) -> list[int]:
    return [0] + [m.end() for m in re.finditer("\n", text) if m.end() < len(text)]


def truncate_head(text: str, budget: int, count: CountFn) -> str:
    """Longest suffix of ``text`` within ``budget``; whole lines first, then characters."""
    if count(text) <= budget:
        return text
    if budget <= 0:
        return ""
    starts = _line_starts(text)
    lo, hi = 0, len(starts)  # first index whose suffix fits, searched in [lo, hi]
    while lo < hi:
        mid = (lo + hi) // 2
        if count(text[starts[mid]:]) <= budget:
            hi = mid
        else:
            lo = mid + 1
    if lo < len(starts) and lo > 0:
        return text[starts[lo]:]
    # the last line alone is too long: cut characters from its start
    line_start = starts[-1]
    lo, hi = line_start, len(text)
    while lo < hi:
        mid = (lo + hi) // 2
        if count(text[mid:]) <= budget:
            hi = mid
        else:
            lo = mid + 1
    return text[lo:]


def truncate_tail(text: str, budget: int, count: CountFn) -> str:
    """Longest prefix of ``text`` within ``budget``; whole lines first, then characters."""
    if count(text) <= budget:
        return text
    if budget <= 0:
        return ""
    ends = [m.end() for m in re.finditer("\n", text)]
    lo, hi = 0, len(ends)  # number of whole lines kept
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if count(text[: ends[mid - 1]]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    if lo > 0:
        return text[: ends[lo - 1]]
    first_end = ends[0] if ends else len(text)
    lo, hi = 0, first_end
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if count(text[:mid]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo]


@dataclass(frozen=True)
class InFileRegion:
    left: str
    right: str


def fit_in_file(
    instance: CompletionInstance, markers: FimMarkers, budget: int, count: CountFn
) -> InFileRegion:
    """Trim left context from its start and right context from its end to fit ``budget``.

    Each side is guaranteed half of the content budget; a side needing less
    donates the remainder to the other.
    """
    overhead = count(markers.prefix) + count(markers.suffix) + count(markers.middle)
    content = budget - overhead
    if content < 0:
        raise PromptOverflow(f"{instance.id}: FIM markers alone exceed the in-file budget")
    left, right = instance.prefix_text, instance.suffix_text
    n_left, n_right = count(left), count(right)
    if n_left + n_right <= content:
        return InFileRegion(left, right)
    half = content // 2
    if n_right <= half:
        right_alloc = n_right
    elif n_left <= content - half:
        right_alloc = content - n_left
    else:
        right_alloc = half
    left_alloc = content - right_alloc
    return InFileRegion(truncate_head(left, left_alloc, count), truncate_tail(right, right_alloc, count))


def _in_file_segments(region: InFileRegion, markers: FimMarkers) -> list[Segment]:
    return [
        Segment.of(Role.PREFIX_MARKER, markers.prefix),
        Segment.of(Role.LEFT_CONTEXT, region.left),
        Segment.of(Role.SUFFIX_MARKER, markers.suffix),
        Segment.of(Role.RIGHT_CONTEXT, region.right),
    ]


def assemble_prompt(
    instance: CompletionInstance,
    kept: Sequence[RankedChunk],
    budget: PromptBudget,
    count: CountFn,
    mode: PromptMode = PromptMode.INFERENCE,
    markers: FimMarkers = FimMarkers(),
) -> PromptPlan:
    """Build the budgeted generation prompt.

    Chunks keep the order given. Under cross-file pressure the chunk with the
    worst retrieval rank is dropped first; labeling prompts never drop their
    chunk and overflow instead.
    """
    region = fit_in_file(instance, markers, budget.in_file_budget, count)
    in_file_segs = _in_file_segments(region, markers) + [Segment.of(Role.MIDDLE_MARKER, markers.middle)]
    in_file_text = "".join(s.text for s in in_file_segs)
    n_in = count(in_file_text)
    if n_in > budget.in_file_budget:
        raise PromptOverflow(f"{instance.id}: in-file context exceeds budget after truncation")

    # positions in the order they would be dropped: worst retrieval rank first
    drop_order = sorted(range(len(kept)), key=lambda i: -kept[i].rank)

    def attempt(n_drop: int):
        gone = set(drop_order[:n_drop])
        chunks = [rc for i, rc in enumerate(kept) if i not in gone]
        cross_text = render_cross_file_block(rc.chunk for rc in chunks)
        n_cross = count(cross_text)
        if n_cross > budget.cross_file_budget:
            return None
        n_total = count(cross_text + in_file_text)
        return (chunks, n_cross, n_total) if n_total <= budget.max_prompt_tokens else None

    fitted = attempt(0)
    if fitted is None:
        if mode is PromptMode.LABELING or not kept:
            raise PromptOverflow(f"{instance.id}: cross-file context exceeds budget")
        # dropping more chunks never adds tokens, so search for the fewest drops that fit
        lo, hi = 1, len(kept)
        fitted = attempt(hi)
        if fitted is None:
            raise PromptOverflow(f"{instance.id}: cross-file context exceeds budget")
        while lo < hi:
            mid = (lo + hi) // 2
            trial = attempt(mid)
            if trial is None:
                lo = mid + 1
            else:
                hi, fitted = mid, trial
    chunks, n_cross, n_total = fitted
    dropped = [kept[i].rank for i in drop_order[: len(kept) - len(chunks)]]

    segments: list[Segment] = []
    if chunks:
        segments.append(Segment.of(Role.CROSS_FILE_HEADER, BANNER))
        segments.extend(Segment.of(Role.CHUNK_BODY, render_chunk(rc.chunk)) for rc in chunks)
    segments.extend(in_file_segs)
    return PromptPlan(
        tuple(segments),
        TokenCounts(n_in, n_cross, n_total),
        tuple(rc.rank for rc in chunks),
        tuple(dropped),
    )


def signal_prompt(
    instance: CompletionInstance,
    sequence: Sequence[tuple[RankedChunk, str | None]],
    budget: PromptBudget,
    count: CountFn,
    tokens: SignalTokens = SignalTokens(),
    markers: FimMarkers = FimMarkers(),
) -> PromptPlan:
    """Signal-layout prompt: in-file context, then ``<MC>`` chunk [polarity] per entry.

    An entry with polarity ``None`` is the candidate awaiting judgment.
    """
    region = fit_in_file(instance, markers, budget.in_file_budget, count)
    segments = _in_file_segments(region, markers)
    n_in = count("".join(s.text for s in segments))
    for rc, polarity in sequence:
        segments.append(Segment.of(Role.MC, tokens.mc))
        segments.append(Segment.of(Role.CHUNK_BODY, render_chunk(rc.chunk)))
        if polarity is not None:
            segments.append(Segment.of(Role.POLARITY_TOKEN, polarity))
    cross_text = "".join(s.text for s in segments[4:])
    text = "".join(s.text for s in segments)
    return PromptPlan(
        tuple(segments),
        TokenCounts(n_in, count(cross_text), count(text)),
        tuple(rc.rank for rc, _ in sequence),
    )


@dataclass(frozen=True)
class ParsedPrompt:
    """Regions recovered from a rendered prompt of either layout."""

    left: str
    right: str
    context_bodies: tuple[str, ...]
    candidate: str | None


def parse_prompt(text: str, markers: FimMarkers = FimMarkers(), tokens: SignalTokens = SignalTokens()) -> ParsedPrompt | None:
    """Split a prompt into in-file regions, accepted chunk bodies and a pending candidate.

    In the generation layout every rendered chunk counts as context. In the
    signal layout only chunks followed by the positive token count; a trailing
    chunk with no polarity token is the candidate.
    """
    p = text.find(markers.prefix)
    s = text.find(markers.suffix, p + len(markers.prefix)) if p != -1 else -1
    if p == -1 or s == -1:
        return None
    head = text[:p]
    left = text[p + len(markers.prefix) : s]
    rest = text[s + len(markers.suffix) :]
    cut = len(rest)
    for stop in (markers.middle, tokens.mc, tokens.ec):
        pos = rest.find(stop)
        if pos != -1:
            cut = min(cut, pos)
    right, tail = rest[:cut], rest[cut:]

    bodies = [body for _, body in parse_rendered_chunks(head)]
    candidate = None
    pieces = tail.split(tokens.mc)[1:]
    for i, piece in enumerate(pieces):
        found = parse_rendered_chunks(piece, tokens.all)
        if not found:
            continue
        body = found[0][1]
        if tokens.pos in piece:
            bodies.append(body)
        elif i == len(pieces) - 1 and not any(t in piece for t in tokens.polarity):
            candidate = body
    return ParsedPrompt(left, right, tuple(bodies), candidate)
