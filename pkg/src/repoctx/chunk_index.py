"""Sliding-window chunking of cross-file code and sparse top-k retrieval."""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass
from typing import IO, Iterable, Protocol, Sequence

from .corpus import RepoSnapshot, SourceFile, normalize_relpath

_TOKEN_RE = re.compile(r"\w+")


@dataclass(frozen=True)
class ChunkerConfig:
    window: int = 10
    stride: int = 5

    def __post_init__(self):
        if not (1 <= self.stride <= self.window):
            raise ValueError(f"need 1 <= stride <= window, got stride={self.stride} window={self.window}")


@dataclass(frozen=True)
class CodeChunk:
    path: str
    start_line: int
    end_line: int
    lines: tuple[str, ...]
    token_set: frozenset[str]

    @property
    def text(self) -> str:
        return "\n".join(self.lines)

    @property
    def key(self) -> tuple[str, int]:
        return (self.path, self.start_line)


@dataclass(frozen=True)
class RankedChunk:
    chunk: CodeChunk
    rank: int
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    query_lines: tuple[str, ...]
    ranked: tuple[RankedChunk, ...]
    k: int


def tokenize(text: str) -> set[str]:
    """Identifier-like tokens: maximal runs of word characters, case preserved."""
    return set(_TOKEN_RE.findall(text))


def token_list(text: str) -> list[str]:
    """Same tokens as :func:`tokenize`, with multiplicity and in order."""
    return _TOKEN_RE.findall(text)


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def chunk_starts(n_lines: int, cfg: ChunkerConfig) -> list[int]:
    if n_lines <= 0:
        return []
    last = max(1, n_lines - cfg.window + 1)
    starts = list(range(1, last + 1, cfg.stride))
    if starts[-1] != last:
        starts.append(last)
    return starts


def chunk_file(file: SourceFile, cfg: ChunkerConfig = ChunkerConfig()) -> list[CodeChunk]:
    n = len(file.lines)
    chunks = []
    for start in chunk_starts(n, cfg):
        end = min(n, start + cfg.window - 1)
        lines = tuple(file.lines[start - 1 : end])
        chunks.append(CodeChunk(file.path, start, end, lines, frozenset(tokenize("\n".join(lines)))))
    return chunks


class Scorer(Protocol):
    def score(self, query: str, chunk: CodeChunk) -> float: ...


class JaccardScorer:
    def __init__(self):
        self._last: tuple[str, frozenset[str]] | None = None

    def _query_tokens(self, query: str) -> frozenset[str]:
        cached = self._last
        if cached is not None and cached[0] == query:
            return cached[1]
        tokens = frozenset(tokenize(query))
        self._last = (query, tokens)
        return tokens

    def score(self, query: str, chunk: CodeChunk) -> float:
        return jaccard(self._query_tokens(query), chunk.token_set)


@dataclass(frozen=True)
class CrossFileIndex:
    chunks: tuple[CodeChunk, ...]
    exclude_path: str | None = None
    config: ChunkerConfig = ChunkerConfig()

    def __len__(self) -> int:
        return len(self.chunks)


def chunk_repo(repo: RepoSnapshot, cfg: ChunkerConfig = ChunkerConfig()) -> tuple[CodeChunk, ...]:
    return tuple(c for f in repo.files for c in chunk_file(f, cfg))


def build_index(
    repo: RepoSnapshot,
    exclude_path: str | None,
    cfg: ChunkerConfig = ChunkerConfig(),
    chunks: Sequence[CodeChunk] | None = None,
) -> CrossFileIndex:
    """Index every chunk of the repository except those of ``exclude_path``.

    ``chunks`` lets callers reuse a precomputed :func:`chunk_repo` result.
    """
    excluded = normalize_relpath(exclude_path) if exclude_path else None
    if chunks is None:
        chunks = chunk_repo(repo, cfg)
    return CrossFileIndex(tuple(c for c in chunks if c.path != excluded), excluded, cfg)


class IndexBuilder:
    """Chunks a repository once and hands out per-target indexes."""

    def __init__(self, repo: RepoSnapshot, cfg: ChunkerConfig = ChunkerConfig()):
        self.repo = repo
        self.config = cfg
        self._chunks = chunk_repo(repo, cfg)

    def __call__(self, exclude_path: str | None) -> CrossFileIndex:
        return build_index(self.repo, exclude_path, self.config, self._chunks)


def retrieve(
    index: CrossFileIndex,
    prefix_lines: Sequence[str],
    k: int = 10,
    query_window: int = 10,
    scorer: Scorer | None = None,
) -> RetrievalResult:
    """Rank index chunks against the last ``query_window`` prefix lines.

    Ties are broken by (path, start_line) ascending so rankings are reproducible.
    """
    query_lines = tuple(prefix_lines[-query_window:]) if query_window > 0 else ()
    if not index.chunks or k <= 0:
        return RetrievalResult(query_lines, (), k)
    query = "\n".join(query_lines)
    if scorer is None:
        qtok = frozenset(tokenize(query))
        scored = ((jaccard(qtok, c.token_set), c) for c in index.chunks)
    else:
        scored = ((scorer.score(query, c), c) for c in index.chunks)
    top = heapq.nsmallest(k, scored, key=lambda sc: (-sc[0], sc[1].path, sc[1].start_line))
    ranked = tuple(RankedChunk(c, i, s) for i, (s, c) in enumerate(top, 1))
    return RetrievalResult(query_lines, ranked, k)


def dump_index(index: CrossFileIndex, out: IO[str]) -> int:
    for c in index.chunks:
        rec = {"path": c.path, "start_line": c.start_line, "end_line": c.end_line, "tokens": sorted(c.token_set)}
        out.write(json.dumps(rec) + "\n")
    return len(index.chunks)
