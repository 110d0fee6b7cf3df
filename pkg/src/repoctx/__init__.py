"""Cross-file retrieval context tooling for repository-level code completion."""

from .chunk_index import ChunkerConfig, CodeChunk, IndexBuilder, build_index, chunk_file, retrieve
from .corpus import CompletionInstance, RepoSnapshot, load_instances, load_repo
from .engine import EngineConfig, export_filtered_prompt, filter_chunks, run
from .errors import ReproError
from .labeler import LabelerConfig, Polarity, contribution_score, label_chunks
from .metrics import edit_similarity, exact_match

__version__ = "0.1.0"

__all__ = [
    "ChunkerConfig",
    "CodeChunk",
    "CompletionInstance",
    "EngineConfig",
    "IndexBuilder",
    "LabelerConfig",
    "Polarity",
    "RepoSnapshot",
    "ReproError",
    "build_index",
    "chunk_file",
    "contribution_score",
    "edit_similarity",
    "exact_match",
    "export_filtered_prompt",
    "filter_chunks",
    "label_chunks",
    "load_instances",
    "load_repo",
    "retrieve",
    "run",
]
