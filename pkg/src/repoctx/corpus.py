"""Repository snapshots and completion-task records."""

from __future__ import annotations

import enum
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Iterable, Sequence

from .errors import CorpusError, NoValidRecords

log = logging.getLogger(__name__)

DEFAULT_EXTENSIONS = (".py",)
SKIP_DIRS = {".git", ".hg", ".svn", "__pycache__", ".venv", "node_modules"}


def split_lines(text: str) -> list[str]:
    """Split on ``\\n`` only; a single trailing newline does not open a new line."""
    if not text:
        return []
    parts = text.split("\n")
    if text.endswith("\n"):
        parts.pop()
    return parts


def join_lines(lines: Sequence[str], trailing_newline: bool = True) -> str:
    if not lines:
        return ""
    return "\n".join(lines) + ("\n" if trailing_newline else "")


@dataclass(frozen=True)
class SourceFile:
    path: str
    lines: tuple[str, ...]
    trailing_newline: bool = True

    @property
    def text(self) -> str:
        return join_lines(self.lines, self.trailing_newline)

    @classmethod
    def from_text(cls, path: str, text: str) -> "SourceFile":
        return cls(path, tuple(split_lines(text)), text.endswith("\n"))


@dataclass(frozen=True)
class LoadWarning:
    path: str
    message: str


@dataclass(frozen=True)
class RepoSnapshot:
    root_path: Path
    files: tuple[SourceFile, ...]
    language_filter: tuple[str, ...] = DEFAULT_EXTENSIONS
    warnings: tuple[LoadWarning, ...] = ()

    def __post_init__(self):
        paths = [f.path for f in self.files]
        if len(set(paths)) != len(paths):
            raise CorpusError("duplicate file paths in snapshot")
        object.__setattr__(self, "_by_path", {f.path: f for f in self.files})

    def get(self, path: str) -> SourceFile | None:
        return self._by_path.get(normalize_relpath(path))

    @property
    def name(self) -> str:
        return self.root_path.name

    @property
    def top_level_names(self) -> frozenset[str]:
        """First path segment of every file, with the extension removed for root-level files."""
        names = set()
        for f in self.files:
            parts = PurePosixPath(f.path).parts
            if len(parts) == 1:
                names.add(PurePosixPath(parts[0]).stem)
            else:
                names.add(parts[0])
        return frozenset(names)


def normalize_relpath(path: str | os.PathLike) -> str:
    p = PurePosixPath(str(path).replace("\\", "/"))
    parts = [part for part in p.parts if part not in ("", ".")]
    if p.is_absolute() or ".." in parts:
        raise CorpusError(f"path must be repository-relative: {path}")
    return "/".join(parts)


def _read_file(root: Path, rel: str) -> tuple[SourceFile | None, LoadWarning | None]:
    try:
        raw = (root / rel).read_bytes()
    except OSError as exc:
        return None, LoadWarning(rel, f"unreadable: {exc}")
    try:
        text = raw.decode("utf-8")
        warning = None
    except UnicodeDecodeError:
        text = raw.decode("utf-8", errors="replace")
        warning = LoadWarning(rel, "invalid UTF-8 replaced")
    return SourceFile.from_text(rel, text), warning


def load_repo(
    root: str | os.PathLike,
    extensions: Iterable[str] = DEFAULT_EXTENSIONS,
    workers: int = 1,
) -> RepoSnapshot:
    root = Path(root)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise CorpusError(f"repository root is not a readable directory: {root}")
    exts = tuple(e if e.startswith(".") else "." + e for e in extensions)

    rels = []
    for dirpath, dirnames, filenames in os.walk(root, followlinks=False):
        dirnames[:] = [d for d in dirnames if d not in SKIP_DIRS]
        for name in filenames:
            full = Path(dirpath) / name
            if full.is_symlink() or not name.endswith(exts):
                continue
            rels.append(full.relative_to(root).as_posix())
    rels.sort()

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda r: _read_file(root, r), rels))
    else:
        results = [_read_file(root, r) for r in rels]

    files, warnings = [], []
    for sf, warning in results:
        if sf is not None:
            files.append(sf)
        if warning is not None:
            log.warning("%s: %s", warning.path, warning.message)
            warnings.append(warning)
    return RepoSnapshot(root, tuple(files), exts, tuple(warnings))


class Setting(str, enum.Enum):
    INFILLING = "infilling"
    LEFT_TO_RIGHT = "left_to_right"

    @classmethod
    def parse(cls, value: str) -> "Setting":
        aliases = {"l2r": cls.LEFT_TO_RIGHT, "left-to-right": cls.LEFT_TO_RIGHT, "fim": cls.INFILLING}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise CorpusError(f"unknown setting {value!r}") from None


@dataclass
class CompletionInstance:
    id: str
    target_path: str
    prefix_lines: list[str]
    suffix_lines: list[str] = field(default_factory=list)
    target_lines: list[str] | None = None
    setting: Setting = Setting.INFILLING
    repo: RepoSnapshot | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.setting is Setting.LEFT_TO_RIGHT and self.suffix_lines:
            raise CorpusError(f"{self.id}: left_to_right instance must have an empty suffix")

    @property
    def prefix_text(self) -> str:
        return join_lines(self.prefix_lines)

    @property
    def suffix_text(self) -> str:
        return join_lines(self.suffix_lines, trailing_newline=False)

    @property
    def target_text(self) -> str:
        if not self.target_lines:
            raise CorpusError(f"{self.id}: no target available")
        return "\n".join(self.target_lines)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "target_path": self.target_path,
            "prefix": self.prefix_text,
            "suffix": self.suffix_text,
            "target": None if self.target_lines is None else join_lines(self.target_lines),
            "setting": self.setting.value,
        }


@dataclass(frozen=True)
class RecordError:
    line_no: int
    message: str


@dataclass
class InstanceLoad:
    instances: list[CompletionInstance]
    errors: list[RecordError]
    repo: RepoSnapshot


def parse_instance(record: dict, repo: RepoSnapshot | None, require_target: bool) -> CompletionInstance:
    if not isinstance(record, dict):
        raise CorpusError("record is not an object")
    for key in ("id", "target_path", "prefix"):
        if not isinstance(record.get(key), str):
            raise CorpusError(f"missing or non-string field {key!r}")
    suffix = record.get("suffix") or ""
    target = record.get("target")
    if not isinstance(suffix, str) or (target is not None and not isinstance(target, str)):
        raise CorpusError("suffix/target must be strings")
    target_lines = split_lines(target) if target is not None else None
    if require_target and not target_lines:
        raise CorpusError("target is required in this mode")
    path = normalize_relpath(record["target_path"])
    if repo is not None and repo.get(path) is None:
        raise CorpusError(f"target_path {path!r} not found under repository root")
    return CompletionInstance(
        id=record["id"],
        target_path=path,
        prefix_lines=split_lines(record["prefix"]),
        suffix_lines=split_lines(suffix),
        target_lines=target_lines,
        setting=Setting.parse(record.get("setting", "infilling")),
        repo=repo,
    )


def load_instances(
    task_file: str | os.PathLike,
    repo_root: str | os.PathLike,
    require_target: bool = True,
    extensions: Iterable[str] = DEFAULT_EXTENSIONS,
    repo: RepoSnapshot | None = None,
) -> InstanceLoad:
    """Parse a line-delimited task file; bad records are reported, not fatal."""
    if repo is None:
        repo = load_repo(repo_root, extensions)
    instances: list[CompletionInstance] = []
    errors: list[RecordError] = []
    seen: set[str] = set()
    with open(task_file, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                inst = parse_instance(json.loads(line), repo, require_target)
                if inst.id in seen:
                    raise CorpusError(f"duplicate id {inst.id!r}")
            except (json.JSONDecodeError, CorpusError) as exc:
                errors.append(RecordError(line_no, str(exc)))
                continue
            seen.add(inst.id)
            instances.append(inst)
    if not instances:
        raise NoValidRecords(f"{task_file}: no valid records ({len(errors)} rejected)")
    return InstanceLoad(instances, errors, repo)


def write_instances(instances: Iterable[CompletionInstance], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


_IMPORT_RE = re.compile(r"^\s*import\s+(.+)$")
_FROM_RE = re.compile(r"^\s*from\s+(\S+)\s+import\b")


def import_modules(line: str) -> list[str] | None:
    """Module paths named by one import statement line, or None if the line is not an import."""
    m = _FROM_RE.match(line)
    if m:
        return [m.group(1)]
    m = _IMPORT_RE.match(line)
    if m:
        body = m.group(1).split("#", 1)[0]
        return [part.split(" as ")[0].strip() for part in body.strip("()\\ ").split(",") if part.strip()]
    return None


def count_local_imports(file: SourceFile, repo: RepoSnapshot) -> int:
    """Count import statements whose first module segment names a top-level repo entry.

    Relative imports (``from . import x``) are always local.
    """
    local = repo.top_level_names
    count = 0
    for line in file.lines:
        modules = import_modules(line)
        if not modules:
            continue
        if any(mod.startswith(".") or mod.split(".")[0] in local for mod in modules):
            count += 1
    return count
