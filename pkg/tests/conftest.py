from __future__ import annotations

import json
from pathlib import Path

import pytest

from repoctx.corpus import CompletionInstance, RepoSnapshot, Setting, SourceFile, load_repo


def write_tree(root: Path, files: dict[str, str | bytes]) -> Path:
    for rel, content in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content, encoding="utf-8")
    return root


def write_tasks(path: Path, records: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def snapshot(files: dict[str, str], root: str = "/virtual/demo") -> RepoSnapshot:
    return RepoSnapshot(Path(root), tuple(SourceFile.from_text(p, t) for p, t in sorted(files.items())))


def instance(
    prefix: list[str],
    target: list[str] | None,
    suffix: list[str] = (),
    inst_id: str = "t0",
    path: str = "main.py",
    setting: Setting = Setting.INFILLING,
    repo: RepoSnapshot | None = None,
) -> CompletionInstance:
    return CompletionInstance(inst_id, path, list(prefix), list(suffix), None if target is None else list(target),
                              setting, repo)


@pytest.fixture
def demo_repo(tmp_path: Path) -> RepoSnapshot:
    """Target file ``app/main.py`` plus twelve single-chunk helper files."""
    files = {
        "app/main.py": "\n".join([
            "from app import util",
            "from app import store",
            "from app import codec",
            "",
            "def main(cfg):",
            "    db = store.open(cfg)",
            "    rows = db.fetch(cfg.query)",
            "    result = codec.encode(rows, cfg.level)",
            "    return result",
        ]) + "\n",
    }
    for i in range(12):
        files[f"app/helper_{i:02d}.py"] = "\n".join(
            [f"def helper_{i}(cfg):", f"    db = store.open(cfg)", f"    value_{i} = db.fetch(cfg.query)",
             f"    return value_{i}"]
        ) + "\n"
    write_tree(tmp_path / "demo", files)
    return load_repo(tmp_path / "demo")
