"""Synthetic repositories with planted helpful, misleading and irrelevant chunks.

Every planted chunk lives in its own short file so that it forms exactly one
retrieval chunk. Identifiers carry an instance tag, so chunks of different
instances share only a handful of keywords.
"""

from __future__ import annotations

import json
import os
import random
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import CompletionInstance, Setting, load_repo, write_instances

ROLES = ("pos", "neg", "neu")
# keeps the target line unlike every in-file line (ES < 0.5) so only a helpful chunk makes it sufficient
_TAIL = ".result(timeout=30, retries=2)"
_SYLLABLES = ("ka", "lo", "mi", "ru", "te", "zo", "vi", "pa", "nu", "se", "do", "fe", "gi", "ha", "jo", "wu")


@dataclass(frozen=True)
class PlantedChunk:
    path: str
    role: str


@dataclass
class SynthInstance:
    id: str
    target_path: str
    chunks: list[PlantedChunk] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"id": self.id, "target_path": self.target_path,
                "chunks": [{"path": c.path, "role": c.role} for c in self.chunks]}


@dataclass
class SynthCorpus:
    root: Path
    repo_root: Path
    task_file: Path
    plant_file: Path
    plants: list[SynthInstance]
    instances: list[CompletionInstance]

    def plant_of(self, instance_id: str) -> SynthInstance:
        return next(p for p in self.plants if p.id == instance_id)


def _plant_for(plant_spec: Mapping[str, int] | Sequence[Mapping[str, int]], i: int) -> dict[str, int]:
    spec = plant_spec if isinstance(plant_spec, Mapping) else plant_spec[i]
    unknown = set(spec) - set(ROLES)
    if unknown:
        raise ValueError(f"unknown plant roles: {sorted(unknown)}")
    out = {r: int(spec.get(r, 0)) for r in ROLES}
    if any(v < 0 for v in out.values()):
        raise ValueError("plant counts must be non-negative")
    return out


def _word(rng: random.Random) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(3))


def _target_file(t: str) -> tuple[list[str], int]:
    lines = [
        f"from pkg_{t} import store_{t}",
        f"from pkg_{t} import codec_{t}",
        f"from pkg_{t} import wire_{t}",
        "",
        "",
        f"def handle_{t}(arg_{t}, cfg_{t}):",
        f"    out_{t} = None",
        f"    ctx_{t} = store_{t}.setup_{t}(cfg_{t})",
        f"    out_{t} = api_{t}(arg_{t}, key_{t}){_TAIL}",
        f"    return out_{t}",
    ]
    return lines, 8


def _helpful(t: str) -> list[str]:
    return [
        f"def sample_{t}(arg_{t}, key_{t}, cfg_{t}):",
        f"    ctx_{t} = store_{t}.setup_{t}(cfg_{t})",
        f"    out_{t} = api_{t}(arg_{t}, key_{t}){_TAIL}",
        f"    return out_{t}",
    ]


def _misleading(t: str) -> list[str]:
    return [
        f"def handle_old_{t}(arg_{t}, cfg_{t}):",
        f"    out_{t} = None",
        f"    ctx_{t} = store_{t}.setup_{t}(cfg_{t})",
        f"    out_{t} = legacy_{t}(arg_{t})",
        f"    return out_{t}",
    ]


def _irrelevant(t: str, k: int, rng: random.Random) -> list[str]:
    w = f"{_word(rng)}{k}_{t}"
    # some irrelevant chunks resemble the query more closely than the helpful one
    body = f"codec_{t}.wire_{t}(ctx_{t})" if rng.random() < 0.4 else f"dict(ctx_{t})"
    return [
        f"def setup_{w}(cfg_{t}):",
        f"    ctx_{t} = store_{t}.setup_{t}(cfg_{t})",
        f"    {w} = {body}",
        f"    return {w}",
    ]


def synth_corpus(
    seed: int,
    n_instances: int,
    plant_spec: Mapping[str, int] | Sequence[Mapping[str, int]],
    out_dir: str | os.PathLike,
) -> SynthCorpus:
    """Write ``repo/``, ``tasks.jsonl`` and ``plant.jsonl`` under ``out_dir``.

    ``plant_spec`` is one ``{pos, neg, neu}`` count mapping for all instances
    or a list with one mapping per instance. Output is a pure function of the
    arguments.
    """
    if not isinstance(plant_spec, Mapping) and len(plant_spec) != n_instances:
        raise ValueError("per-instance plant_spec must have n_instances entries")
    rng = random.Random(seed)
    root = Path(out_dir)
    repo_root = root / "repo"
    if repo_root.exists():
        shutil.rmtree(repo_root)
    repo_root.mkdir(parents=True)

    plants: list[SynthInstance] = []
    targets: list[tuple[str, str, int]] = []
    for i in range(n_instances):
        t = f"{_word(rng)}{i}"
        pkg = f"pkg_{t}"
        (repo_root / pkg).mkdir()
        lines, target_idx = _target_file(t)
        target_path = f"{pkg}/core.py"
        (repo_root / target_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        counts = _plant_for(plant_spec, i)
        bodies = [("pos", _helpful(t))] * counts["pos"] + [("neg", _misleading(t))] * counts["neg"]
        bodies += [("neu", _irrelevant(t, k, rng)) for k in range(counts["neu"])]
        rng.shuffle(bodies)
        plant = SynthInstance(f"synth/{i:04d}", target_path)
        for k, (role, body) in enumerate(bodies):
            path = f"{pkg}/part_{k:02d}.py"
            (repo_root / path).write_text("\n".join(body) + "\n", encoding="utf-8")
            plant.chunks.append(PlantedChunk(path, role))
        plants.append(plant)
        targets.append((plant.id, target_path, target_idx))

    repo = load_repo(repo_root)
    instances = []
    for inst_id, path, idx in targets:
        lines = list(repo.get(path).lines)
        instances.append(CompletionInstance(
            id=inst_id, target_path=path, prefix_lines=lines[:idx], suffix_lines=lines[idx + 1 :],
            target_lines=[lines[idx]], setting=Setting.INFILLING, repo=repo,
        ))
    task_file = root / "tasks.jsonl"
    plant_file = root / "plant.jsonl"
    write_instances(instances, task_file)
    with open(plant_file, "w", encoding="utf-8") as fh:
        for p in plants:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")
    return SynthCorpus(root, repo_root, task_file, plant_file, plants, instances)
