"""Command-line entry point: ``repoctx <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import random
import re
import sys
from pathlib import Path
from typing import IO, Iterator, Sequence

from . import config as config_mod
from . import dataset, engine, evaluation, labeler
from .backends import OverlapOracle, OverlapParams, RecordingBackend, RemoteBackend, RemoteConfig, ReplayBackend, ScriptedBackend
from .chunk_index import IndexBuilder, build_index, dump_index, retrieve
from .corpus import CompletionInstance, InstanceLoad, load_instances, load_repo
from .errors import BackendError, FormatInapplicable, ReproError
from .synth import synth_corpus

log = logging.getLogger("repoctx")

BACKENDS = ("remote", "oracle", "scripted", "replay")
NEEDS_BACKEND = {"label", "build-dataset", "complete", "filter-prompt", "evaluate"}
NEEDS_TARGET = {"label", "build-dataset", "evaluate"}

_D = config_mod.ToolConfig.__dataclass_fields__


def _default(name: str):
    return _D[name].default


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (flags > REPOCTX_* env > --config file > defaults)")
    g.add_argument("--config", help="flat key = value config file")
    g.add_argument("--show-config", action="store_true", help="print the resolved configuration and exit")
    g.add_argument("--debug", action="store_true", help="verbose logging")
    g.add_argument("--seed", type=int, help=f"single seed for all randomness (default: {_default('seed')})")
    g.add_argument("--workers", type=int,
                   help=f"worker pool size (default: logical processors, capped at {config_mod.MAX_IN_FLIGHT})")
    g.add_argument("--extensions", help=f"comma-separated source extensions (default: {_default('extensions')})")
    g.add_argument("--window", type=int, help=f"chunk height in lines (default: {_default('window')})")
    g.add_argument("--stride", type=int, help=f"chunk stride in lines (default: {_default('stride')})")
    g.add_argument("--top-k", type=int, help=f"chunks retrieved per instance (default: {_default('top_k')})")
    g.add_argument("--query-window", type=int,
                   help=f"prefix lines used as the retrieval query (default: {_default('query_window')})")
    g.add_argument("--tc", dest="t_c", type=float, help=f"P(<MC>) threshold (default: {_default('t_c')})")
    g.add_argument("--tp", dest="t_p", type=float, help=f"P(<pos>) threshold (default: {_default('t_p')})")
    g.add_argument("--tn", dest="t_n", type=float, help=f"P(<neg>) threshold (default: {_default('t_n')})")
    g.add_argument("--t-pos", type=float,
                   help=f"labeling threshold, positive if s > T_p (default: {_default('t_pos')})")
    g.add_argument("--t-neg", type=float,
                   help=f"labeling threshold, negative if s < T_n (default: {_default('t_neg')})")
    g.add_argument("--budget", dest="max_prompt_tokens", type=int,
                   help=f"total prompt tokens (default: {_default('max_prompt_tokens')})")
    g.add_argument("--in-file-budget", type=int, help=f"in-file tokens (default: {_default('in_file_budget')})")
    g.add_argument("--cross-file-budget", type=int,
                   help=f"cross-file tokens (default: {_default('cross_file_budget')})")
    g.add_argument("--signal-weight", type=float,
                   help=f"loss weight on signal tokens (default: {_default('signal_weight')})")
    g.add_argument("--max-generation-tokens", type=int,
                   help=f"completion length cap (default: {_default('max_generation_tokens')})")
    g.add_argument("--stop", help='stop sequences as a JSON list, e.g. \'["\\n\\n"]\' (default: none)')
    g.add_argument("--keep-judged-inline", action="store_const", const=True,
                   help="keep rejected chunks in the signal prompt with their polarity token (default: off)")

    b = p.add_argument_group("backend")
    b.add_argument("--backend", choices=BACKENDS, help="generator backend (no default)")
    b.add_argument("--endpoint", help="remote: base URL of an OpenAI-style completions server")
    b.add_argument("--model", help="remote: model name")
    b.add_argument("--api-key-env", help=f"remote: env var holding the API key (default: {_default('api_key_env')})")
    b.add_argument("--signal-mode", choices=("top_logprobs", "echo"),
                   help=f"remote: how candidate probabilities are read (default: {_default('signal_mode')})")
    b.add_argument("--timeout", type=float, help=f"remote: request timeout seconds (default: {_default('timeout')})")
    b.add_argument("--script", help="scripted: JSON file {script: {fingerprint: response}, queues: {method: [...]}}")
    b.add_argument("--replay", help="replay: recording file written by --record")
    b.add_argument("--record", help="save every backend interaction to this file")
    b.add_argument("--oracle-gain", type=float, help=f"oracle: NLL gain g (default: {_default('oracle_gain')})")
    b.add_argument("--oracle-base-nll", type=float,
                   help=f"oracle: NLL per target token (default: {_default('oracle_base_nll')})")
    b.add_argument("--oracle-conflict-penalty", type=float,
                   help=f"oracle: NLL penalty for contradicting bindings (default: {_default('oracle_conflict_penalty')})")
    return p


def _task_flags(p: argparse.ArgumentParser, tasks_required: bool = True) -> None:
    p.add_argument("--repo-root", required=True, help="repository root directory")
    p.add_argument("--tasks", required=tasks_required, help="line-delimited task file")


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="repoctx", description="Retrieval, chunk filtering and evaluation for repository-level code completion.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    p = add("index", "chunk a repository and dump the chunk index")
    p.add_argument("--repo-root", required=True)
    p.add_argument("--exclude", help="repository-relative file left out of the index")
    p.add_argument("--out", help="output file (default: stdout)")

    p = add("retrieve", "rank cross-file chunks for every task")
    _task_flags(p)
    p.add_argument("--out", help="output file (default: stdout)")

    p = add("label", "label retrieved chunks by contribution score")
    _task_flags(p)
    p.add_argument("--out", help="label dump (default: stdout)")
    p.add_argument("--histogram", action="store_true", help="print the polarity histogram to stderr")

    p = add("build-dataset", "sample targets, label, filter and verbalize training records")
    _task_flags(p, tasks_required=False)
    p.add_argument("--per-repo", type=int, default=10, help="targets sampled when --tasks is not given (default: 10)")
    p.add_argument("--formats", default="all_candidates,positive_only",
                   help="comma-separated record formats (default: all_candidates,positive_only)")
    p.add_argument("--es-threshold", type=float, default=0.5, help="sufficiency filter threshold (default: 0.5)")
    p.add_argument("--out-dir", required=True)

    p = add("complete", "filter retrieved chunks and generate completions")
    _task_flags(p)
    p.add_argument("--out", help="completions file (default: stdout)")
    p.add_argument("--trace", help="decision log file")

    p = add("filter-prompt", "write filtered prompts for consumption by another model")
    _task_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trace", help="decision log file")

    p = add("evaluate", "score strategies with EM/ES and cross-file length")
    _task_flags(p)
    p.add_argument("--strategy", action="append", choices=[k.value for k in evaluation.StrategyKind],
                   help="strategy to run; repeatable")
    p.add_argument("--compare", action="store_true", help="run none, full and filter")
    p.add_argument("--prompts", help="replay: manifest.jsonl written by filter-prompt")
    p.add_argument("--negative-subset", action="store_true",
                   help="also report instances whose top-k holds a negative chunk")
    p.add_argument("--out-dir", help="write per-strategy rows and the summary here")

    p = add("synth-corpus", "generate a repository with planted chunks and its task file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=10, help="number of instances (default: 10)")
    p.add_argument("--pos", type=int, default=1, help="helpful chunks per instance (default: 1)")
    p.add_argument("--neg", type=int, default=1, help="misleading chunks per instance (default: 1)")
    p.add_argument("--neu", type=int, default=8, help="irrelevant chunks per instance (default: 8)")
    return parser


# -- helpers --------------------------------------------------------------------------------


@contextlib.contextmanager
def _output(path: str | None) -> Iterator[IO[str]]:
    if path is None:
        yield sys.stdout
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yield fh


def _flag_values(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k in config_mod.ToolConfig.__dataclass_fields__}


def _load_tasks(args, cfg: config_mod.ToolConfig, require_target: bool = True):
    loaded = load_instances(args.tasks, args.repo_root, require_target, cfg.extension_list)
    for err in loaded.errors:
        log.warning("%s:%d: %s", args.tasks, err.line_no, err.message)
    return loaded


def make_backend(cfg: config_mod.ToolConfig, instances: Sequence[CompletionInstance]):
    if cfg.backend == "oracle":
        params = OverlapParams(cfg.oracle_base_nll, cfg.oracle_gain, cfg.oracle_conflict_penalty,
                               t_pos=cfg.t_pos, t_neg=cfg.t_neg)
        return OverlapOracle(params, [i for i in instances if i.target_lines])
    if cfg.backend == "scripted":
        if not cfg.script:
            raise config_mod.ConfigError("--backend scripted needs --script")
        with open(cfg.script, encoding="utf-8") as fh:
            data = json.load(fh)
        return ScriptedBackend(data.get("script"), data.get("queues"))
    if cfg.backend == "replay":
        if not cfg.replay:
            raise config_mod.ConfigError("--backend replay needs --replay")
        return ReplayBackend.load(cfg.replay)
    if not (cfg.endpoint and cfg.model):
        raise config_mod.ConfigError("--backend remote needs --endpoint and --model")
    return RemoteBackend(RemoteConfig(cfg.endpoint, cfg.model, cfg.api_key_env, timeout=cfg.timeout,
                                      max_concurrency=config_mod.MAX_IN_FLIGHT, signal_mode=cfg.signal_mode))


def _safe_name(instance_id: str) -> str:
    return re.sub(r"[^\w.-]+", "_", instance_id)


def _label_all(instances, builder, backend, cfg):
    out = {}
    for inst in instances:
        ranked = retrieve(builder(inst.target_path), inst.prefix_lines, cfg.top_k, cfg.query_window).ranked
        out[inst.id] = labeler.label_chunks(inst, ranked, backend, cfg.labeler, cfg.budget, workers=cfg.workers)
    return out


# -- subcommands ----------------------------------------------------------------------------


def cmd_index(args, cfg, backend) -> int:
    repo = load_repo(args.repo_root, cfg.extension_list, cfg.workers)
    with _output(args.out) as out:
        n = dump_index(build_index(repo, args.exclude, cfg.chunker), out)
    log.info("%d chunks", n)
    return 0


def cmd_retrieve(args, cfg, backend) -> int:
    loaded = _load_tasks(args, cfg, require_target=False)
    builder = IndexBuilder(loaded.repo, cfg.chunker)
    with _output(args.out) as out:
        for inst in loaded.instances:
            res = retrieve(builder(inst.target_path), inst.prefix_lines, cfg.top_k, cfg.query_window)
            for rc in res.ranked:
                out.write(json.dumps({"instance_id": inst.id, "rank": rc.rank, "score": rc.score,
                                      "path": rc.chunk.path, "start_line": rc.chunk.start_line,
                                      "end_line": rc.chunk.end_line}, sort_keys=True) + "\n")
    return 0


def cmd_label(args, cfg, backend) -> int:
    loaded = args._loaded
    labeled = _label_all(loaded.instances, IndexBuilder(loaded.repo, cfg.chunker), backend, cfg)
    with _output(args.out) as out:
        labeler.write_labels(labeled, out)
    if args.histogram:
        sys.stderr.write(labeler.polarity_distribution(labeled).table())
    return 0


def cmd_build_dataset(args, cfg, backend) -> int:
    repo = args._loaded.repo
    instances = args._loaded.instances
    formats = [dataset.RecordFormat(f.strip()) for f in args.formats.split(",") if f.strip()]
    labeled = _label_all(instances, IndexBuilder(repo, cfg.chunker), backend, cfg)
    kept = [i for i in instances if dataset.sufficiency_filter(i, labeled[i.id], args.es_threshold)]
    log.info("sufficiency filter kept %d of %d instances", len(kept), len(instances))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fmt in formats:
        rng = random.Random(cfg.seed)
        records = []
        for inst in kept:
            try:
                records.append(dataset.verbalize(inst, labeled[inst.id], fmt, rng, cfg.signal_weight,
                                                 budget=cfg.budget))
            except FormatInapplicable as exc:
                log.info("skip: %s", exc)
        n = dataset.export_records(records, out_dir / f"{fmt.value}.jsonl")
        print(f"{fmt.value}: {n} records")
    return 0


def _write_trace(fh: IO[str] | None, inst_id: str, trace: engine.EngineTrace) -> None:
    if fh is not None:
        trace.write(fh, inst_id)


def cmd_complete(args, cfg, backend) -> int:
    loaded = args._loaded
    builder = IndexBuilder(loaded.repo, cfg.chunker)
    failures = 0
    with _output(args.out) as out, contextlib.ExitStack() as stack:
        tfh = stack.enter_context(open(args.trace, "w", encoding="utf-8")) if args.trace else None
        for inst in loaded.instances:
            try:
                res = engine.run(inst, builder(inst.target_path), backend, cfg.engine)
            except BackendError as exc:
                failures += 1
                _report_error(exc, inst.id)
                continue
            out.write(json.dumps({"instance_id": inst.id, "generated": res.generated}, sort_keys=True) + "\n")
            _write_trace(tfh, inst.id, res.trace)
    return 1 if failures else 0


def cmd_filter_prompt(args, cfg, backend) -> int:
    loaded = args._loaded
    builder = IndexBuilder(loaded.repo, cfg.chunker)
    out_dir = Path(args.out_dir)
    (out_dir / "prompts").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as man, contextlib.ExitStack() as stack:
        tfh = stack.enter_context(open(args.trace, "w", encoding="utf-8")) if args.trace else None
        for inst in loaded.instances:
            plan, trace = engine.export_filtered_prompt(inst, builder(inst.target_path), backend, cfg.engine)
            rel = f"prompts/{_safe_name(inst.id)}.txt"
            with open(out_dir / rel, "w", encoding="utf-8", newline="") as fh:
                fh.write(plan.text)
            man.write(json.dumps({"instance_id": inst.id, "file": rel, "kept_ranks": list(plan.chunk_ranks),
                                  "cross_file_tokens": plan.token_counts.cross_file}, sort_keys=True) + "\n")
            _write_trace(tfh, inst.id, trace)
    return 0


def _read_prompts(manifest: str) -> dict[str, str]:
    base = Path(manifest).parent
    prompts = {}
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                prompts[rec["instance_id"]] = (base / rec["file"]).read_text(encoding="utf-8")
    return prompts


def cmd_evaluate(args, cfg, backend) -> int:
    loaded = args._loaded
    kinds = list(args.strategy or [])
    if args.compare:
        kinds = ["none", "full", "filter"] + [k for k in kinds if k not in ("none", "full", "filter")]
    if not kinds:
        kinds = ["filter"]
    prompts = _read_prompts(args.prompts) if args.prompts else None
    if "replay" in kinds and prompts is None:
        raise config_mod.ConfigError("--strategy replay needs --prompts")
    builder = IndexBuilder(loaded.repo, cfg.chunker)
    reports = [
        evaluation.run_strategy(loaded.instances, builder, backend,
                                evaluation.StrategySpec(evaluation.StrategyKind(k)), cfg.engine,
                                cfg.workers, prompts)
        for k in kinds
    ]
    text = evaluation.summary_table(reports)
    if len(reports) > 1:
        text += "\n" + evaluation.length_report(reports).table()
    if args.negative_subset:
        labeled = _label_all(loaded.instances, builder, backend, cfg)
        neg = [i.id for i in evaluation.negative_subset(loaded.instances, labeled)]
        text += f"\nnegative subset: {len(neg)} of {len(loaded.instances)} instances\n"
        text += evaluation.summary_table([r.subset(neg) for r in reports])
    sys.stdout.write(text)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for rep in reports:
            with open(out_dir / f"{rep.strategy}.jsonl", "w", encoding="utf-8") as fh:
                rep.write(fh)
        (out_dir / "summary.txt").write_text(text, encoding="utf-8")
    return 0


def cmd_synth_corpus(args, cfg, backend) -> int:
    corpus = synth_corpus(cfg.seed, args.n, {"pos": args.pos, "neg": args.neg, "neu": args.neu}, args.out_dir)
    print(f"repo: {corpus.repo_root}\ntasks: {corpus.task_file}\nplant: {corpus.plant_file}")
    return 0


COMMANDS = {
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "label": cmd_label,
    "build-dataset": cmd_build_dataset,
    "complete": cmd_complete,
    "filter-prompt": cmd_filter_prompt,
    "evaluate": cmd_evaluate,
    "synth-corpus": cmd_synth_corpus,
}


def _report_error(exc: BaseException, instance_id: str | None = None) -> None:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    inst = instance_id or getattr(exc, "instance_id", None)
    if inst:
        rec["instance_id"] = inst
    sys.stderr.write(json.dumps(rec, sort_keys=True) + "\n")


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_mod.resolve(_flag_values(args), args.config)
    except ReproError as exc:
        _report_error(exc)
        return 2
    if args.show_config:
        print("\n".join(cfg.to_lines()))
        return 0
    if args.command in NEEDS_BACKEND and not cfg.backend:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "UsageError", "message": f"{args.command} requires --backend"}) + "\n")
        return 2

    recorder = None
    try:
        backend = None
        if args.command in NEEDS_BACKEND:
            if args.command == "build-dataset" and not args.tasks:
                repo = load_repo(args.repo_root, cfg.extension_list, cfg.workers)
                sampled = dataset.sample_targets(repo, dataset.SamplingConfig(targets_per_repo=args.per_repo,
                                                                              rng_seed=cfg.seed))
                args._loaded = InstanceLoad(sampled, [], repo)
            else:
                args._loaded = _load_tasks(args, cfg, require_target=args.command in NEEDS_TARGET)
            backend = make_backend(cfg, args._loaded.instances)
            if args.record:
                backend = recorder = RecordingBackend(backend)
        code = COMMANDS[args.command](args, cfg, backend)
    except ReproError as exc:
        _report_error(exc)
        return 1
    except OSError as exc:
        _report_error(exc)
        return 1
    finally:
        if recorder is not None:
            recorder.save(args.record)
    return code


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
