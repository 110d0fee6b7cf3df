from __future__ import annotations

import io
import json
import random

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from repoctx.backends import OverlapOracle, ScriptedBackend
from repoctx.backends.replay import RecordingBackend, ReplayBackend
from repoctx.chunk_index import build_index, retrieve
from repoctx.engine import (
    EngineConfig,
    StepKind,
    StopReason,
    decide_retrieval,
    export_filtered_prompt,
    filter_chunks,
    judge_chunk,
    run,
)
from repoctx.errors import CompletionUnavailable, SignalUnavailable
from repoctx.prompting import PromptBudget, render_chunk, signal_prompt
from repoctx.backends.base import fallback_count_tokens

from conftest import instance

MAIN = "app/main.py"


def D(p_mc: float) -> dict:
    return {"<MC>": p_mc, "<EC>": round(1 - p_mc, 10)}


def J(pos: float, neg: float, neu: float) -> dict:
    return {"<pos>": pos, "<neg>": neg, "<neu>": neu}


POS, NEG, NEU = J(0.6, 0.2, 0.2), J(0.1, 0.6, 0.3), J(0.1, 0.1, 0.8)
MC, EC = D(0.9), D(0.1)


class PromptLog(ScriptedBackend):
    def __init__(self, dists, completion="    result = codec.encode(rows, cfg.level)"):
        super().__init__(queues={"next_token_distribution": list(dists), "complete": [completion]})
        self.prompts: list[str] = []

    def next_token_distribution(self, prompt, candidates):
        self.prompts.append(prompt)
        return super().next_token_distribution(prompt, candidates)


@pytest.fixture
def setup(demo_repo):
    lines = list(demo_repo.get(MAIN).lines)
    inst = instance(lines[:7], [lines[7]], lines[8:], inst_id="demo", path=MAIN, repo=demo_repo)
    return inst, build_index(demo_repo, MAIN)


def _plan(p):
    return signal_prompt(instance(["a"], ["b"]), [], PromptBudget(), fallback_count_tokens)


@pytest.mark.parametrize("p_mc, chosen", [(0.8, "<MC>"), (0.29, "<EC>"), (0.3, "<MC>"), (0.0, "<EC>")])
def test_decide_threshold(p_mc, chosen):
    d = decide_retrieval(_plan(None), ScriptedBackend(queues={"next_token_distribution": [D(p_mc)]}), EngineConfig())
    assert d.chosen == chosen and d.kind is StepKind.DECIDE and not d.fallback


@pytest.mark.parametrize("dist, chosen", [
    (J(0.5, 0.4, 0.1), "<pos>"),
    (J(0.2, 0.5, 0.3), "<neg>"),
    (J(0.25, 0.25, 0.5), "<neu>"),
    (J(0.3, 0.3, 0.4), "<pos>"),
    (J(0.29, 0.3, 0.41), "<neg>"),
])
def test_judge_priority(dist, chosen):
    d = judge_chunk(_plan(None), ScriptedBackend(queues={"next_token_distribution": [dist]}), EngineConfig())
    assert d.chosen == chosen


def test_signal_fallbacks():
    down = SignalUnavailable("no logprobs")
    cfg = EngineConfig()
    d = decide_retrieval(_plan(None), ScriptedBackend(queues={"next_token_distribution": [down]}), cfg)
    assert (d.chosen, d.fallback, d.probabilities) == ("<MC>", True, None)
    cfg_ec = EngineConfig(retrieval_fallback="<EC>")
    d = decide_retrieval(_plan(None), ScriptedBackend(queues={"next_token_distribution": [down]}), cfg_ec)
    assert d.chosen == "<EC>"
    j = judge_chunk(_plan(None), ScriptedBackend(queues={"next_token_distribution": [down]}), cfg)
    assert (j.chosen, j.fallback) == ("<neu>", True)


def test_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(t_c=1.5)
    with pytest.raises(ValueError):
        EngineConfig(retrieval_fallback="<pos>")


# (script of distributions, expected chosen tokens, kept ranks, stop reason)
GOLDEN = {
    "initial_ec": ([EC], ["<EC>"], [], StopReason.INITIAL_EC),
    "boundary_mc_then_exhausted": ([D(0.3)] + [NEU] * 10, ["<MC>"] + ["<neu>"] * 10, [],
                                   StopReason.CANDIDATES_EXHAUSTED),
    "first_pos_sufficient": ([MC, POS, EC], ["<MC>", "<pos>", "<EC>"], [1], StopReason.SUFFICIENT_AFTER_CHUNK),
    "all_rejected": ([MC] + [NEU, NEG] * 5, ["<MC>"] + ["<neu>", "<neg>"] * 5, [],
                     StopReason.CANDIDATES_EXHAUSTED),
    "wild_function_transcript": ([MC, NEU, POS, MC, NEG, NEU, POS, EC],
                            ["<MC>", "<neu>", "<pos>", "<MC>", "<neg>", "<neu>", "<pos>", "<EC>"], [2, 5],
                            StopReason.SUFFICIENT_AFTER_CHUNK),
    "last_chunk_pos": ([MC] + [NEU] * 9 + [POS, EC], ["<MC>"] + ["<neu>"] * 9 + ["<pos>", "<EC>"], [10],
                       StopReason.SUFFICIENT_AFTER_CHUNK),
    "pos_never_sufficient": ([MC] + [POS, MC] * 10, ["<MC>"] + ["<pos>", "<MC>"] * 10, list(range(1, 11)),
                             StopReason.CANDIDATES_EXHAUSTED),
    "two_pos_then_stop": ([MC, POS, MC, POS, EC], ["<MC>", "<pos>", "<MC>", "<pos>", "<EC>"], [1, 2],
                          StopReason.SUFFICIENT_AFTER_CHUNK),
    "pos_boundary": ([MC, J(0.3, 0.4, 0.3), D(0.29)], ["<MC>", "<pos>", "<EC>"], [1],
                     StopReason.SUFFICIENT_AFTER_CHUNK),
    "neg_boundary": ([MC, J(0.29, 0.3, 0.41), J(0.29, 0.29, 0.42), POS, EC],
                     ["<MC>", "<neg>", "<neu>", "<pos>", "<EC>"], [3], StopReason.SUFFICIENT_AFTER_CHUNK),
    "logit_form": ([{"logits": {"<MC>": 2.0, "<EC>": 0.0}}, {"logits": {"<pos>": 3.0, "<neg>": 0.0, "<neu>": 0.0}},
                    {"logits": {"<MC>": -3.0, "<EC>": 0.0}}],
                   ["<MC>", "<pos>", "<EC>"], [1], StopReason.SUFFICIENT_AFTER_CHUNK),
    "fallback_neutral": ([MC, SignalUnavailable("x"), POS, EC], ["<MC>", "<neu>", "<pos>", "<EC>"], [2],
                         StopReason.SUFFICIENT_AFTER_CHUNK),
    "fallback_retrieve": ([SignalUnavailable("x"), POS, SignalUnavailable("y")] + [NEU] * 9,
                          ["<MC>", "<pos>", "<MC>"] + ["<neu>"] * 9, [1], StopReason.CANDIDATES_EXHAUSTED),
}


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_trace(setup, name):
    inst, index = setup
    script, chosen, kept, reason = GOLDEN[name]
    backend = PromptLog(script)
    res = run(inst, index, backend, EngineConfig())
    trace = res.trace
    assert [d.chosen for d in trace.decisions] == chosen
    assert [rc.rank for rc in trace.kept_chunks] == kept
    assert trace.stopped_reason is reason
    assert backend.queues["next_token_distribution"] == type(backend.queues["next_token_distribution"])()
    # keep-set soundness and early-stop dominance
    judged = [d for d in trace.decisions if d.kind is StepKind.JUDGE]
    assert [d.rank for d in judged if d.chosen == "<pos>"] == kept
    assert [d.rank for d in judged] == list(range(1, len(judged) + 1))
    assert res.prompt.chunk_ranks == tuple(kept)
    assert res.generated == "    result = codec.encode(rows, cfg.level)"


def test_wild_function_trace_lines(setup):
    inst, index = setup
    trace = run(inst, index, PromptLog(GOLDEN["wild_function_transcript"][0]), EngineConfig()).trace
    events = [json.loads(line) for line in trace.to_lines()]
    assert [(e["step"], e["rank"], e["chosen"]) for e in events[:-1]] == [
        ("decide", None, "<MC>"), ("judge", 1, "<neu>"), ("judge", 2, "<pos>"), ("reassess", 2, "<MC>"),
        ("judge", 3, "<neg>"), ("judge", 4, "<neu>"), ("judge", 5, "<pos>"), ("reassess", 5, "<EC>"),
    ]
    assert events[-1] == {"kept": [2, 5], "stopped": "SufficientAfterChunk"}
    out = io.StringIO()
    trace.write(out, "demo")
    assert all(json.loads(line)["instance_id"] == "demo" for line in out.getvalue().splitlines())


def test_rejected_chunks_leave_prompt(setup):
    inst, index = setup
    ranked = retrieve(index, inst.prefix_lines, 10, 10).ranked
    first_body = render_chunk(ranked[0].chunk)

    backend = PromptLog(GOLDEN["wild_function_transcript"][0])
    run(inst, index, backend, EngineConfig())
    # prompt judging rank 2 holds rank 2 only; rank 1 was rejected
    assert first_body not in backend.prompts[2]
    assert "<neu>" not in backend.prompts[2]

    inline = PromptLog(GOLDEN["wild_function_transcript"][0])
    trace = run(inst, index, inline, EngineConfig(keep_judged_inline=True)).trace
    assert [rc.rank for rc in trace.kept_chunks] == [2, 5]
    assert first_body in inline.prompts[2] and "<neu>" in inline.prompts[2]
    assert inline.prompts[-1].count("<MC>") == 5


def test_initial_ec_generates_from_in_file(setup):
    inst, index = setup
    res = run(inst, index, PromptLog([EC]), EngineConfig())
    assert res.prompt.token_counts.cross_file == 0
    assert res.prompt.text.startswith("<fim_prefix>")


def test_export_matches_run(setup):
    inst, index = setup
    for name in ("wild_function_transcript", "initial_ec", "two_pos_then_stop", "all_rejected"):
        script = GOLDEN[name][0]
        res = run(inst, index, PromptLog(script), EngineConfig())
        exporter = PromptLog(script)
        plan, trace = export_filtered_prompt(inst, index, exporter, EngineConfig())
        assert plan.text == res.prompt.text
        assert plan.chunk_ranks == res.prompt.chunk_ranks
        assert [d.chosen for d in trace.decisions] == [d.chosen for d in res.trace.decisions]
        assert not any(m == "complete" for m, _ in exporter.calls)


def test_completion_unavailable_propagates(setup):
    inst, index = setup
    backend = ScriptedBackend(queues={"next_token_distribution": [EC], "complete": [CompletionUnavailable("503")]})
    with pytest.raises(CompletionUnavailable) as info:
        run(inst, index, backend, EngineConfig())
    assert info.value.instance_id == "demo"


class RandomSignals(ScriptedBackend):
    def __init__(self, seed: int):
        super().__init__()
        self.rng = random.Random(seed)

    def next_token_distribution(self, prompt, candidates):
        w = [self.rng.random() + 1e-6 for _ in candidates]
        return {c: x / sum(w) for c, x in zip(candidates, w)}

    def complete(self, prompt, max_tokens, stop=()):
        return "x"


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 10**6), st.integers(200, 1200), st.integers(50, 600))
def test_budget_safety(demo_repo, seed, total, cross):
    lines = list(demo_repo.get(MAIN).lines)
    inst = instance(lines[:7] * 40, [lines[7]], lines[8:] * 40, inst_id="b", path=MAIN, repo=demo_repo)
    in_file = min(total - 10, 1024)
    cfg = EngineConfig(max_prompt_tokens=total, in_file_budget=in_file, cross_file_budget=min(cross, total - in_file))
    res = run(inst, build_index(demo_repo, MAIN), RandomSignals(seed), cfg)
    tc = res.prompt.token_counts
    assert tc.total <= cfg.max_prompt_tokens
    assert tc.in_file <= cfg.in_file_budget
    assert tc.cross_file <= cfg.cross_file_budget
    kept = [rc.rank for rc in res.trace.kept_chunks]
    assert list(res.prompt.chunk_ranks) == [r for r in kept if r in res.prompt.chunk_ranks]


def test_trace_replay(setup, demo_repo):
    inst, index = setup
    oracle = OverlapOracle()
    oracle.register(inst)
    rec = RecordingBackend(oracle)
    first = run(inst, index, rec, EngineConfig())

    replay = ReplayBackend({fp: r for fp, r in rec.records.items()})
    second = run(inst, index, replay, EngineConfig())
    assert second.prompt.text == first.prompt.text
    assert second.generated == first.generated
    assert second.trace.to_lines() == first.trace.to_lines()
