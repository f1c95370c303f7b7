"""Fuzzer unit behaviour: mutation, coverage, corpus, tier scheduling."""

import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from varsan.fuzz import (
    MAX_LEN,
    TIER_COVERAGE,
    TIER_FAST,
    TIER_SANITIZED,
    Corpus,
    CoverageMap,
    FuzzContext,
    FuzzReport,
    fuzz_campaign,
    fuzz_step,
    mutate,
    report_to_json,
    write_series_csv,
)
from varsan.profiling import Profile
from varsan.variants import build_program

from conftest import load


CROSSROADS = """
func peek(p: i64, i: i64) {
  b0:
    a = add p i
    v = load a 1
    return v
}
func main() {
  b0:
    p = alloc 4
    pad = alloc 64
    n = inlen
    any = cmp sge n 1
    cbranch any use skip
  use:
    i = in 0
    v = call peek p i
    out v
    return v
  skip:
    r = const 0
    return r
}
"""


def fuzz_build():
    return build_program(
        load(CROSSROADS), Profile({"main": 10, "peek": 10}), fuzz=True
    )


def make_ctx(seed=0, tiered=True, corpus=None):
    b = fuzz_build()
    return FuzzContext(
        b.program, b.table, b.descriptors, random.Random(seed),
        corpus=corpus, tiered=tiered, seed=seed,
    )


# -- mutation -----------------------------------------------------------------


def test_mutate_is_deterministic_under_a_seed():
    a = [mutate(b"hello", random.Random(9)) for _ in range(20)]
    b = [mutate(b"hello", random.Random(9)) for _ in range(20)]
    assert a == b


@settings(max_examples=200)
@given(st.binary(max_size=64), st.integers(0, 2**32))
def test_mutate_respects_max_len(data, seed):
    out = mutate(data, random.Random(seed), max_len=32)
    assert len(out) <= 32
    assert isinstance(out, bytes)


def test_mutate_never_exceeds_default_cap():
    rng = random.Random(1)
    data = bytes(MAX_LEN)
    for _ in range(200):
        data = mutate(data, rng)
        assert len(data) <= MAX_LEN


def test_mutate_grows_empty_input_only_by_insertion():
    rng = random.Random(3)
    lengths = {len(mutate(b"", rng)) for _ in range(500)}
    assert lengths == {0, 1}


def test_mutate_can_splice_from_corpus():
    corpus = Corpus()
    corpus.add(b"\xaa" * 8)
    rng = random.Random(0)
    spliced = [
        out
        for _ in range(300)
        if b"\xaa" in (out := mutate(b"\x00" * 4, rng, corpus))
    ]
    assert spliced  # operator 4 fires sometimes and pulls donor bytes


# -- coverage map -------------------------------------------------------------


def test_observe_reports_new_blocks_once():
    cov = CoverageMap()
    assert cov.observe({("f", "b0"): 1}) is True
    assert cov.observe({("f", "b0"): 1}) is False
    assert cov.observe({("f", "b1"): 1}) is True
    assert cov.covered_blocks("f") == {"b0", "b1"}


def test_observe_tracks_hit_count_buckets():
    cov = CoverageMap()
    cov.observe({("f", "b0"): 1})
    assert cov.observe({("f", "b0"): 2}) is True    # bucket 1 -> 2
    assert cov.observe({("f", "b0"): 3}) is False   # same bucket as 2
    assert cov.observe({("f", "b0"): 4}) is True    # bucket 3
    assert cov.observe({("f", "b0"): 300}) is True  # saturates at 255
    assert cov.observe({("f", "b0"): 255}) is False


def test_fully_explored_needs_every_label():
    cov = CoverageMap()
    cov.observe({("f", "b0"): 1})
    assert not cov.fully_explored("f", {"b0", "b1"})
    cov.observe({("f", "b1"): 1})
    assert cov.fully_explored("f", {"b0", "b1"})
    assert cov.fully_explored("g", set())  # no labels: trivially done


# -- corpus -------------------------------------------------------------------


def test_corpus_orders_by_admission_and_dedups():
    c = Corpus()
    assert c.add(b"b") is True
    assert c.add(b"a") is True
    assert c.add(b"b") is False
    assert c.inputs == [b"b", b"a"]
    assert len(c) == 2


def test_corpus_persists_one_file_per_input(tmp_path):
    d = str(tmp_path / "corpus")
    c = Corpus(d)
    c.add(b"alpha")
    c.add(b"beta")
    names = sorted(p.name for p in (tmp_path / "corpus").iterdir())
    assert len(names) == 2
    assert all(len(n) == 32 for n in names)

    loaded = Corpus.load(d)
    assert sorted(loaded.inputs) == [b"alpha", b"beta"]
    # filename order, not admission order, on reload
    assert [n for n in names] == sorted(names)


def test_context_keeps_an_empty_directory_corpus(tmp_path):
    c = Corpus(str(tmp_path / "fresh"))
    ctx = make_ctx(corpus=c)
    assert ctx.corpus is c  # an empty corpus must not be swapped out


# -- tier mechanics -----------------------------------------------------------


def test_initial_tier_is_coverage_everywhere():
    ctx = make_ctx()
    assert set(ctx.state.tier.values()) == {TIER_COVERAGE}


def test_new_coverage_costs_one_sanitized_reexecution():
    ctx = make_ctx()
    first = fuzz_step(ctx, b"")
    assert first.new_coverage and first.admitted
    assert first.executions == 2
    again = fuzz_step(ctx, b"")
    assert not again.new_coverage and not again.admitted
    assert again.executions == 1
    assert ctx.corpus.inputs == [b""]


def test_fully_explored_functions_drop_to_fast():
    ctx = make_ctx()
    fuzz_step(ctx, b"")          # covers main.b0, main.skip
    assert ctx.state.tier["main"] == TIER_COVERAGE
    out = fuzz_step(ctx, b"\x00")  # covers main.use, peek.b0
    assert set(out.newly_fast) == {"main", "peek"}
    assert ctx.state.tier["main"] == TIER_FAST
    assert ctx.state.tier["peek"] == TIER_FAST

    fuzz_step(ctx, b"\x01")
    active = dict(zip(ctx.table.functions, ctx.table.snapshot()))
    fast = {
        d.function: d.name_of("fast") for d in ctx.state.descriptors
    }
    assert active == fast


def test_coverage_tier_runs_checkless_bodies():
    ctx = make_ctx()
    ctx.state.apply()
    active = dict(zip(ctx.table.functions, ctx.table.snapshot()))
    want = {d.function: d.name_of("coverage") for d in ctx.state.descriptors}
    assert active == want


def test_override_forces_sanitized_everywhere():
    ctx = make_ctx()
    ctx.state.override = True
    ctx.state.apply()
    names = {d.name_of("sanitized") for d in ctx.state.descriptors}
    assert set(ctx.table.snapshot()) == names


def test_crash_surfaces_from_the_sanitized_reexecution():
    ctx = make_ctx()
    out = fuzz_step(ctx, b"\x09")  # peek reads past the 4-byte buffer
    assert out.new_coverage
    assert out.crash is not None
    assert out.crash.trap.kind == "address_check"
    assert out.crash.trap.variant_kind == "sanitized"
    assert out.executions == 2


def test_fast_tier_misses_the_same_bug():
    ctx = make_ctx()
    fuzz_step(ctx, b"")
    fuzz_step(ctx, b"\x00")      # everything fully explored now
    assert ctx.state.tier["peek"] == TIER_FAST
    out = fuzz_step(ctx, b"\x09")
    assert out.crash is None     # no new coverage, so no checked re-run
    assert not out.new_coverage


def test_manual_sanitized_tier_catches_it_directly():
    ctx = make_ctx()
    ctx.state.tier = {fn: TIER_SANITIZED for fn in ctx.state.tier}
    out = fuzz_step(ctx, b"\x09")
    assert out.crash is not None
    assert out.crash.trap.kind == "address_check"


# -- campaigns ----------------------------------------------------------------


def test_campaign_respects_budget_and_stops_on_crash():
    report = fuzz_campaign(make_ctx(seed=11), max_executions=400)
    assert report.executions <= 401  # a step may spend two executions
    if report.crashes:
        assert report.stopped_on_crash
        assert report.crashes[0].execution <= report.executions


def test_campaign_keep_going_collects_crashes():
    report = fuzz_campaign(
        make_ctx(seed=11), seeds=[b"\x09"], max_executions=600, keep_going=True
    )
    assert not report.stopped_on_crash
    assert report.executions >= 600
    assert report.crashes
    # big offsets escape the arena and trap raw; checked reads trap in the
    # sanitized re-execution
    assert {c.trap.kind for c in report.crashes} <= {"address_check", "oob_raw"}
    assert any(c.trap.kind == "address_check" for c in report.crashes)


def test_campaign_is_deterministic_modulo_wall_clock():
    a = fuzz_campaign(make_ctx(seed=5), max_executions=500)
    b = fuzz_campaign(make_ctx(seed=5), max_executions=500)
    assert (a.executions, a.steps, a.corpus_size, a.covered_blocks) == (
        b.executions, b.steps, b.corpus_size, b.covered_blocks
    )
    assert a.series == b.series
    assert [c.input for c in a.crashes] == [c.input for c in b.crashes]


def test_campaign_default_seeds_make_progress():
    ctx = make_ctx(seed=2)
    report = fuzz_campaign(ctx, max_executions=800, keep_going=True)
    # both inputs of the default seed corpus parse, so both arms of main
    # and the leaf function should be reachable
    assert report.covered_blocks >= 4
    assert report.corpus_size >= 2


def test_campaign_series_is_monotone():
    report = fuzz_campaign(make_ctx(seed=8), max_executions=700, keep_going=True)
    execs = [e for e, _ in report.series]
    blocks = [b for _, b in report.series]
    assert execs == sorted(execs)
    assert blocks == sorted(blocks)
    assert report.series[-1][0] == report.executions


def test_report_json_schema_and_csv(tmp_path):
    report = fuzz_campaign(make_ctx(seed=11), seeds=[b"\x09"], max_executions=50)
    doc = json.loads(report_to_json(report))
    assert doc["schema"] == "varsan-fuzz-report"
    assert doc["version"] == 1
    assert doc["executions"] == report.executions
    assert doc["crashes"][0]["trap_kind"] == "address_check"
    assert doc["crashes"][0]["input_hex"] == "09"
    assert doc["series"][-1] == [report.executions, report.covered_blocks]

    csv_path = tmp_path / "series.csv"
    write_series_csv(report, csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "executions,cumulative_blocks"
    assert len(lines) == len(report.series) + 1


def test_executions_per_second_guard():
    r = FuzzReport(10, 10, 1, 1, [], 0, 0.0, [], False)
    assert r.executions_per_second == 0.0


def test_untiered_baseline_context_has_no_state():
    from varsan.variants import build_fuzz_baseline

    program = build_fuzz_baseline(load(CROSSROADS))
    ctx = FuzzContext(program, None, [], random.Random(0), tiered=False)
    assert ctx.state is None
    out = fuzz_step(ctx, b"")
    assert out.executions == 1  # no sanitized re-run in baseline mode
    assert out.new_coverage and out.admitted
    crash = fuzz_step(ctx, b"\x09")
    assert crash.crash is not None  # checks are always on here
    assert crash.crash.trap.kind == "address_check"
