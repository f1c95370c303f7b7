"""Coverage-guided in-process fuzzer with tiered variant switching.

Each function starts on its coverage variant (tier 1). When an input
produces new cumulative coverage it is admitted to the corpus and re-run
once with every slot on its sanitized variant (tier 2), so no
coverage-increasing input ever escapes detection. Once all of a function's
blocks have executed it drops to the fast variant (tier 3): no counters,
no checks. Partitioning is synchronous, inside the loop; there is no
background thread here.

The price of tier 3 is documented and tested: an input that adds no new
coverage may run entirely unsanitized, so a non-crashing bug on an
already-explored path can slip through the fuzz policy even though an
all-sanitized run would trap it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import random
import time
from dataclasses import dataclass, field

from .interp import ExecOptions, ExecResult, TrapInfo, interpret
from .pir import PirError, Program
from .variants import FunctionDescriptor, VariantDispatchTable

__all__ = [
    "CoverageMap",
    "Corpus",
    "FuzzVariantState",
    "FuzzError",
    "StepOutcome",
    "FuzzReport",
    "Crash",
    "mutate",
    "FuzzContext",
    "fuzz_step",
    "fuzz_campaign",
    "report_to_json",
    "write_report",
    "write_series_csv",
    "MAX_LEN",
    "TIER_COVERAGE",
    "TIER_SANITIZED",
    "TIER_FAST",
]

MAX_LEN = 4096
REPORT_SCHEMA = "varsan-fuzz-report"
REPORT_VERSION = 1

TIER_COVERAGE = 1
TIER_SANITIZED = 2
TIER_FAST = 3

_TIER_KIND = {TIER_COVERAGE: "coverage", TIER_SANITIZED: "sanitized", TIER_FAST: "fast"}

# when the exact kind is missing, fall back in a fixed order
_KIND_FALLBACK = {
    "sanitized": ("sanitized", "fast", "unsanitized", "coverage"),
    "coverage": ("coverage", "sanitized", "fast", "unsanitized"),
    "fast": ("fast", "unsanitized", "coverage", "sanitized"),
}


class FuzzError(PirError):
    pass


def _bucket(count: int) -> int:
    """log2 bucket of an 8-bit saturating hit counter."""
    return min(count, 255).bit_length()


class CoverageMap:
    """Cumulative block hit-set plus coarse hit-count buckets.

    Admission feedback is richer than the explored set: an input counts as
    interesting when it reaches a new block or pushes a known block into a
    new log2 hit-count bucket. The fully-explored predicate stays binary.
    """

    def __init__(self):
        self.blocks: set[tuple[str, str]] = set()
        self.buckets: dict[tuple[str, str], set[int]] = {}

    def observe(self, hits: dict[tuple[str, str], int]) -> bool:
        """Merge one run's hit counts; True when anything new appeared."""
        new = False
        for key, count in hits.items():
            if key not in self.blocks:
                self.blocks.add(key)
                new = True
            b = _bucket(count)
            seen = self.buckets.setdefault(key, set())
            if b not in seen:
                seen.add(b)
                new = True
        return new

    def covered_blocks(self, function: str) -> set[str]:
        return {label for fn, label in self.blocks if fn == function}

    def fully_explored(self, function: str, labels: set[str]) -> bool:
        return labels <= self.covered_blocks(function)


class Corpus:
    """Admission-ordered inputs, optionally persisted one file per input.

    Files are named by content hash, so re-admitting identical bytes is
    idempotent on disk. Loading from a directory sorts by filename for a
    deterministic starting order.
    """

    def __init__(self, directory: str | None = None):
        self.directory = directory
        self.inputs: list[bytes] = []
        self._seen: set[bytes] = set()
        if directory:
            os.makedirs(directory, exist_ok=True)

    def __len__(self) -> int:
        return len(self.inputs)

    def add(self, data: bytes) -> bool:
        if data in self._seen:
            return False
        self._seen.add(data)
        self.inputs.append(data)
        if self.directory:
            name = hashlib.sha256(data).hexdigest()[:32]
            path = os.path.join(self.directory, name)
            if not os.path.exists(path):
                with open(path, "wb") as fh:
                    fh.write(data)
        return True

    @classmethod
    def load(cls, directory: str) -> "Corpus":
        corpus = cls(directory)
        for name in sorted(os.listdir(directory)):
            path = os.path.join(directory, name)
            if os.path.isfile(path):
                with open(path, "rb") as fh:
                    corpus.add(fh.read())
        return corpus


def mutate(data: bytes, rng: random.Random, corpus: Corpus | None = None,
           max_len: int = MAX_LEN) -> bytes:
    """One uniformly chosen mutation; the result never exceeds max_len."""
    op = rng.randrange(5)
    buf = bytearray(data)
    if op == 0 and buf:  # bit flip
        i = rng.randrange(len(buf))
        buf[i] ^= 1 << rng.randrange(8)
    elif op == 1 and buf:  # byte set
        i = rng.randrange(len(buf))
        buf[i] = rng.randrange(256)
    elif op == 2 and buf:  # byte delete
        del buf[rng.randrange(len(buf))]
    elif op == 3:  # byte insert
        i = rng.randrange(len(buf) + 1)
        buf.insert(i, rng.randrange(256))
    elif op == 4 and corpus and corpus.inputs:  # splice from a corpus member
        donor = corpus.inputs[rng.randrange(len(corpus.inputs))]
        if donor:
            start = rng.randrange(len(donor))
            length = rng.randrange(1, len(donor) - start + 1)
            pos = rng.randrange(len(buf) + 1)
            chunk = donor[start : start + length]
            buf[pos : pos + len(chunk)] = chunk
    return bytes(buf[:max_len])


@dataclass(frozen=True)
class Crash:
    input: bytes
    trap: TrapInfo
    execution: int  # 1-based execution index when it fired

    def input_hex(self) -> str:
        return self.input.hex()


@dataclass
class StepOutcome:
    executions: int
    new_coverage: bool
    admitted: bool
    crash: Crash | None
    newly_fast: tuple[str, ...]
    result: ExecResult


class FuzzVariantState:
    """Per-function tier plus the global sanitized-override flag."""

    def __init__(self, table: VariantDispatchTable,
                 descriptors: list[FunctionDescriptor]):
        self.table = table
        self.descriptors = list(descriptors)
        self.tier: dict[str, int] = {d.function: TIER_COVERAGE for d in descriptors}
        self.override = False

    def _kind_name(self, d: FunctionDescriptor, want: str) -> str:
        available = dict((k, n) for k, n, _ in d.variants)
        for kind in _KIND_FALLBACK[want]:
            if kind in available:
                return available[kind]
        raise FuzzError(f"'{d.function}' has no usable variant")

    def apply(self) -> int:
        """Synchronous partitioning round: activate each slot per tier."""
        writes = 0
        for d in self.descriptors:
            want = "sanitized" if self.override else _TIER_KIND[self.tier[d.function]]
            if self.table.activate(d.slot, self._kind_name(d, want)):
                writes += 1
        return writes

    def promote_explored(self, coverage: CoverageMap,
                         labels: dict[str, set[str]]) -> tuple[str, ...]:
        """Move every newly fully-explored function to the fast tier."""
        moved = []
        for d in self.descriptors:
            fn = d.function
            if self.tier[fn] != TIER_FAST and coverage.fully_explored(fn, labels[fn]):
                self.tier[fn] = TIER_FAST
                moved.append(fn)
        return tuple(moved)


class FuzzContext:
    """Everything one campaign needs: program, table, coverage, corpus, RNG."""

    def __init__(
        self,
        program: Program,
        table: VariantDispatchTable,
        descriptors: list[FunctionDescriptor],
        rng: random.Random,
        corpus: Corpus | None = None,
        exec_options: ExecOptions | None = None,
        tiered: bool = True,
        seed: int = 0,
    ):
        self.program = program
        self.table = table
        self.rng = rng
        self.seed = seed
        self.corpus = corpus if corpus is not None else Corpus()
        self.coverage = CoverageMap()
        self.state = FuzzVariantState(table, descriptors) if tiered else None
        self.exec_options = exec_options or ExecOptions()
        self.executions = 0
        # block labels per multi-variant source function, for fully-explored
        self.labels: dict[str, set[str]] = {}
        fmap = program.function_map()
        for d in descriptors:
            body = fmap[d.variants[0][1]]
            self.labels[d.function] = {b.label for b in body.blocks}

    def run(self, data: bytes) -> ExecResult:
        self.executions += 1
        opts = self.exec_options
        return interpret(
            self.program,
            inputs=data,
            table=self.table,
            options=opts,
        )


def fuzz_step(ctx: FuzzContext, data: bytes) -> StepOutcome:
    """Execute one input under the tier policy.

    New cumulative coverage admits the input and triggers exactly one fully
    sanitized re-execution of the same bytes; afterwards every function
    whose blocks are all covered drops to the fast tier.
    """
    state = ctx.state
    if state is not None:
        state.apply()

    result = ctx.run(data)
    crash = None
    if result.trapped:
        crash = Crash(data, result.trap, ctx.executions)

    new = ctx.coverage.observe(result.coverage)
    admitted = False
    executions = 1

    if new and crash is None and state is not None:
        admitted = ctx.corpus.add(data)
        state.override = True
        state.apply()
        second = ctx.run(data)
        executions += 1
        state.override = False
        if second.trapped:
            crash = Crash(data, second.trap, ctx.executions)
    elif new and state is None:
        # untiered (baseline) mode still grows the corpus on new coverage
        admitted = ctx.corpus.add(data)
    elif new and crash is not None:
        admitted = ctx.corpus.add(data)

    newly_fast: tuple[str, ...] = ()
    if state is not None:
        newly_fast = state.promote_explored(ctx.coverage, ctx.labels)

    return StepOutcome(executions, new, admitted, crash, newly_fast, result)


@dataclass
class FuzzReport:
    executions: int
    steps: int
    corpus_size: int
    covered_blocks: int
    crashes: list[Crash]
    seed: int
    elapsed_seconds: float          # wall clock: excluded from determinism
    series: list[tuple[int, int]]   # (executions, cumulative blocks)
    stopped_on_crash: bool

    @property
    def executions_per_second(self) -> float:
        if self.elapsed_seconds <= 0:
            return 0.0
        return self.executions / self.elapsed_seconds


def fuzz_campaign(
    ctx: FuzzContext,
    seeds: list[bytes] | None = None,
    max_executions: int = 10_000,
    keep_going: bool = False,
    series_every: int = 256,
) -> FuzzReport:
    """Mutate-and-run loop under a hard execution budget.

    Synchronous partitioning happens inside fuzz_step. Every field of the
    report except elapsed_seconds is a pure function of (program, seeds,
    RNG seed, budget).
    """
    rng = ctx.rng
    # A lone empty seed is a dead end: single-operator mutation can only
    # grow it one byte per admitted input, and one byte rarely reaches new
    # coverage. Default to an empty and a small zeroed input instead.
    seed_inputs = list(seeds) if seeds else [b"", bytes(4)]
    crashes: list[Crash] = []
    series: list[tuple[int, int]] = []
    steps = 0
    stopped = False
    started = time.monotonic()

    pending = list(seed_inputs)
    while ctx.executions < max_executions and not stopped:
        if pending:
            data = pending.pop(0)
        else:
            pool = ctx.corpus.inputs or seed_inputs
            data = mutate(pool[rng.randrange(len(pool))], rng, ctx.corpus)
        outcome = fuzz_step(ctx, data)
        steps += 1
        if outcome.crash is not None:
            crashes.append(outcome.crash)
            if not keep_going:
                stopped = True
        if steps % series_every == 0 or stopped:
            series.append((ctx.executions, len(ctx.coverage.blocks)))
    elapsed = time.monotonic() - started
    if not series or series[-1][0] != ctx.executions:
        series.append((ctx.executions, len(ctx.coverage.blocks)))

    return FuzzReport(
        executions=ctx.executions,
        steps=steps,
        corpus_size=len(ctx.corpus),
        covered_blocks=len(ctx.coverage.blocks),
        crashes=crashes,
        seed=ctx.seed,
        elapsed_seconds=elapsed,
        series=series,
        stopped_on_crash=stopped,
    )


def report_to_json(report: FuzzReport) -> str:
    doc = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "executions": report.executions,
        "steps": report.steps,
        "corpus_size": report.corpus_size,
        "covered_blocks": report.covered_blocks,
        "seed": report.seed,
        "elapsed_seconds": report.elapsed_seconds,
        "executions_per_second": report.executions_per_second,
        "stopped_on_crash": report.stopped_on_crash,
        "crashes": [
            {
                "input_hex": c.input.hex(),
                "trap_kind": c.trap.kind,
                "function": c.trap.function,
                "block": c.trap.block,
                "variant_kind": c.trap.variant_kind,
                "execution": c.execution,
            }
            for c in report.crashes
        ],
        "series": [[e, b] for e, b in report.series],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_report(report: FuzzReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report))


def write_series_csv(report: FuzzReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["executions", "cumulative_blocks"])
        for e, b in report.series:
            w.writerow([e, b])
