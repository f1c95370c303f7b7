"""Benchmark harness: instruction-count overheads across build configs.

Each bench program ships with a training input (for the profile) and a
reference input (for measurement). Overhead of a config on a program is
instructions(config) / instructions(direct-call original) - 1, computed
exactly from interpreter counts; the table reports per-program overheads,
the geometric mean, and the repeat median. Repeats vary only the
partitioning seed, so medians are meaningful for instruction counts too.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

from .interp import ExecOptions, ExecResult, interpret
from .pir import Program, parse_program
from .policy import PolicyConfig, PolicyRuntime
from .profiling import Profile, instrument_profile, merge_profiles, profile_from_result
from .variants import BuildResult, build_program

__all__ = [
    "BENCH_NAMES",
    "BenchConfig",
    "BenchRow",
    "DEFAULT_CONFIGS",
    "NON_COMPARABILITY_NOTE",
    "load_bench_source",
    "load_bench_input",
    "collect_profile",
    "run_benchmarks",
    "render_table",
]

BENCH_NAMES = ("sort", "matmul", "hashtable", "strscan", "parser", "checksum")

NON_COMPARABILITY_NOTE = (
    "note: overheads are interpreter instruction-count ratios (dispatch = 1 "
    "unit per indirect call); wall-clock percentages from native binaries "
    "are not directly comparable."
)


def _read_text(relative: str) -> str:
    return (
        resources.files("varsan").joinpath("progs").joinpath(relative).read_text()
    )


def _read_bytes(relative: str) -> bytes:
    return (
        resources.files("varsan").joinpath("progs").joinpath(relative).read_bytes()
    )


def load_bench_source(name: str) -> Program:
    if name not in BENCH_NAMES:
        raise ValueError(f"unknown bench program '{name}'")
    return parse_program(_read_text(f"bench/{name}.pir"))


def load_bench_input(name: str, which: str) -> bytes:
    if which not in ("train", "ref"):
        raise ValueError("input must be 'train' or 'ref'")
    return _read_bytes(f"workloads/{name}.{which}.bin")


def collect_profile(source: Program, workloads: list[bytes], name: str = "") -> Profile:
    """Profile-instrumented runs over the workloads, merged."""
    instrumented = instrument_profile(source)
    profile = Profile(workload=name)
    for i, data in enumerate(workloads):
        result = interpret(instrumented, inputs=data)
        run = profile_from_result(result, workload=name or f"w{i}")
        profile = merge_profiles(profile, run)
    return profile


@dataclass(frozen=True)
class BenchConfig:
    """One column of the comparison table."""

    name: str
    sanitizers: frozenset[str] = frozenset({"address"})
    policy: str = "expected_cost"
    budget_fraction: float = 0.01
    force: str | None = None  # "sanitized" | "relaxed" | None (use policy)

    @staticmethod
    def partition_only() -> "BenchConfig":
        return BenchConfig("partition-only", frozenset(), "random", force="relaxed")

    @staticmethod
    def all_sanitized(sanitizers=frozenset({"address"})) -> "BenchConfig":
        return BenchConfig("all-sanitized", sanitizers, "random", force="sanitized")

    @staticmethod
    def all_unsanitized(sanitizers=frozenset({"address"})) -> "BenchConfig":
        return BenchConfig("all-unsanitized", sanitizers, "random", force="relaxed")


DEFAULT_CONFIGS = (
    BenchConfig.partition_only(),
    BenchConfig.all_unsanitized(),
    BenchConfig("expected-cost-1pct", frozenset({"address"}), "expected_cost", 0.01),
    BenchConfig("profile-guided", frozenset({"address"}), "profile_guided"),
    BenchConfig("random", frozenset({"address"}), "random"),
    BenchConfig.all_sanitized(),
)

_FORCE_PREFERENCE = {
    "sanitized": ["sanitized", "coverage", "fast", "unsanitized"],
    "relaxed": ["unsanitized", "fast", "coverage", "sanitized"],
}


@dataclass
class BenchRow:
    config: str
    program: str
    baseline_instructions: int
    instructions: int           # repeat median
    per_seed: list[int]
    status: str                 # "ok" or the trap kind

    @property
    def overhead(self) -> Fraction:
        return Fraction(self.instructions, self.baseline_instructions) - 1


def _run_once(
    build: BuildResult, data: bytes, config: BenchConfig, seed: int
) -> ExecResult:
    if config.force:
        build.table.force_kind(_FORCE_PREFERENCE[config.force])
    else:
        runtime = PolicyRuntime()
        runtime.register_module(build.descriptors, build.table)
        runtime.init(
            PolicyConfig(
                policy=config.policy,
                budget_fraction=config.budget_fraction,
                rng_seed=seed,
                background=False,
            )
        )
    return interpret(build.program, inputs=data, table=build.table)


def run_benchmarks(
    configs=DEFAULT_CONFIGS,
    names=BENCH_NAMES,
    budget_fraction: float | None = None,
    repeat: int = 3,
    seed: int = 1,
    hot_threshold: int = 2,
) -> list[BenchRow]:
    rows: list[BenchRow] = []
    for name in names:
        source = load_bench_source(name)
        train = load_bench_input(name, "train")
        ref = load_bench_input(name, "ref")
        profile = collect_profile(source, [train], name=f"{name}-train")
        base = interpret(source, inputs=ref)
        if base.trapped:
            raise RuntimeError(f"baseline run of '{name}' trapped: {base.trap}")

        for config in configs:
            if budget_fraction is not None and config.policy == "expected_cost":
                config = BenchConfig(
                    config.name, config.sanitizers, config.policy,
                    budget_fraction, config.force,
                )
            counts = []
            status = "ok"
            for r in range(repeat):
                build = build_program(
                    source,
                    profile,
                    sanitizers=config.sanitizers,
                    hot_threshold=hot_threshold,
                )
                result = _run_once(build, ref, config, seed + r)
                counts.append(result.instructions_executed)
                if result.trapped:
                    status = result.trap.kind
            rows.append(
                BenchRow(
                    config=config.name,
                    program=name,
                    baseline_instructions=base.instructions_executed,
                    instructions=int(statistics.median(counts)),
                    per_seed=counts,
                    status=status,
                )
            )
    return rows


def geometric_mean_overhead(rows: list[BenchRow]) -> float:
    """Geometric mean of the per-program cost ratios, minus one."""
    if not rows:
        return 0.0
    logs = [
        math.log(r.instructions / r.baseline_instructions) for r in rows
    ]
    return math.exp(sum(logs) / len(logs)) - 1


def render_table(rows: list[BenchRow]) -> str:
    """Plain-text comparison table, one block per config."""
    configs: dict[str, list[BenchRow]] = {}
    for r in rows:
        configs.setdefault(r.config, []).append(r)

    lines = []
    header = f"{'config':<22}{'program':<12}{'baseline':>10}{'measured':>10}{'overhead':>10}  status"
    lines.append(header)
    lines.append("-" * len(header))
    for config, group in configs.items():
        for r in group:
            pct = float(r.overhead) * 100
            lines.append(
                f"{r.config:<22}{r.program:<12}{r.baseline_instructions:>10}"
                f"{r.instructions:>10}{pct:>9.2f}%  {r.status}"
            )
        gm = geometric_mean_overhead(group) * 100
        lines.append(f"{config:<22}{'geomean':<12}{'':>10}{'':>10}{gm:>9.2f}%")
        lines.append("")
    lines.append(NON_COMPARABILITY_NOTE)
    return "\n".join(lines)


__all__.append("geometric_mean_overhead")
