"""Command-line front end: build, profile, run, bench, fuzz, replay, report.

Policy settings resolve with precedence: config file < environment < flag.
Environment variables: VARSAN_POLICY, VARSAN_BUDGET, VARSAN_WAKE_INTERVAL,
VARSAN_SEED. Exit status: 0 on success (for `run`, a clean execution; for
`replay`, a reproduced trap), 1 on traps/errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import __version__
from .bench import (
    BENCH_NAMES,
    DEFAULT_CONFIGS,
    collect_profile,
    render_table,
    run_benchmarks,
)
from .fuzz import (
    Corpus,
    FuzzContext,
    MAX_LEN,
    fuzz_campaign,
    report_to_json,
    write_report,
    write_series_csv,
)
from .interp import ExecOptions, interpret, instruction_cost_report, overhead
from .pir import PirError, parse_program, serialize_program
from .policy import POLICIES, PolicyConfig, PolicyRuntime, SEED_ENV_VAR
from .profiling import (
    Profile,
    instrument_profile,
    merge_profiles,
    profile_from_result,
    read_profile,
    write_profile,
)
from .variants import (
    build_fuzz_baseline,
    build_program,
    read_metadata,
    table_from_descriptors,
    write_metadata,
)

ENV_PREFIX = "VARSAN_"


def _read_input_args(args) -> bytes:
    if getattr(args, "input_hex", None):
        try:
            return bytes.fromhex(args.input_hex)
        except ValueError:
            raise SystemExit(f"error: --input-hex is not valid hex: {args.input_hex!r}")
    if getattr(args, "input", None):
        with open(args.input, "rb") as fh:
            return fh.read()
    return b""


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    section = doc.get("policy", doc)
    if not isinstance(section, dict):
        raise SystemExit("error: config file [policy] section is not a table")
    return section


def resolve_policy_config(args) -> PolicyConfig:
    """file < environment < flag, field by field."""
    cfg = PolicyConfig(background=False)
    file_vals = _load_config_file(getattr(args, "config", None))
    env = os.environ

    def pick(flag_val, env_key, file_key, cast):
        if flag_val is not None:
            return cast(flag_val)
        if ENV_PREFIX + env_key in env:
            return cast(env[ENV_PREFIX + env_key])
        if file_key in file_vals:
            return cast(file_vals[file_key])
        return None

    policy = pick(getattr(args, "policy", None), "POLICY", "policy", str)
    if policy is not None:
        cfg.policy = policy
    budget = pick(getattr(args, "budget", None), "BUDGET", "budget_fraction", float)
    if budget is not None:
        cfg.budget_fraction = budget
    wake = pick(
        getattr(args, "wake_interval", None), "WAKE_INTERVAL", "wake_interval_ms", float
    )
    if wake is not None:
        cfg.wake_interval_ms = wake
    seed = pick(getattr(args, "seed", None), "SEED", "rng_seed", lambda v: int(str(v), 0))
    if seed is not None:
        cfg.rng_seed = seed
    cfg.background = bool(getattr(args, "realtime", False))
    cfg.validate()
    return cfg


def _sanitizer_set(values: list[str] | None) -> frozenset[str]:
    if not values:
        return frozenset({"address"})
    chosen = set(values)
    if "none" in chosen:
        if len(chosen) > 1:
            raise SystemExit("error: --sanitize none excludes other sanitizers")
        return frozenset()
    return frozenset(chosen)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_build(args) -> int:
    with open(args.source, encoding="utf-8") as fh:
        source = parse_program(fh.read())
    sanitizers = _sanitizer_set(args.sanitize)
    cfg = resolve_policy_config(args)
    profile = read_profile(args.profile) if args.profile else None
    if cfg.policy in ("expected_cost", "profile_guided") and profile is None:
        raise SystemExit(
            f"error: --policy {cfg.policy} requires --profile (an execution-"
            "count profile decides hot and cold functions)"
        )

    if args.fuzz_baseline:
        if args.fuzz:
            raise SystemExit("error: --fuzz and --fuzz-baseline are exclusive")
        if not sanitizers:
            raise SystemExit("error: --fuzz-baseline needs at least one sanitizer")
        built_program = build_fuzz_baseline(source, sanitizers)
        descriptors, trampolines = [], []
    else:
        build = build_program(
            source,
            profile,
            sanitizers=sanitizers,
            hot_threshold=args.hot_threshold,
            fuzz=args.fuzz,
        )
        built_program = build.program
        descriptors, trampolines = build.descriptors, build.trampolines

    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(serialize_program(built_program))
    write_metadata(descriptors, trampolines, args.metadata)
    print(f"built {args.output}: {len(built_program.functions)} bodies, "
          f"{len(descriptors)} dispatch slots, "
          f"{len(trampolines)} trampolines")
    return 0


def cmd_profile(args) -> int:
    with open(args.source, encoding="utf-8") as fh:
        source = parse_program(fh.read())
    instrumented = instrument_profile(source)

    workloads: list[bytes] = []
    for path in args.workload or []:
        with open(path, "rb") as fh:
            workloads.append(fh.read())
    for hx in args.workload_hex or []:
        workloads.append(bytes.fromhex(hx))

    profile = Profile(
        functions={f.name: 0 for f in source.functions},
        workload=args.workload_name,
    )
    traps = 0
    for data in workloads:
        result = interpret(instrumented, inputs=data)
        if result.trapped:
            traps += 1
            print(
                f"warning: workload run trapped ({result.trap.kind} in "
                f"{result.trap.function}); partial counts merged",
                file=sys.stderr,
            )
        profile = merge_profiles(
            profile, profile_from_result(result, workload=args.workload_name)
        )
    write_profile(profile, args.output)
    ran = len(workloads)
    print(f"profiled {ran} workload(s) ({traps} trapped) -> {args.output}")
    return 0


def _forced_table(table, mode: str) -> None:
    if mode == "sanitized":
        table.force_kind(["sanitized", "coverage", "fast", "unsanitized"])
    else:
        table.force_kind(["unsanitized", "fast", "coverage", "sanitized"])


def cmd_run(args) -> int:
    with open(args.program, encoding="utf-8") as fh:
        program = parse_program(fh.read())
    descriptors, _ = read_metadata(args.metadata)
    table = table_from_descriptors(descriptors) if descriptors else None
    data = _read_input_args(args)

    runtime = None
    opts = ExecOptions(ub_recovery=args.ub_recovery)
    if table is not None and len(descriptors):
        if args.all_sanitized:
            _forced_table(table, "sanitized")
        elif args.all_unsanitized:
            _forced_table(table, "relaxed")
        else:
            cfg = resolve_policy_config(args)
            runtime = PolicyRuntime()
            runtime.register_module(descriptors, table)
            runtime.init(cfg)
            if args.switch_every:
                opts = ExecOptions(
                    ub_recovery=args.ub_recovery,
                    switch_every=args.switch_every,
                    switch_hook=runtime.partition_once,
                )

    try:
        result = interpret(program, inputs=data, table=table, options=opts)
    finally:
        if runtime is not None:
            runtime.shutdown()

    report = instruction_cost_report(result)
    print(f"status: {result.status}")
    if result.return_value is not None:
        print(f"return: {result.return_value}")
    if result.output:
        print(f"output: {' '.join(str(v) for v in result.output_values())}")
    print(f"instructions: {report['total']}")
    for cls in sorted(report["by_class"]):
        print(f"  {cls}: {report['by_class'][cls]}")
    print(f"dispatched calls: {report['dispatched_calls']}")
    for w in result.ub_warnings:
        print(f"ub warning: {w}")

    if args.baseline:
        with open(args.baseline, encoding="utf-8") as fh:
            base_prog = parse_program(fh.read())
        base = interpret(base_prog, inputs=data)
        ov = overhead(result, base)
        print(f"overhead vs baseline: {float(ov) * 100:.4f}% "
              f"({result.instructions_executed} vs {base.instructions_executed})")

    if result.trapped:
        t = result.trap
        print(
            f"trap: {t.kind} in {t.function} at block {t.block} "
            f"(variant {t.variant_kind}): {t.detail}"
        )
        return 1
    return 0


def cmd_bench(args) -> int:
    names = tuple(args.programs) if args.programs else BENCH_NAMES
    rows = run_benchmarks(
        configs=DEFAULT_CONFIGS,
        names=names,
        budget_fraction=args.budget,
        repeat=args.repeat,
        seed=args.seed if args.seed is not None else 1,
    )
    print(render_table(rows))
    if args.csv:
        import csv as _csv

        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(
                ["config", "program", "baseline", "median", "overhead", "status"]
            )
            for r in rows:
                w.writerow(
                    [r.config, r.program, r.baseline_instructions,
                     r.instructions, float(r.overhead), r.status]
                )
        print(f"wrote {args.csv}")
    return 0


def cmd_fuzz(args) -> int:
    with open(args.program, encoding="utf-8") as fh:
        program = parse_program(fh.read())
    descriptors, _ = read_metadata(args.metadata)
    table = table_from_descriptors(descriptors) if descriptors else None
    tiered = bool(descriptors)

    seed = args.seed if args.seed is not None else int.from_bytes(os.urandom(8), "little")
    rng = random.Random(seed)
    corpus = Corpus.load(args.corpus) if args.corpus and os.path.isdir(args.corpus) \
        else Corpus(args.corpus)
    seeds = list(corpus.inputs)

    ctx = FuzzContext(
        program, table, descriptors, rng, corpus=corpus, tiered=tiered, seed=seed
    )
    report = fuzz_campaign(
        ctx,
        seeds=seeds or None,
        max_executions=args.budget_execs,
        keep_going=args.keep_going,
    )

    mode = "tiered" if tiered else "always-sanitized"
    print(f"mode: {mode}  seed: {seed}")
    print(
        f"executions: {report.executions}  corpus: {report.corpus_size}  "
        f"blocks: {report.covered_blocks}  "
        f"execs/sec: {report.executions_per_second:.0f}"
    )
    for c in report.crashes:
        print(
            f"crash: {c.trap.kind} in {c.trap.function} at {c.trap.block} "
            f"input={c.input.hex() or '(empty)'}"
        )
    if args.report:
        write_report(report, args.report)
        print(f"wrote {args.report}")
    if args.csv:
        write_series_csv(report, args.csv)
        print(f"wrote {args.csv}")
    return 1 if report.crashes and not args.keep_going else 0


def cmd_replay(args) -> int:
    with open(args.program, encoding="utf-8") as fh:
        program = parse_program(fh.read())
    descriptors, _ = read_metadata(args.metadata)
    table = table_from_descriptors(descriptors) if descriptors else None
    if table is not None and len(descriptors):
        _forced_table(table, "sanitized")
    data = _read_input_args(args)

    result = interpret(program, inputs=data, table=table)
    if result.trapped:
        t = result.trap
        print(
            f"reproduced: {t.kind} in {t.function} at block {t.block} "
            f"(variant {t.variant_kind}): {t.detail}"
        )
        return 0
    print("input did not trap under the fully sanitized table")
    return 1


def cmd_report(args) -> int:
    for path in args.files:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        schema = doc.get("schema", "?")
        print(f"{path}: {schema} v{doc.get('version', '?')}")
        if schema == "varsan-profile":
            funcs = doc.get("functions", {})
            hot = sorted(funcs.items(), key=lambda kv: -kv[1])[:10]
            print(f"  workload: {doc.get('workload') or '(none)'}")
            print(f"  functions: {len(funcs)}")
            for name, n in hot:
                print(f"    {name}: {n}")
        elif schema == "varsan-metadata":
            rows = doc.get("table", [])
            print(f"  dispatch slots: {len(rows)}")
            for row in rows:
                kinds = ",".join(v["kind"] for v in row["variants"])
                p = row.get("activation_probability")
                ptxt = f" p={p:.4f}" if isinstance(p, (int, float)) else ""
                print(f"    [{row['slot']}] {row['function']}: {kinds}"
                      f" count={row['exec_count']}{ptxt}")
        elif schema == "varsan-fuzz-report":
            print(f"  executions: {doc.get('executions')}")
            print(f"  covered blocks: {doc.get('covered_blocks')}")
            print(f"  corpus: {doc.get('corpus_size')}")
            print(f"  crashes: {len(doc.get('crashes', []))}")
            for c in doc.get("crashes", []):
                print(f"    {c['trap_kind']} in {c['function']} input={c['input_hex']}")
        else:
            print("  (unrecognized document; raw keys: "
                  + ", ".join(sorted(doc)) + ")")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file with a [policy] table")
    p.add_argument("--policy", choices=POLICIES, default=None)
    p.add_argument("--budget", type=float, default=None,
                   help="sanitization budget fraction (expected_cost)")
    p.add_argument("--wake-interval", type=float, default=None,
                   help="background partitioner interval, ms")
    p.add_argument("--seed", type=lambda v: int(v, 0), default=None,
                   help=f"RNG seed (env {SEED_ENV_VAR} overrides config file)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varsan",
        description="Multi-variant sanitization for PIR programs: build "
        "variant builds, collect profiles, run under activation policies, "
        "benchmark overheads, and fuzz with tiered variants.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="produce a variant build + metadata")
    b.add_argument("source")
    b.add_argument("-o", "--output", required=True)
    b.add_argument("--metadata", required=True)
    b.add_argument("--sanitize", action="append",
                   choices=["address", "ub", "none"],
                   help="repeatable; default address")
    b.add_argument("--profile", help="profile JSON from `varsan profile`")
    b.add_argument("--hot-threshold", type=int, default=1)
    b.add_argument("--fuzz", action="store_true",
                   help="three-tier fuzz build (coverage/sanitized/fast)")
    b.add_argument("--fuzz-baseline", action="store_true",
                   help="single-variant build with coverage and checks always on")
    _add_policy_flags(b)
    b.set_defaults(fn=cmd_build)

    p = sub.add_parser("profile", help="collect an execution-count profile")
    p.add_argument("source")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--workload", action="append", help="input file (repeatable)")
    p.add_argument("--workload-hex", action="append",
                   help="inline hex input (repeatable)")
    p.add_argument("--workload-name", default="train")
    p.set_defaults(fn=cmd_profile)

    r = sub.add_parser("run", help="execute a built program under a policy")
    r.add_argument("program")
    r.add_argument("--metadata", required=True)
    r.add_argument("--input", help="input bytes file")
    r.add_argument("--input-hex", help="inline hex input")
    r.add_argument("--all-sanitized", action="store_true")
    r.add_argument("--all-unsanitized", action="store_true")
    r.add_argument("--switch-every", type=int, default=0,
                   help="partition synchronously every N instructions")
    r.add_argument("--realtime", action="store_true",
                   help="background partitioner thread during the run")
    r.add_argument("--ub-recovery", action="store_true",
                   help="log UB check hits and continue instead of trapping")
    r.add_argument("--baseline", help="original .pir to compute overhead against")
    _add_policy_flags(r)
    r.set_defaults(fn=cmd_run)

    be = sub.add_parser("bench", help="overhead table across build configs")
    be.add_argument("--programs", nargs="*", choices=BENCH_NAMES)
    be.add_argument("--budget", type=float, default=None)
    be.add_argument("--repeat", type=int, default=3)
    be.add_argument("--seed", type=lambda v: int(v, 0), default=None)
    be.add_argument("--csv")
    be.set_defaults(fn=cmd_bench)

    f = sub.add_parser("fuzz", help="coverage-guided fuzzing campaign")
    f.add_argument("program", help="fuzz build (or fuzz-baseline build)")
    f.add_argument("--metadata", required=True)
    f.add_argument("--corpus", help="corpus directory (created if missing)")
    f.add_argument("--budget-execs", type=int, default=10_000)
    f.add_argument("--seed", type=lambda v: int(v, 0), default=None)
    f.add_argument("--keep-going", action="store_true",
                   help="log crashes and continue")
    f.add_argument("--report", help="write JSON campaign report")
    f.add_argument("--csv", help="write coverage time series CSV")
    f.set_defaults(fn=cmd_fuzz)

    rp = sub.add_parser("replay", help="re-run a crash input fully sanitized")
    rp.add_argument("program")
    rp.add_argument("--metadata", required=True)
    rp.add_argument("--input", help="crash input file")
    rp.add_argument("--input-hex", help="inline hex crash input")
    rp.set_defaults(fn=cmd_replay)

    rep = sub.add_parser("report", help="summarize profile/metadata/fuzz JSON")
    rep.add_argument("files", nargs="+")
    rep.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except PirError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
