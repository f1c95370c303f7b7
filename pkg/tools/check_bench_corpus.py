#!/usr/bin/env python3
"""Sanity-check the shipped bench corpus.

For every bench program this verifies:
  * it parses, validates, and runs clean on both workloads
  * a fully sanitized build runs check-clean with identical output
  * an all-unsanitized multi-variant build preserves output (dispatch
    transparency)
  * with a train profile and hot_threshold=2, every multi-variant
    function stays unclamped under the expected-cost policy at a 1%
    budget, with margin
"""

import sys
from fractions import Fraction

from varsan.bench import BENCH_NAMES, collect_profile, load_bench_input, load_bench_source
from varsan.interp import interpret
from varsan.pir import validate_program
from varsan.variants import build_program


def check(name: str) -> bool:
    ok = True
    program = load_bench_source(name)
    validate_program(program)
    train = load_bench_input(name, "train")
    ref = load_bench_input(name, "ref")

    base = {w: interpret(program, inputs=d) for w, d in (("train", train), ("ref", ref))}
    for w, r in base.items():
        if r.status != "ok":
            print(f"  {name}.{w}: baseline trap {r.trap.kind}")
            ok = False

    # no profile -> every function cold -> sanitized in place
    sanitized = build_program(program)
    for w, d in (("train", train), ("ref", ref)):
        r = interpret(sanitized.program, inputs=d, table=sanitized.table)
        if r.status != "ok":
            print(f"  {name}.{w}: sanitized build trapped {r.trap.kind} at {r.trap.function}/{r.trap.block}")
            ok = False
        elif r.output != base[w].output:
            print(f"  {name}.{w}: sanitized output differs")
            ok = False

    profile = collect_profile(program, [train], name)
    built = build_program(program, profile=profile, hot_threshold=2)
    for force in ("sanitized", "unsanitized"):
        built.table.force_kind([force, "fast", "coverage", "sanitized"])
        for w, d in (("train", train), ("ref", ref)):
            r = interpret(built.program, inputs=d, table=built.table)
            if r.status != "ok":
                print(f"  {name}.{w}: {force} table trapped {r.trap.kind} at {r.trap.function}/{r.trap.block}")
                ok = False
            elif r.output != base[w].output:
                print(f"  {name}.{w}: {force} table output differs")
                ok = False

    descs = built.descriptors
    if not descs:
        print(f"  {name}: no multi-variant functions at hot_threshold=2")
        return False
    m = len(descs)
    budget = Fraction(1, 100) * sum(
        Fraction(d.cost_unsanitized()) * d.exec_count for d in descs
    )
    share = budget / m
    worst = None
    for d in descs:
        delta = d.cost_sanitized() - d.cost_unsanitized()
        weight = Fraction(delta) * d.exec_count
        if weight == 0:
            print(f"  {name}: {d.function} has zero delta*count (p would clamp to 1)")
            ok = False
            continue
        margin = weight / share if share else Fraction(0)
        if worst is None or margin < worst[1]:
            worst = (d.function, margin)
        if margin < Fraction(3, 2):
            print(f"  {name}: {d.function} margin {float(margin):.2f} < 1.5 (delta={delta} count={d.exec_count})")
            ok = False
    names = ", ".join(f"{d.function}(n={d.exec_count})" for d in descs)
    wtag = f"{worst[0]}={float(worst[1]):.1f}x" if worst else "n/a"
    print(f"  {name}: {m} descriptors [{names}], worst margin {wtag}")
    return ok


def main() -> int:
    all_ok = True
    for name in BENCH_NAMES:
        print(name)
        if not check(name):
            all_ok = False
    print("corpus OK" if all_ok else "corpus FAILED")
    return 0 if all_ok else 1


if __name__ == "__main__":
    sys.exit(main())
