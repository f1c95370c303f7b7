"""Interpreter semantics: value model, memory asymmetry, costs, limits."""

import pytest

from varsan.interp import (
    DISPATCH_COST,
    ExecError,
    ExecOptions,
    instruction_cost_report,
    interpret,
    overhead,
)
from varsan.variants import build_program

from conftest import load


def run(text, inputs=b"", **kw):
    return interpret(load(text), inputs=inputs, options=ExecOptions(**kw) if kw else None)


def test_add_program_outputs_five(arith_program):
    result = interpret(arith_program)
    assert result.status == "ok"
    assert result.return_value == 5
    assert result.output_values() == (5,)
    # output encodes each value as 8 little-endian bytes
    assert result.output == (5).to_bytes(8, "little")


def test_wraparound_arithmetic():
    r = run("func main() { b0: a = const 9223372036854775807; b = add a 1; return b }")
    assert r.return_value == -(2**63)
    r = run("func main() { b0: a = const -9223372036854775808; b = sub a 1; return b }")
    assert r.return_value == 2**63 - 1
    r = run("func main() { b0: a = const 4294967296; b = mul a a; return b }")
    assert r.return_value == 0


def test_raw_shift_masks_amount():
    r = run("func main() { b0: a = const 1; b = const 64; c = shl a b; return c }")
    assert r.return_value == 1  # 64 & 63 == 0
    r = run("func main() { b0: a = const 1; b = const -1; c = shr a b; return c }")
    assert r.return_value == 0  # -1 & 63 == 63


def test_raw_division_is_total():
    r = run("func main() { b0: a = const 7; b = const 0; c = sdiv a b; return c }")
    assert r.return_value == 0
    r = run(
        "func main() { b0: a = const -9223372036854775808; b = const -1; "
        "c = sdiv a b; return c }"
    )
    assert r.return_value == -(2**63)


def test_sdiv_truncates_toward_zero():
    r = run("func main() { b0: a = const -7; b = const 2; c = sdiv a b; return c }")
    assert r.return_value == -3


def test_narrow_loads_zero_extend_and_wide_loads_sign():
    r = run(
        """
        func main() {
          b0:
            p = alloc 8
            v = const -1
            store p v 1
            one = load p 1
            eight = load p 8
            t = mul one 1000
            s = add t eight
            return s
        }
        """
    )
    # byte reads back as 255; the 8-byte read sees 0x00000000000000ff
    assert r.return_value == 255 * 1000 + 255


def test_eight_byte_load_is_signed():
    r = run(
        """
        func main() {
          b0:
            p = alloc 8
            v = const -2
            store p v 8
            w = load p 8
            return w
        }
        """
    )
    assert r.return_value == -2


def test_little_endian_layout():
    r = run(
        """
        func main() {
          b0:
            p = alloc 8
            v = const 258
            store p v 8
            lo = load p 1
            return lo
        }
        """
    )
    assert r.return_value == 2  # 258 = 0x0102, low byte first


HEAP_OOB = """
func main() {
  b0:
    p = alloc 8
    q = alloc 8
    a = add p 8
    v = const 5
    store a v 1
    r = const 0
    return r
}
"""


def test_intra_arena_oob_is_silent_raw_but_traps_sanitized():
    program = load(HEAP_OOB)
    raw = interpret(program)
    assert raw.status == "ok"  # lands in the neighbouring allocation

    build = build_program(program)  # no profile: single sanitized bodies
    checked = interpret(build.program, table=build.table)
    assert checked.status == "trap"
    assert checked.trap.kind == "address_check"


def test_escaping_the_arena_traps_even_raw():
    r = run(
        """
        func main() {
          b0:
            p = alloc 8
            a = add p 100000
            v = load a 1
            return v
        }
        """
    )
    assert r.trapped and r.trap.kind == "oob_raw"


def test_null_page_access_traps_raw():
    r = run("func main() { b0: z = const 8; v = load z 1; return v }")
    assert r.trapped and r.trap.kind == "oob_raw"


def test_raw_use_after_free_touching_dead_cells():
    r = run(
        """
        func main() {
          b0:
            p = alloc 8
            free p
            v = load p 1
            return v
        }
        """
    )
    assert r.trapped and r.trap.kind == "uaf_raw"


def test_freed_cells_never_recycled():
    r = run(
        """
        func main() {
          b0:
            p = alloc 8
            free p
            q = alloc 8
            same = cmp eq p q
            return same
        }
        """
    )
    assert r.return_value == 0


def test_global_addressing_and_init():
    r = run(
        """
        global g 8 = 7 0 0 0 0 0 0 0
        func main() {
          b0:
            a = gaddr g
            v = load a 8
            w = add v 1
            store a w 8
            x = load a 1
            return x
        }
        """
    )
    assert r.return_value == 8


def test_determinism_identical_runs(heap_program):
    a = interpret(heap_program, inputs=b"\x00")
    b = interpret(heap_program, inputs=b"\x00")
    assert a == b


def test_instruction_limit_traps_unreachable():
    r = run(
        "func main() { b0: branch b0 }",
        instr_limit=1000,
    )
    assert r.trapped and r.trap.kind == "unreachable"
    assert "limit" in r.trap.detail


def test_frame_limit_traps_unreachable():
    r = run(
        """
        func spin(x: i64) {
          b0:
            y = call spin x
            return y
        }
        func main() {
          b0:
            r = call spin 1
            return r
        }
        """,
        frame_limit=32,
    )
    assert r.trapped and r.trap.kind == "unreachable"
    assert "depth" in r.trap.detail


def test_extern_call_is_an_error_not_a_trap():
    program = load(
        """
        extern mystery
        func main() {
          b0:
            r = call mystery
            return r
        }
        """
    )
    with pytest.raises(ExecError):
        interpret(program)


def test_icall_without_table_is_an_error():
    program = load(
        "func main() variant=sanitized { b0: r = icall 0; return r }"
    )
    with pytest.raises(ExecError):
        interpret(program)


def test_funcref_is_opaque():
    stored = load(
        """
        func id(x: i64) { b0: return x }
        func main() {
          b0:
            f = addr id
            p = alloc 8
            store p f 8
            r = const 0
            return r
        }
        """
    )
    r = interpret(stored)
    assert r.trapped and r.trap.kind == "unreachable"

    called = run(
        """
        func double(x: i64) { b0: y = mul x 2; return y }
        func main() {
          b0:
            f = addr double
            r = callv f 21
            return r
        }
        """
    )
    assert called.return_value == 42


def test_input_intrinsics():
    r = run(
        """
        func main() {
          b0:
            n = inlen
            a = in 0
            past = in 9
            t = mul n 1000
            u = mul a 10
            s = add t u
            s2 = add s past
            return s2
        }
        """,
        inputs=b"\x07\x01",
    )
    assert r.return_value == 2 * 1000 + 7 * 10 + 0


def test_instruction_count_and_classes(arith_program):
    result = interpret(arith_program)
    assert result.instructions_executed == 5
    assert result.instructions_by_class == {"plain": 5}
    assert sum(result.instructions_by_class.values()) == result.instructions_executed
    report = instruction_cost_report(result)
    assert report["total"] == 5


def test_overhead_zero_for_identical_runs(arith_program):
    a = interpret(arith_program)
    b = interpret(arith_program)
    assert overhead(a, b) == 0


def test_dispatch_cost_counted_per_indirect_call():
    program = load(HEAP_OOB)
    base = interpret(program)

    build = build_program(program, sanitizers=frozenset())  # partition-only
    build.table.force_kind(["unsanitized", "fast"])
    relaxed = interpret(build.program, table=build.table)
    assert relaxed.status == "ok"
    extra = relaxed.instructions_executed - base.instructions_executed
    assert extra == relaxed.dispatched_calls * DISPATCH_COST
    assert relaxed.instructions_by_class.get("dispatch", 0) == extra


def test_profile_and_coverage_hooks():
    r = run(
        """
        func main() variant=coverage {
          b0:
            cov_hit main b0
            prof_count main
            prof_count main b0
            r = const 0
            return r
        }
        """
    )
    assert r.coverage == {("main", "b0"): 1}
    assert r.profile_counts == {"main": 1}
    assert r.profile_block_counts == {("main", "b0"): 1}


def test_ub_recovery_collects_warnings():
    program = load(
        """
        func main() variant=sanitized {
          b0:
            a = const 9223372036854775807
            check_overflow add a 1
            c = add a 1
            return c
        }
        """
    )
    halted = interpret(program)
    assert halted.trapped and halted.trap.kind == "overflow_check"
    recovered = interpret(program, options=ExecOptions(ub_recovery=True))
    assert recovered.status == "ok"
    assert len(recovered.ub_warnings) == 1
    assert recovered.return_value == -(2**63)
