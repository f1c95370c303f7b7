"""PIR interpreter with a flat byte arena and instruction-count accounting.

Execution cost is deterministic: every interpreted instruction costs one
unit, and each dispatch-table call adds one synthetic unit on top of its
callee, standing in for the indirect-call overhead of a real binary.

The memory model drives the detection story. Raw loads and stores trap only
when they leave the arena entirely or touch the reserved null page
(`oob_raw`) or hit bytes of a freed allocation (`uaf_raw`; freed cells are
never recycled, so stale pointers stay poisoned). An out-of-bounds access
that lands inside some other live allocation corrupts it silently, exactly
the class of bug only the checked variants (`check_addr`) can catch.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field, replace

from .pir import (
    Function,
    Instruction,
    PirError,
    Program,
)

__all__ = [
    "ExecResult",
    "ExecOptions",
    "ExecError",
    "Trap",
    "TrapInfo",
    "FuncRef",
    "Arena",
    "ShadowState",
    "interpret",
    "instruction_cost_report",
    "overhead",
    "DISPATCH_COST",
    "RESERVED_BASE",
    "REDZONE",
]

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1
_U64 = 2**64

TRAP_KINDS = (
    "address_check",
    "overflow_check",
    "shift_check",
    "div_check",
    "oob_raw",
    "uaf_raw",
    "unreachable",
)

RESERVED_BASE = 64  # [0, RESERVED_BASE) always faults, gives 0 a null meaning
DISPATCH_COST = 1   # extra units per dispatch-table call
REDZONE = 16        # bytes on each side of a checked allocation

DEFAULT_ARENA = 1 << 20
DEFAULT_INSTR_LIMIT = 50_000_000
DEFAULT_FRAME_LIMIT = 256


def _wrap(v: int) -> int:
    return (v + 2**63) % _U64 - 2**63


@dataclass(frozen=True)
class FuncRef:
    """Opaque function reference produced by `addr`; lives in registers only."""

    name: str


class ExecError(PirError):
    """Execution cannot proceed at all (bad setup, unresolved extern)."""


class Trap(PirError):
    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind
        self.detail = message


@dataclass(frozen=True)
class TrapInfo:
    kind: str
    function: str
    block: str
    instr_index: int
    variant_kind: str
    detail: str = ""


@dataclass
class _Alloc:
    base: int
    size: int          # payload size as requested
    live: bool
    checked: bool      # allocated via the sanitized form (has redzones)
    outer_base: int    # base including left redzone
    outer_size: int    # size including both redzones


class Arena:
    """Flat byte-addressed heap shared by globals and dynamic allocations.

    Every allocation is registered here regardless of which variant made it,
    so a pointer handed from a sanitized allocator to an unsanitized user
    (or back) keeps meaning the same thing. Checked allocations additionally
    surround the payload with redzones and move to a quarantine on free.
    """

    def __init__(self, size: int = DEFAULT_ARENA):
        self.size = size
        self.mem = bytearray(size)
        self.brk = RESERVED_BASE
        self.allocs: list[_Alloc] = []   # sorted by outer_base
        self._bases: list[int] = []      # bisect index over outer_base
        self.globals: dict[str, int] = {}

    # -- allocation ----------------------------------------------------

    def alloc(self, size: int, checked: bool) -> int:
        if size < 0:
            raise Trap("unreachable", f"alloc of negative size {size}")
        rz = REDZONE if checked else 0
        outer = size + 2 * rz
        if self.brk + outer > self.size:
            raise Trap("unreachable", f"arena exhausted allocating {size} bytes")
        outer_base = self.brk
        self.brk += outer
        base = outer_base + rz
        a = _Alloc(base, size, True, checked, outer_base, outer)
        self.allocs.append(a)
        self._bases.append(outer_base)
        return base

    def add_global(self, name: str, size: int, init: bytes) -> int:
        base = self.alloc(size, checked=False)
        self.mem[base : base + len(init)] = init
        self.globals[name] = base
        return base

    def find(self, addr: int) -> _Alloc | None:
        """Allocation whose outer span contains addr, or None."""
        i = bisect.bisect_right(self._bases, addr) - 1
        if i < 0:
            return None
        a = self.allocs[i]
        if a.outer_base <= addr < a.outer_base + a.outer_size:
            return a
        return None

    def free(self, addr: int, checked: bool) -> None:
        a = self.find(addr)
        if checked:
            if a is None or addr != a.base:
                raise Trap("address_check", f"free of non-allocation address {addr}")
            if not a.live:
                raise Trap("address_check", f"double free at {addr}")
        else:
            # the raw allocator only faults when the pointer is wild
            if a is None:
                raise Trap("oob_raw", f"free of unmapped address {addr}")
            if not a.live:
                raise Trap("uaf_raw", f"free of already-freed address {addr}")
            if addr != a.base:
                raise Trap("oob_raw", f"free of interior pointer {addr}")
        a.live = False  # cells are never recycled; stale pointers stay dead

    # -- access checks --------------------------------------------------

    def check_range(self, addr: int, size: int) -> None:
        """Sanitizer predicate: [addr, addr+size) within one live payload."""
        a = self.find(addr)
        if a is None or not a.live:
            raise Trap("address_check", f"access to {addr} outside any live allocation")
        if addr < a.base or addr + size > a.base + a.size:
            raise Trap(
                "address_check",
                f"access [{addr},{addr + size}) escapes allocation "
                f"[{a.base},{a.base + a.size})",
            )

    def _raw_guard(self, addr: int, size: int) -> None:
        if addr < RESERVED_BASE or addr + size > self.brk:
            raise Trap("oob_raw", f"access [{addr},{addr + size}) outside mapped memory")
        a = self.find(addr)
        end_a = self.find(addr + size - 1)
        for hit in (a, end_a):
            if hit is not None and not hit.live:
                raise Trap("uaf_raw", f"access to freed allocation at {addr}")

    # -- shadow-state views (what the checked accesses consult) ----------

    @property
    def redzone_width(self) -> int:
        return REDZONE

    @property
    def live_allocations(self) -> dict[int, tuple[int, bool]]:
        return {a.base: (a.size, a.live) for a in self.allocs}

    @property
    def quarantine(self) -> tuple[int, ...]:
        """Bases of freed checked allocations; never reused within a run."""
        return tuple(a.base for a in self.allocs if a.checked and not a.live)

    # -- data ------------------------------------------------------------

    def load(self, addr: int, size: int) -> int:
        self._raw_guard(addr, size)
        raw = int.from_bytes(self.mem[addr : addr + size], "little")
        if size == 8:
            return _wrap(raw)
        return raw  # narrow loads zero-extend

    def store(self, addr: int, value: int, size: int) -> None:
        self._raw_guard(addr, size)
        self.mem[addr : addr + size] = (value % _U64).to_bytes(8, "little")[:size]


@dataclass
class ExecOptions:
    arena_size: int = DEFAULT_ARENA
    instr_limit: int = DEFAULT_INSTR_LIMIT
    frame_limit: int = DEFAULT_FRAME_LIMIT
    inputs: bytes = b""
    ub_recovery: bool = False        # warn-and-continue on UB checks
    trace_blocks: bool = False       # independent per-block counter (oracle)
    switch_every: int = 0            # call switch_hook every N instructions
    switch_hook: object = None
    dispatch_table: object = None    # VariantDispatchTable-like (slot -> name)


@dataclass
class ExecResult:
    status: str                      # "ok" | "trap"
    return_value: int | None
    output: bytes                    # 8 little-endian bytes per `out`
    instructions_executed: int       # total cost units (includes dispatch)
    instructions_by_class: dict[str, int]
    dispatched_calls: int
    call_counts: dict[str, int]
    coverage: dict[tuple[str, str], int]
    profile_counts: dict[str, int]
    profile_block_counts: dict[tuple[str, str], int]
    block_counts: dict[tuple[str, str], int]
    trap: TrapInfo | None = None
    ub_warnings: tuple[str, ...] = ()

    @property
    def trapped(self) -> bool:
        return self.status == "trap"

    @property
    def trap_kind(self) -> str | None:
        return self.trap.kind if self.trap else None

    def output_values(self) -> tuple[int, ...]:
        """Decode the output stream back into the i64s the program wrote."""
        return tuple(
            _wrap(int.from_bytes(self.output[i : i + 8], "little"))
            for i in range(0, len(self.output), 8)
        )


@dataclass
class _Frame:
    func: Function
    regs: dict
    block_idx: int
    instr_idx: int
    ret_reg: str | None     # where the caller wants the return value


def _as_int(v, where: str) -> int:
    if isinstance(v, FuncRef):
        raise Trap("unreachable", f"function reference used as integer in {where}")
    return v


def _check_overflow(op: str, a: int, b: int) -> bool:
    if op == "add":
        return not (INT64_MIN <= a + b <= INT64_MAX)
    if op == "sub":
        return not (INT64_MIN <= a - b <= INT64_MAX)
    if op == "mul":
        return not (INT64_MIN <= a * b <= INT64_MAX)
    raise Trap("unreachable", f"bad overflow op {op}")


def interpret(
    program: Program,
    inputs: bytes = b"",
    table=None,
    options: ExecOptions | None = None,
) -> ExecResult:
    """Run program from its entry function to completion, a trap, or a limit.

    The costing rule: one unit per interpreted instruction, plus
    DISPATCH_COST units per `icall` on top of the callee's own cost.
    Calling the entry point itself is free.
    """
    opts = options or ExecOptions()
    if inputs:
        opts = replace(opts, inputs=inputs)
    if table is not None:
        opts = replace(opts, dispatch_table=table)
    arena = Arena(opts.arena_size)
    for g in program.globals:
        arena.add_global(g.name, g.size, g.init)

    fmap = program.function_map()
    table = opts.dispatch_table
    if table is None and any(
        ins.opcode == "icall"
        for f in program.functions
        for b in f.blocks
        for ins in b.all_instructions()
    ):
        raise ExecError("program contains dispatch-table calls but no table was given")

    executed = 0
    by_class: dict[str, int] = {}
    dispatched = 0
    call_counts: dict[str, int] = {}
    coverage: dict[tuple[str, str], int] = {}
    profile_counts: dict[str, int] = {}
    profile_block_counts: dict[tuple[str, str], int] = {}
    block_counts: dict[tuple[str, str], int] = {}
    output = bytearray()
    ub_warnings: list[str] = []
    inputs = opts.inputs
    since_switch = 0

    def cost_class(ins: Instruction) -> str:
        if ins.is_check():
            return "check"
        if ins.opcode in ("alloc", "free") and ins.sanitized:
            return "sanitized_alloc"
        if ins.opcode in ("cov_hit", "prof_count"):
            return "instrumentation"
        return "plain"

    def resolve_entry(name: str) -> Function:
        """Entry dispatch is free: a trampoline entry runs its active variant."""
        f = fmap[name]
        if f.variant_kind == "trampoline" and table is not None:
            ins = f.blocks[0].all_instructions()[0]
            if ins.opcode == "icall":
                return fmap[table.active(ins.operands[0])]
        return f

    entry = resolve_entry(program.entry)
    stack: list[_Frame] = [_Frame(entry, {}, 0, 0, None)]
    call_counts[entry.name] = 1
    if opts.trace_blocks:
        block_counts[(entry.name, entry.blocks[0].label)] = 1

    def current_site() -> tuple[str, str, int, str]:
        fr = stack[-1]
        blk = fr.func.blocks[fr.block_idx]
        return fr.func.name, blk.label, max(fr.instr_idx - 1, 0), fr.func.variant_kind

    def make_trap(t: Trap) -> ExecResult:
        fn, blk, idx, vk = current_site()
        info = TrapInfo(t.kind, fn, blk, idx, vk, t.detail)
        return ExecResult(
            status="trap",
            return_value=None,
            output=bytes(output),
            instructions_executed=executed,
            instructions_by_class=dict(by_class),
            dispatched_calls=dispatched,
            call_counts=dict(call_counts),
            coverage=dict(coverage),
            profile_counts=dict(profile_counts),
            profile_block_counts=dict(profile_block_counts),
            block_counts=dict(block_counts),
            trap=info,
            ub_warnings=tuple(ub_warnings),
        )

    def val(fr: _Frame, op) -> int | FuncRef:
        if isinstance(op, int):
            return op
        try:
            return fr.regs[op]
        except KeyError:
            raise Trap("unreachable", f"register '{op}' has no value") from None

    ret_value: int | None = None

    try:
        while stack:
            fr = stack[-1]
            blk = fr.func.blocks[fr.block_idx]
            instrs = blk.all_instructions()
            if fr.instr_idx >= len(instrs):
                raise Trap("unreachable", "fell off end of block")
            ins = instrs[fr.instr_idx]
            fr.instr_idx += 1

            executed += 1
            cls = cost_class(ins)
            by_class[cls] = by_class.get(cls, 0) + 1
            if executed > opts.instr_limit:
                raise Trap("unreachable", f"instruction limit {opts.instr_limit} exceeded")

            if opts.switch_every and opts.switch_hook is not None:
                since_switch += 1
                if since_switch >= opts.switch_every:
                    since_switch = 0
                    opts.switch_hook()

            op = ins.opcode

            if op == "const":
                fr.regs[ins.result] = _wrap(ins.operands[0])
            elif op == "move":
                fr.regs[ins.result] = val(fr, ins.operands[0])
            elif op == "select":
                c = _as_int(val(fr, ins.operands[0]), "select")
                fr.regs[ins.result] = val(fr, ins.operands[1 if c != 0 else 2])
            elif op in ("add", "sub", "mul"):
                a = _as_int(val(fr, ins.operands[0]), op)
                b = _as_int(val(fr, ins.operands[1]), op)
                r = a + b if op == "add" else a - b if op == "sub" else a * b
                fr.regs[ins.result] = _wrap(r)  # raw arithmetic wraps silently
            elif op == "sdiv":
                a = _as_int(val(fr, ins.operands[0]), op)
                b = _as_int(val(fr, ins.operands[1]), op)
                if b == 0:
                    fr.regs[ins.result] = 0          # raw UB is total: defined fallback
                elif a == INT64_MIN and b == -1:
                    fr.regs[ins.result] = INT64_MIN
                else:
                    q = abs(a) // abs(b)
                    fr.regs[ins.result] = q if (a < 0) == (b < 0) else -q
            elif op in ("shl", "shr"):
                a = _as_int(val(fr, ins.operands[0]), op)
                b = _as_int(val(fr, ins.operands[1]), op) % 64  # raw shifts mask
                if op == "shl":
                    fr.regs[ins.result] = _wrap(a << b)
                else:
                    fr.regs[ins.result] = _wrap((a % _U64) >> b)
            elif op == "cmp":
                pred = ins.operands[0]
                a = _as_int(val(fr, ins.operands[1]), op)
                b = _as_int(val(fr, ins.operands[2]), op)
                r = {
                    "eq": a == b, "ne": a != b, "slt": a < b,
                    "sle": a <= b, "sgt": a > b, "sge": a >= b,
                }[pred]
                fr.regs[ins.result] = 1 if r else 0
            elif op == "alloc":
                size = _as_int(val(fr, ins.operands[0]), op)
                fr.regs[ins.result] = arena.alloc(size, checked=ins.sanitized)
            elif op == "free":
                addr = _as_int(val(fr, ins.operands[0]), op)
                arena.free(addr, checked=ins.sanitized)
            elif op == "load":
                addr = _as_int(val(fr, ins.operands[0]), op)
                fr.regs[ins.result] = arena.load(addr, ins.operands[1])
            elif op == "store":
                addr = _as_int(val(fr, ins.operands[0]), op)
                v = val(fr, ins.operands[1])
                if isinstance(v, FuncRef):
                    raise Trap("unreachable", "cannot store a function reference")
                arena.store(addr, v, ins.operands[2])
            elif op == "addr":
                fr.regs[ins.result] = FuncRef(ins.operands[0])
            elif op == "gaddr":
                base = arena.globals.get(ins.operands[0])
                if base is None:
                    raise Trap("unreachable", f"unknown global '{ins.operands[0]}'")
                fr.regs[ins.result] = base
            elif op in ("call", "icall", "callv"):
                if op == "call":
                    name = ins.operands[0]
                    args = ins.operands[1:]
                elif op == "icall":
                    if table is None:
                        raise Trap("unreachable", "icall without a dispatch table")
                    name = table.active(ins.operands[0])
                    args = ins.operands[1:]
                    dispatched += 1
                    executed += DISPATCH_COST
                    by_class["dispatch"] = by_class.get("dispatch", 0) + DISPATCH_COST
                else:
                    ref = val(fr, ins.operands[0])
                    if not isinstance(ref, FuncRef):
                        raise Trap("unreachable", "callv through a non-function value")
                    name = ref.name
                    args = ins.operands[1:]
                callee = fmap.get(name)
                if callee is None:
                    if name in program.externs:
                        raise ExecError(f"extern '{name}' has no definition to run")
                    raise Trap("unreachable", f"call to unknown function '{name}'")
                if len(args) != len(callee.params):
                    raise Trap(
                        "unreachable",
                        f"'{name}' takes {len(callee.params)} argument(s), got {len(args)}",
                    )
                if len(stack) >= opts.frame_limit:
                    raise Trap("unreachable", f"call depth limit {opts.frame_limit} exceeded")
                regs = {
                    pname: val(fr, a)
                    for (pname, _), a in zip(callee.params, args)
                }
                call_counts[name] = call_counts.get(name, 0) + 1
                if opts.trace_blocks:
                    key = (name, callee.blocks[0].label)
                    block_counts[key] = block_counts.get(key, 0) + 1
                stack.append(_Frame(callee, regs, 0, 0, ins.result))
            elif op == "check_addr":
                addr = _as_int(val(fr, ins.operands[0]), op)
                arena.check_range(addr, ins.operands[1])
            elif op == "check_overflow":
                kind = ins.operands[0]
                a = _as_int(val(fr, ins.operands[1]), op)
                b = _as_int(val(fr, ins.operands[2]), op)
                if _check_overflow(kind, a, b):
                    msg = f"{kind} of {a} and {b} overflows"
                    if opts.ub_recovery:
                        ub_warnings.append(msg)
                    else:
                        raise Trap("overflow_check", msg)
            elif op == "check_shift":
                amt = _as_int(val(fr, ins.operands[0]), op)
                if not 0 <= amt <= 63:
                    msg = f"shift amount {amt} out of [0, 63]"
                    if opts.ub_recovery:
                        ub_warnings.append(msg)
                    else:
                        raise Trap("shift_check", msg)
            elif op == "check_div":
                a = _as_int(val(fr, ins.operands[0]), op)
                b = _as_int(val(fr, ins.operands[1]), op)
                if b == 0:
                    msg = "division by zero"
                elif a == INT64_MIN and b == -1:
                    msg = "INT64_MIN / -1 overflows"
                else:
                    msg = None
                if msg:
                    if opts.ub_recovery:
                        ub_warnings.append(msg)
                    else:
                        raise Trap("div_check", msg)
            elif op == "cov_hit":
                key = (ins.operands[0], ins.operands[1])
                coverage[key] = coverage.get(key, 0) + 1
            elif op == "prof_count":
                if len(ins.operands) >= 2:
                    key = (ins.operands[0], ins.operands[1])
                    profile_block_counts[key] = profile_block_counts.get(key, 0) + 1
                else:
                    name = ins.operands[0]
                    profile_counts[name] = profile_counts.get(name, 0) + 1
            elif op == "in":
                idx = _as_int(val(fr, ins.operands[0]), op)
                fr.regs[ins.result] = inputs[idx] if 0 <= idx < len(inputs) else 0
            elif op == "inlen":
                fr.regs[ins.result] = len(inputs)
            elif op == "out":
                v = val(fr, ins.operands[0])
                if isinstance(v, FuncRef):
                    raise Trap("unreachable", "cannot output a function reference")
                output += (v % _U64).to_bytes(8, "little")
            elif op == "branch":
                fr.block_idx = _block_index(fr.func, ins.operands[0])
                fr.instr_idx = 0
                if opts.trace_blocks:
                    key = (fr.func.name, ins.operands[0])
                    block_counts[key] = block_counts.get(key, 0) + 1
            elif op == "cbranch":
                c = _as_int(val(fr, ins.operands[0]), op)
                lbl = ins.operands[1] if c != 0 else ins.operands[2]
                fr.block_idx = _block_index(fr.func, lbl)
                fr.instr_idx = 0
                if opts.trace_blocks:
                    key = (fr.func.name, lbl)
                    block_counts[key] = block_counts.get(key, 0) + 1
            elif op == "return":
                rv = val(fr, ins.operands[0]) if ins.operands else None
                stack.pop()
                if stack:
                    if fr.ret_reg is not None:
                        if rv is None:
                            raise Trap(
                                "unreachable",
                                f"'{fr.func.name}' returned nothing into a register",
                            )
                        stack[-1].regs[fr.ret_reg] = rv
                else:
                    if isinstance(rv, FuncRef):
                        raise Trap("unreachable", "entry returned a function reference")
                    ret_value = rv
            else:
                raise Trap("unreachable", f"opcode '{op}' not implemented")
    except Trap as t:
        return make_trap(t)

    return ExecResult(
        status="ok",
        return_value=ret_value,
        output=bytes(output),
        instructions_executed=executed,
        instructions_by_class=dict(by_class),
        dispatched_calls=dispatched,
        call_counts=dict(call_counts),
        coverage=dict(coverage),
        profile_counts=dict(profile_counts),
        profile_block_counts=dict(profile_block_counts),
        block_counts=dict(block_counts),
        ub_warnings=tuple(ub_warnings),
    )


def _block_index(f: Function, label: str) -> int:
    for i, b in enumerate(f.blocks):
        if b.label == label:
            return i
    raise Trap("unreachable", f"branch to unknown block '{label}'")


# The arena doubles as the sanitizer's shadow state: live allocation map,
# redzone width, and quarantine are exposed as read-only views on it.
ShadowState = Arena


def instruction_cost_report(result: ExecResult) -> dict:
    """Total and per-class instruction counts for one run."""
    by_class = dict(result.instructions_by_class)
    return {
        "total": result.instructions_executed,
        "by_class": by_class,
        "dispatched_calls": result.dispatched_calls,
    }


def overhead(a: ExecResult, b: ExecResult):
    """Relative extra cost of run `a` over baseline `b`, computed exactly."""
    from fractions import Fraction

    if b.instructions_executed == 0:
        raise ValueError("baseline executed no instructions")
    return Fraction(a.instructions_executed, b.instructions_executed) - 1
