"""IR-to-IR passes that insert or remove sanitizer checks.

Address checks guard every load/store with `check_addr` and switch
allocations to the checked forms (`alloc.s`/`free.s`): redzones around the
payload, quarantine on free. UB checks guard arithmetic: `check_overflow`
before add/sub/mul, `check_shift` before shifts, `check_div` before sdiv.

Checks are independent: stripping one class leaves the others functional,
so a variant can carry any subset.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .pir import (
    BasicBlock,
    Function,
    Instruction,
    PirError,
)

__all__ = [
    "CheckConfig",
    "SanitizeError",
    "apply_address_checks",
    "apply_ub_checks",
    "apply_checks",
    "strip_checks",
    "is_address_instrumented",
    "is_ub_instrumented",
]


class SanitizeError(PirError):
    pass


@dataclass(frozen=True)
class CheckConfig:
    """Which check classes a sanitized variant carries."""

    enable_address: bool = True
    enable_ub: bool = False
    ub_recovery: bool = False  # off: any UB check aborts the run

    def __post_init__(self):
        if not (self.enable_address or self.enable_ub):
            raise SanitizeError("at least one sanitizer must be enabled")

    @property
    def names(self) -> frozenset[str]:
        s = set()
        if self.enable_address:
            s.add("address")
        if self.enable_ub:
            s.add("ub")
        return frozenset(s)


def is_address_instrumented(f: Function) -> bool:
    return any(
        ins.opcode == "check_addr" or (ins.opcode in ("alloc", "free") and ins.sanitized)
        for b in f.blocks
        for ins in b.all_instructions()
    )


def is_ub_instrumented(f: Function) -> bool:
    return any(
        ins.opcode in ("check_overflow", "check_shift", "check_div")
        for b in f.blocks
        for ins in b.all_instructions()
    )


def _rewrite_blocks(f: Function, expand) -> Function:
    blocks = []
    for b in f.blocks:
        out: list[Instruction] = []
        for ins in b.instructions:
            out.extend(expand(ins))
        blocks.append(BasicBlock(b.label, tuple(out), b.terminator))
    return replace(f, blocks=tuple(blocks))


def apply_address_checks(f: Function) -> Function:
    """Guard every memory access; switch allocations to the checked forms."""
    if f.variant_kind not in ("sanitized", "coverage"):
        raise SanitizeError(
            f"address checks require a sanitized/coverage body, "
            f"'{f.name}' is {f.variant_kind}"
        )
    if is_address_instrumented(f):
        raise SanitizeError(f"'{f.name}' already carries address checks")

    def expand(ins: Instruction):
        if ins.opcode == "load":
            yield Instruction("check_addr", (ins.operands[0], ins.operands[1]))
            yield ins
        elif ins.opcode == "store":
            yield Instruction("check_addr", (ins.operands[0], ins.operands[2]))
            yield ins
        elif ins.opcode in ("alloc", "free"):
            yield replace(ins, sanitized=True)
        else:
            yield ins

    return _rewrite_blocks(f, expand)


def apply_ub_checks(f: Function) -> Function:
    """Guard arithmetic whose raw semantics silently wrap, mask, or clamp."""
    if f.variant_kind not in ("sanitized", "coverage"):
        raise SanitizeError(
            f"UB checks require a sanitized/coverage body, "
            f"'{f.name}' is {f.variant_kind}"
        )
    if is_ub_instrumented(f):
        raise SanitizeError(f"'{f.name}' already carries UB checks")

    def expand(ins: Instruction):
        if ins.opcode in ("add", "sub", "mul"):
            yield Instruction("check_overflow", (ins.opcode, ins.operands[0], ins.operands[1]))
        elif ins.opcode in ("shl", "shr"):
            yield Instruction("check_shift", (ins.operands[1],))
        elif ins.opcode == "sdiv":
            yield Instruction("check_div", (ins.operands[0], ins.operands[1]))
        yield ins

    return _rewrite_blocks(f, expand)


def apply_checks(f: Function, config: CheckConfig) -> Function:
    if config.enable_address:
        f = apply_address_checks(f)
    if config.enable_ub:
        f = apply_ub_checks(f)
    return f


def strip_checks(
    f: Function, strip_address: bool = True, strip_ub: bool = True
) -> Function:
    """Remove check instructions and sanitizer bookkeeping.

    Inverse of the apply passes: strip(apply(f)) equals f structurally.
    A partial strip (one class) leaves the other class intact.
    """

    def expand(ins: Instruction):
        if strip_address and ins.opcode == "check_addr":
            return
        if strip_ub and ins.opcode in ("check_overflow", "check_shift", "check_div"):
            return
        if strip_address and ins.opcode in ("alloc", "free") and ins.sanitized:
            yield replace(ins, sanitized=False)
            return
        yield ins

    return _rewrite_blocks(f, expand)
