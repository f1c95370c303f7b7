"""Execution-count profiles and the static per-opcode cost model.

Profiles come from a `prof_count`-instrumented build: one counter at each
function entry, one per basic block. They persist as JSON and merge by
summing counts, so workload shards can be profiled independently.

The cost model assigns each opcode class a small integer weight; variant
cost estimates are plain sums over the body. The weights make the
expected-cost policy arithmetic exactly reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .interp import ExecResult
from .pir import BasicBlock, Function, Instruction, PirError, Program

__all__ = [
    "Profile",
    "CostModel",
    "ProfileError",
    "DEFAULT_COST_MODEL",
    "instrument_profile",
    "profile_from_result",
    "merge_profiles",
    "write_profile",
    "read_profile",
    "profile_to_json",
    "profile_from_json",
    "estimate_cost",
]

PROFILE_SCHEMA = "varsan-profile"
PROFILE_VERSION = 1


class ProfileError(PirError):
    pass


@dataclass(frozen=True)
class Profile:
    """Per-function execution counts and per-block hit counts."""

    functions: dict[str, int] = field(default_factory=dict)
    blocks: dict[str, dict[str, int]] = field(default_factory=dict)
    workload: str = ""

    def count(self, name: str) -> int:
        return self.functions.get(name, 0)

    def validate(self) -> None:
        for name, n in self.functions.items():
            if n < 0:
                raise ProfileError(f"negative count for '{name}'")
        for fn, blks in self.blocks.items():
            if any(n < 0 for n in blks.values()):
                raise ProfileError(f"negative block count in '{fn}'")
            if self.functions.get(fn, 0) == 0 and any(blks.values()):
                raise ProfileError(
                    f"'{fn}' has block hits but exec_count 0"
                )


def instrument_profile(program: Program) -> Program:
    """Add prof_count at every function entry and every block entry."""
    for f in program.functions:
        for b in f.blocks:
            if any(ins.opcode == "prof_count" for ins in b.instructions):
                raise ProfileError(f"'{f.name}' is already profile-instrumented")

    out = []
    for f in program.functions:
        blocks = []
        for i, b in enumerate(f.blocks):
            pre = [Instruction("prof_count", (f.name, b.label))]
            if i == 0:
                pre.insert(0, Instruction("prof_count", (f.name,)))
            blocks.append(BasicBlock(b.label, tuple(pre) + b.instructions, b.terminator))
        out.append(replace(f, blocks=tuple(blocks)))
    return program.with_functions(out)


def profile_from_result(result: ExecResult, workload: str = "") -> Profile:
    functions = dict(result.profile_counts)
    blocks: dict[str, dict[str, int]] = {}
    for (fn, label), n in result.profile_block_counts.items():
        blocks.setdefault(fn, {})[label] = n
    p = Profile(functions, blocks, workload)
    p.validate()
    return p


def merge_profiles(a: Profile, b: Profile) -> Profile:
    functions = dict(a.functions)
    for k, v in b.functions.items():
        functions[k] = functions.get(k, 0) + v
    blocks = {fn: dict(blks) for fn, blks in a.blocks.items()}
    for fn, blks in b.blocks.items():
        dst = blocks.setdefault(fn, {})
        for label, v in blks.items():
            dst[label] = dst.get(label, 0) + v
    parts = sorted({w for w in (a.workload, b.workload) if w})
    return Profile(functions, blocks, "+".join(parts))


def profile_to_json(profile: Profile) -> str:
    doc = {
        "schema": PROFILE_SCHEMA,
        "version": PROFILE_VERSION,
        "workload": profile.workload,
        "functions": profile.functions,
        "blocks": profile.blocks,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def profile_from_json(text: str, source: str = "<string>") -> Profile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProfileError(f"{source}: malformed JSON at line {e.lineno}, col {e.colno}") from e
    if not isinstance(doc, dict) or doc.get("schema") != PROFILE_SCHEMA:
        raise ProfileError(f"{source}: not a profile document")
    if doc.get("version") != PROFILE_VERSION:
        raise ProfileError(f"{source}: unsupported profile version {doc.get('version')!r}")
    p = Profile(
        functions={str(k): int(v) for k, v in doc.get("functions", {}).items()},
        blocks={
            str(fn): {str(l): int(v) for l, v in blks.items()}
            for fn, blks in doc.get("blocks", {}).items()
        },
        workload=str(doc.get("workload", "")),
    )
    p.validate()
    return p


def write_profile(profile: Profile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(profile_to_json(profile))


def read_profile(path) -> Profile:
    with open(path, encoding="utf-8") as fh:
        return profile_from_json(fh.read(), source=str(path))


# ---------------------------------------------------------------------------
# Static cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Per-opcode-class weights, in cost units.

    plain: any ordinary opcode. check_addr: an address check.
    check_ub: an overflow/shift/div check. alloc_bookkeeping: a checked
    alloc or free (redzone + quarantine upkeep).
    """

    plain: int = 1
    check_addr: int = 3
    check_ub: int = 1
    alloc_bookkeeping: int = 5

    def __post_init__(self):
        if self.plain < 1 or self.alloc_bookkeeping < 1:
            raise ProfileError("executable opcode weights must be >= 1")
        if self.check_addr <= 0 or self.check_ub <= 0:
            raise ProfileError("check weights must be positive")

    def weight(self, ins: Instruction) -> int:
        if ins.opcode == "check_addr":
            return self.check_addr
        if ins.opcode in ("check_overflow", "check_shift", "check_div"):
            return self.check_ub
        if ins.opcode in ("alloc", "free") and ins.sanitized:
            return self.alloc_bookkeeping
        return self.plain


DEFAULT_COST_MODEL = CostModel()


def estimate_cost(f: Function, model: CostModel = DEFAULT_COST_MODEL) -> int:
    """Static cost of one variant body: sum of weights, blocks unweighted."""
    return sum(
        model.weight(ins) for b in f.blocks for ins in b.all_instructions()
    )
