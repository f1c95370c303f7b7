"""Variant pipeline: plan, clone, route calls through a dispatch table.

The build turns each eligible function into several bodies (sanitized,
unsanitized, coverage-instrumented, fast), gives the dispatch table one
slot per multi-variant function, rewrites direct calls into slot dispatch,
and leaves a trampoline under the original name only where the address can
escape (address-taken or externally visible functions).

Plan rules. A function is hot iff its profile count reaches hot_threshold.
Cold functions get only a sanitized body: their checks are nearly free and
bugs there are then always caught. Hot functions get sanitized plus
unsanitized bodies, except that a function with no memory accesses needs no
address checks, so under an address-only build it stays as-is. With UB
checks enabled every hot function gets variants, memory or not. The fuzz
build swaps the pair for the three-tier set {coverage, sanitized, fast}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .pir import (
    BasicBlock,
    Function,
    Instruction,
    PirError,
    Program,
    validate_program,
)
from .profiling import CostModel, DEFAULT_COST_MODEL, Profile, estimate_cost
from .sanitize import CheckConfig, apply_checks

__all__ = [
    "VariantPlan",
    "PlanEntry",
    "VariantDispatchTable",
    "FunctionDescriptor",
    "VariantError",
    "select_variant_plan",
    "clone_variants",
    "build_indirection",
    "emit_metadata",
    "instrument_coverage",
    "metadata_to_json",
    "metadata_from_json",
    "write_metadata",
    "read_metadata",
    "variant_names",
    "build_program",
    "BuildResult",
]

METADATA_SCHEMA = "varsan-metadata"
METADATA_VERSION = 1

# clone naming is positional in this fixed kind order
KIND_ORDER = ("unsanitized", "coverage", "sanitized", "fast")


class VariantError(PirError):
    pass


@dataclass(frozen=True)
class PlanEntry:
    kinds: tuple[str, ...]  # subset of KIND_ORDER, in KIND_ORDER order
    hot: bool

    @property
    def multi(self) -> bool:
        return len(self.kinds) >= 2


@dataclass(frozen=True)
class VariantPlan:
    entries: dict[str, PlanEntry]  # insertion order = program function order
    sanitizers: frozenset[str]     # {"address"}, {"ub"}, both, or empty
    fuzz: bool = False

    def entry(self, name: str) -> PlanEntry:
        return self.entries[name]

    def multi_functions(self) -> list[str]:
        return [n for n, e in self.entries.items() if e.multi]


def _ordered(kinds: set[str]) -> tuple[str, ...]:
    return tuple(k for k in KIND_ORDER if k in kinds)


def select_variant_plan(
    program: Program,
    profile: Profile | None,
    sanitizers: frozenset[str] | set[str] = frozenset({"address"}),
    hot_threshold: int = 1,
    fuzz: bool = False,
) -> VariantPlan:
    """Decide which variant kinds each function gets.

    A missing profile entry counts as 0. With no profile at all the fuzz
    build treats every function as hot (there is nothing to be cold
    against); the normal build requires cold/hot evidence from somewhere,
    so no profile means every function is cold except when sanitizers are
    empty (a partition-only build, which needs no profile).
    """
    sanitizers = frozenset(sanitizers)
    address_only = sanitizers == {"address"}
    entries: dict[str, PlanEntry] = {}

    for f in program.functions:
        if not sanitizers:
            # partition-only build: two check-free bodies for every function
            entries[f.name] = PlanEntry(("unsanitized", "fast"), True)
            continue

        if profile is None:
            hot = True if fuzz else False
        else:
            hot = profile.count(f.name) >= hot_threshold
        no_mem = "no_memory_access" in f.attributes

        if fuzz:
            if no_mem and address_only:
                kinds = {"coverage", "fast"}
            elif not hot:
                kinds = {"sanitized"}
            else:
                kinds = {"coverage", "sanitized", "fast"}
        else:
            if no_mem and address_only:
                kinds = {"unsanitized"}
            elif not hot:
                kinds = {"sanitized"}
            else:
                kinds = {"sanitized", "unsanitized"}
        entries[f.name] = PlanEntry(_ordered(kinds), hot)

    return VariantPlan(entries, sanitizers, fuzz)


def variant_names(fname: str, entry: PlanEntry) -> dict[str, str]:
    """kind -> body name under this plan entry."""
    if not entry.multi:
        return {entry.kinds[0]: fname}
    return {kind: f"{fname}_{i}" for i, kind in enumerate(entry.kinds)}


def instrument_coverage(f: Function, source_name: str) -> Function:
    """Add a cov_hit at the top of every block, keyed by the source
    function's name so coverage stays comparable across its variants."""
    blocks = []
    for b in f.blocks:
        hit = Instruction("cov_hit", (source_name, b.label))
        blocks.append(BasicBlock(b.label, (hit,) + b.instructions, b.terminator))
    return replace(f, blocks=tuple(blocks))


def _make_body(
    f: Function, kind: str, name: str, checks: CheckConfig | None
) -> Function:
    body = replace(f, name=name, variant_kind=kind)
    if kind in ("unsanitized", "fast"):
        return body
    if kind == "coverage":
        return instrument_coverage(body, f.name)
    if kind == "sanitized":
        if checks is None:
            raise VariantError(
                f"plan gives '{f.name}' a sanitized variant but no check config"
            )
        return apply_checks(body, checks)
    raise VariantError(f"unknown variant kind '{kind}'")


def clone_variants(
    program: Program, plan: VariantPlan, checks: CheckConfig | None
) -> Program:
    """Materialize every planned body; multi-variant originals are replaced
    by their numbered clones (the caller adds trampolines where needed)."""
    existing = {f.name for f in program.functions}
    out: list[Function] = []
    for f in program.functions:
        entry = plan.entry(f.name)
        names = variant_names(f.name, entry)
        if not entry.multi:
            kind = entry.kinds[0]
            if kind == "sanitized":
                out.append(_make_body(f, "sanitized", f.name, checks))
            else:
                out.append(f)  # check-free single body stays as written
            continue
        for kind in entry.kinds:
            name = names[kind]
            if name in existing:
                raise VariantError(
                    f"variant name '{name}' collides with an existing function"
                )
            existing.add(name)
            out.append(_make_body(f, kind, name, checks))
    return program.with_functions(out)


# ---------------------------------------------------------------------------
# Dispatch table and indirection
# ---------------------------------------------------------------------------


class VariantDispatchTable:
    """One slot per multi-variant function, holding the active body name.

    Slot reads and writes are single list-item operations, atomic under
    the interpreter lock, so a dispatching reader always sees some valid
    variant. There is deliberately no locking on this path.
    """

    def __init__(self, functions: list[str], variants: list[dict[str, str]],
                 initial: list[str]):
        self.functions = list(functions)          # slot -> source function
        self.variants = [dict(v) for v in variants]  # slot -> kind -> name
        self._valid = [frozenset(v.values()) for v in variants]
        self._active = list(initial)
        for i, name in enumerate(initial):
            if name not in self._valid[i]:
                raise VariantError(f"initial variant '{name}' not valid for slot {i}")

    def __len__(self) -> int:
        return len(self._active)

    def active(self, slot: int) -> str:
        return self._active[slot]

    def activate(self, slot: int, name: str) -> bool:
        """Write the slot; returns True when the value actually changed."""
        if name not in self._valid[slot]:
            raise VariantError(
                f"'{name}' is not a variant of '{self.functions[slot]}'"
            )
        if self._active[slot] == name:
            return False
        self._active[slot] = name
        return True

    def name_for(self, slot: int, kind: str) -> str | None:
        return self.variants[slot].get(kind)

    def slot_of(self, function: str) -> int:
        return self.functions.index(function)

    def snapshot(self) -> tuple[str, ...]:
        return tuple(self._active)

    def force_kind(self, kind_preference: list[str]) -> None:
        """Activate, in every slot, the first available kind from the list."""
        for i, v in enumerate(self.variants):
            for kind in kind_preference:
                if kind in v:
                    self.activate(i, v[kind])
                    break


def _returns_value(f: Function) -> bool:
    return any(
        b.terminator.opcode == "return" and b.terminator.operands
        for b in f.blocks
    )


def _make_trampoline(
    name: str, slot: int, model: Function, attrs: frozenset[str]
) -> Function:
    args = tuple(p for p, _ in model.params)
    if _returns_value(model):
        body = (Instruction("icall", (slot,) + args, result="rv"),)
        term = Instruction("return", ("rv",))
    else:
        body = (Instruction("icall", (slot,) + args),)
        term = Instruction("return", ())
    return Function(
        name=name,
        params=model.params,
        blocks=(BasicBlock("t0", body, term),),
        # a trampoline body never touches memory itself
        attributes=attrs | {"no_memory_access"},
        variant_kind="trampoline",
    )


def build_indirection(
    program: Program, plan: VariantPlan
) -> tuple[Program, VariantDispatchTable, list[str]]:
    """Rewrite calls to multi-variant functions into slot dispatch.

    Returns the rewritten program, the table (slots initially on the
    sanitized body when one exists, else the first planned kind), and the
    names of the trampolines that survived.
    """
    multi = plan.multi_functions()
    slot_of = {name: i for i, name in enumerate(multi)}
    names_of = {name: variant_names(name, plan.entry(name)) for name in multi}

    def rewrite(ins: Instruction) -> Instruction:
        if ins.opcode == "call" and ins.operands[0] in slot_of:
            target = ins.operands[0]
            return replace(
                ins,
                opcode="icall",
                operands=(slot_of[target],) + ins.operands[1:],
            )
        return ins

    out: list[Function] = []
    fmap = program.function_map()
    for f in program.functions:
        blocks = [
            BasicBlock(
                b.label,
                tuple(rewrite(i) for i in b.instructions),
                rewrite(b.terminator),
            )
            for b in f.blocks
        ]
        out.append(replace(f, blocks=tuple(blocks)))

    trampolines: list[str] = []
    for name in multi:
        entry = plan.entry(name)
        first_clone = fmap[names_of[name][entry.kinds[0]]]
        attrs = first_clone.attributes
        needs = "address_taken" in attrs or "external_visible" in attrs
        if needs:
            out.append(
                _make_trampoline(name, slot_of[name], first_clone, attrs)
            )
            trampolines.append(name)

    variants = [names_of[n] for n in multi]
    initial = [
        v.get("sanitized") or v[plan.entry(n).kinds[0]]
        for n, v in zip(multi, variants)
    ]
    table = VariantDispatchTable(multi, variants, initial)

    built = program.with_functions(out)
    validate_program(built)
    return built, table, trampolines


# ---------------------------------------------------------------------------
# Metadata
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FunctionDescriptor:
    """Read-only record connecting one table slot to its variants."""

    function: str
    slot: int
    variants: tuple[tuple[str, str, int], ...]  # (kind, name, static cost)
    exec_count: int
    activation_probability: float | None = None

    def cost_of(self, kind: str) -> int:
        for k, _, c in self.variants:
            if k == kind:
                return c
        raise KeyError(kind)

    def name_of(self, kind: str) -> str:
        for k, n, _ in self.variants:
            if k == kind:
                return n
        raise KeyError(kind)

    def kinds(self) -> tuple[str, ...]:
        return tuple(k for k, _, _ in self.variants)

    def cost_sanitized(self) -> int:
        return self.cost_of("sanitized")

    def cost_unsanitized(self) -> int:
        """Cost of the cheapest check-free body (the dispatch baseline)."""
        free = [c for k, _, c in self.variants if k in ("unsanitized", "fast")]
        if not free:
            raise VariantError(
                f"'{self.function}' has no check-free variant to use as baseline"
            )
        return min(free)

    def validate(self) -> None:
        if any(c < 0 for _, _, c in self.variants):
            raise VariantError(f"negative cost in descriptor '{self.function}'")
        kinds = dict((k, c) for k, _, c in self.variants)
        if "sanitized" in kinds and "unsanitized" in kinds:
            if kinds["sanitized"] < kinds["unsanitized"]:
                raise VariantError(
                    f"'{self.function}': sanitized cost below unsanitized"
                )
        if self.exec_count < 0:
            raise VariantError(f"negative exec_count for '{self.function}'")


def emit_metadata(
    program: Program,
    plan: VariantPlan,
    profile: Profile | None,
    cost_model: CostModel = DEFAULT_COST_MODEL,
) -> list[FunctionDescriptor]:
    """One descriptor per multi-variant function, in slot order."""
    fmap = program.function_map()
    descriptors = []
    for slot, name in enumerate(plan.multi_functions()):
        entry = plan.entry(name)
        names = variant_names(name, entry)
        variants = tuple(
            (kind, names[kind], estimate_cost(fmap[names[kind]], cost_model))
            for kind in entry.kinds
        )
        d = FunctionDescriptor(
            function=name,
            slot=slot,
            variants=variants,
            exec_count=profile.count(name) if profile else 0,
        )
        d.validate()
        descriptors.append(d)
    return descriptors


def metadata_to_json(
    descriptors: list[FunctionDescriptor], trampolines: list[str] | None = None
) -> str:
    doc = {
        "schema": METADATA_SCHEMA,
        "version": METADATA_VERSION,
        "trampolines": sorted(trampolines or []),
        "table": [
            {
                "slot": d.slot,
                "function": d.function,
                "variants": [
                    {"kind": k, "name": n, "cost": c} for k, n, c in d.variants
                ],
                "exec_count": d.exec_count,
                "activation_probability": d.activation_probability,
            }
            for d in descriptors
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def metadata_from_json(
    text: str, source: str = "<string>"
) -> tuple[list[FunctionDescriptor], list[str]]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise VariantError(
            f"{source}: malformed JSON at line {e.lineno}, col {e.colno}"
        ) from e
    if not isinstance(doc, dict) or doc.get("schema") != METADATA_SCHEMA:
        raise VariantError(f"{source}: not a metadata document")
    if doc.get("version") != METADATA_VERSION:
        raise VariantError(
            f"{source}: unsupported metadata version {doc.get('version')!r}"
        )
    descriptors = []
    for row in doc.get("table", []):
        d = FunctionDescriptor(
            function=str(row["function"]),
            slot=int(row["slot"]),
            variants=tuple(
                (str(v["kind"]), str(v["name"]), int(v["cost"]))
                for v in row["variants"]
            ),
            exec_count=int(row["exec_count"]),
            activation_probability=row.get("activation_probability"),
        )
        d.validate()
        descriptors.append(d)
    descriptors.sort(key=lambda d: d.slot)
    if [d.slot for d in descriptors] != list(range(len(descriptors))):
        raise VariantError(f"{source}: slot indices are not 0..n-1")
    return descriptors, [str(t) for t in doc.get("trampolines", [])]


def write_metadata(descriptors, trampolines, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(metadata_to_json(descriptors, trampolines))


def read_metadata(path) -> tuple[list[FunctionDescriptor], list[str]]:
    with open(path, encoding="utf-8") as fh:
        return metadata_from_json(fh.read(), source=str(path))


def table_from_descriptors(
    descriptors: list[FunctionDescriptor],
) -> VariantDispatchTable:
    """Rebuild a dispatch table from persisted metadata."""
    functions = [d.function for d in descriptors]
    variants = [{k: n for k, n, _ in d.variants} for d in descriptors]
    initial = [
        v.get("sanitized") or next(iter(v.values())) for v in variants
    ]
    return VariantDispatchTable(functions, variants, initial)


__all__.append("table_from_descriptors")


@dataclass
class BuildResult:
    program: Program
    plan: VariantPlan
    table: VariantDispatchTable
    descriptors: list[FunctionDescriptor]
    trampolines: list[str]


def build_program(
    source: Program,
    profile: Profile | None = None,
    sanitizers=frozenset({"address"}),
    hot_threshold: int = 1,
    fuzz: bool = False,
    checks: CheckConfig | None = None,
    cost_model: CostModel = DEFAULT_COST_MODEL,
) -> BuildResult:
    """The whole pipeline: plan, clone, indirection, metadata."""
    sanitizers = frozenset(sanitizers)
    if checks is None and sanitizers:
        checks = CheckConfig(
            enable_address="address" in sanitizers,
            enable_ub="ub" in sanitizers,
        )
    plan = select_variant_plan(source, profile, sanitizers, hot_threshold, fuzz)
    cloned = clone_variants(source, plan, checks)
    built, table, trampolines = build_indirection(cloned, plan)
    descriptors = emit_metadata(built, plan, profile, cost_model)
    return BuildResult(built, plan, table, descriptors, trampolines)


def build_fuzz_baseline(
    source: Program, sanitizers=frozenset({"address"})
) -> Program:
    """Reference build for throughput comparisons: one body per function,
    carrying coverage instrumentation and checks unconditionally, with no
    dispatch anywhere."""
    sanitizers = frozenset(sanitizers)
    if not sanitizers:
        raise VariantError("a baseline build needs at least one sanitizer")
    checks = CheckConfig(
        enable_address="address" in sanitizers,
        enable_ub="ub" in sanitizers,
    )
    bodies = []
    for f in source.functions:
        body = replace(f, variant_kind="sanitized")
        body = instrument_coverage(body, f.name)
        bodies.append(apply_checks(body, checks))
    return source.with_functions(bodies)
