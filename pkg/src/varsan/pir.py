"""PIR: a small line-oriented intermediate representation.

A program is a list of functions made of basic blocks, plus byte-array
globals and an entry point. Values are 64-bit two's-complement integers;
pointers are offsets into the interpreter's flat arena; `addr` produces an
opaque function reference usable only by `callv`.

The textual format is one instruction per line (`;` also separates
statements so whole programs fit on one line), `#` starts a comment:

    entry main
    global table 16
    extern putc
    func main() {
      b0:
        r0 = const 2
        r1 = const 3
        r2 = add r0 r1
        out r2
        return r2
    }

See docs/pir-format.md for the full grammar. `parse_program` and
`serialize_program` are the normative pair: serialize(parse(text)) reparses
to a structurally equal Program.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

__all__ = [
    "Program",
    "Function",
    "BasicBlock",
    "Instruction",
    "GlobalDef",
    "PirError",
    "PirSyntaxError",
    "PirValidationError",
    "VARIANT_KINDS",
    "FUNCTION_ATTRS",
    "parse_program",
    "serialize_program",
    "validate_program",
    "has_memory_ops",
]

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

VARIANT_KINDS = ("original", "sanitized", "unsanitized", "coverage", "fast", "trampoline")
FUNCTION_ATTRS = ("address_taken", "external_visible", "no_memory_access", "cold")

CMP_PREDICATES = ("eq", "ne", "slt", "sle", "sgt", "sge")
MEM_SIZES = (1, 2, 4, 8)

# opcode -> operand schema. 'v' = register-or-immediate, 'r' = register,
# 's' = symbol (function/block name), 'i' = integer immediate, '*v' = varargs.
# Schemas are what the parser and serializer agree on.
_OPCODE_SCHEMAS = {
    "const": ("i",),
    "move": ("v",),
    "select": ("v", "v", "v"),
    "add": ("v", "v"),
    "sub": ("v", "v"),
    "mul": ("v", "v"),
    "sdiv": ("v", "v"),
    "shl": ("v", "v"),
    "shr": ("v", "v"),
    "cmp": ("s", "v", "v"),
    "alloc": ("v",),
    "free": ("v",),
    "load": ("v", "i"),
    "store": ("v", "v", "i"),
    "call": ("s", "*v"),
    "icall": ("i", "*v"),
    "callv": ("v", "*v"),
    "addr": ("s",),
    "gaddr": ("s",),
    "check_addr": ("v", "i"),
    "check_overflow": ("s", "v", "v"),
    "check_shift": ("v",),
    "check_div": ("v", "v"),
    "cov_hit": ("s", "s"),
    "prof_count": ("s", "*s"),
    "in": ("v",),
    "inlen": (),
    "out": ("v",),
    "branch": ("s",),
    "cbranch": ("v", "s", "s"),
    "return": ("*v",),
}

# opcodes that produce a result register
_HAS_RESULT = {
    "const", "move", "select", "add", "sub", "mul", "sdiv", "shl", "shr",
    "cmp", "alloc", "load", "in", "inlen", "addr", "gaddr",
}
# result optional (value may be discarded)
_OPTIONAL_RESULT = {"call", "icall", "callv"}
TERMINATORS = ("branch", "cbranch", "return")

CHECK_OPCODES = ("check_addr", "check_overflow", "check_shift", "check_div")
MEMORY_OPCODES = ("load", "store", "alloc", "free")

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_INT_RE = re.compile(r"-?(0x[0-9a-fA-F]+|\d+)\Z")


class PirError(Exception):
    """Base class for PIR parse/validation failures."""


class PirSyntaxError(PirError):
    def __init__(self, message: str, line: int, col: int = 0):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class PirValidationError(PirError):
    def __init__(self, message: str, function: str | None = None):
        ctx = f"in function '{function}': " if function else ""
        super().__init__(ctx + message)
        self.function = function


@dataclass(frozen=True)
class Instruction:
    """One PIR instruction: optional result register, opcode, operands.

    Operands are ints (immediates) or strings (register/symbol names) laid
    out per the opcode schema. `sanitized` marks alloc/free instructions
    rewritten by the address-check pass (serialized as `alloc.s`/`free.s`).
    """

    opcode: str
    operands: tuple = ()
    result: str | None = None
    sanitized: bool = False

    def is_terminator(self) -> bool:
        return self.opcode in TERMINATORS

    def is_check(self) -> bool:
        return self.opcode in CHECK_OPCODES

    def is_memory_op(self) -> bool:
        return self.opcode in MEMORY_OPCODES


@dataclass(frozen=True)
class BasicBlock:
    label: str
    instructions: tuple[Instruction, ...]
    terminator: Instruction

    def all_instructions(self) -> tuple[Instruction, ...]:
        return self.instructions + (self.terminator,)


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[tuple[str, str], ...]  # (name, "i64" | "ptr")
    blocks: tuple[BasicBlock, ...]
    attributes: frozenset[str] = frozenset()
    variant_kind: str = "original"

    @property
    def entry_block(self) -> BasicBlock:
        return self.blocks[0]

    def block(self, label: str) -> BasicBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def param_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.params)


@dataclass(frozen=True)
class GlobalDef:
    name: str
    size: int
    init: bytes = b""


@dataclass(frozen=True)
class Program:
    functions: tuple[Function, ...]
    entry: str
    globals: tuple[GlobalDef, ...] = ()
    externs: frozenset[str] = frozenset()

    def function(self, name: str) -> Function:
        f = self.function_map().get(name)
        if f is None:
            raise KeyError(name)
        return f

    def function_map(self) -> dict[str, Function]:
        return {f.name: f for f in self.functions}

    def with_functions(self, functions) -> "Program":
        return replace(self, functions=tuple(functions))


def has_memory_ops(f: Function) -> bool:
    return any(
        ins.is_memory_op() for b in f.blocks for ins in b.all_instructions()
    )


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _strip_comment(line: str) -> str:
    idx = line.find("#")
    return line if idx < 0 else line[:idx]


def _parse_int(tok: str) -> int:
    return int(tok, 0)


class _Parser:
    def __init__(self, text: str):
        # Statements split on newlines, ';', and braces (so single-line
        # function bodies parse the same as the multi-line form).
        self.stmts: list[tuple[int, str]] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = _strip_comment(raw).replace("{", ";{;").replace("}", ";};")
            for part in line.split(";"):
                part = part.strip()
                if part:
                    self.stmts.append((lineno, part))
        self.pos = 0

    def peek(self):
        return self.stmts[self.pos] if self.pos < len(self.stmts) else None

    def next(self):
        stmt = self.peek()
        if stmt is None:
            raise PirSyntaxError("unexpected end of input", self._last_line())
        self.pos += 1
        return stmt

    def _last_line(self) -> int:
        return self.stmts[-1][0] if self.stmts else 1

    def parse(self) -> Program:
        functions: list[Function] = []
        globals_: list[GlobalDef] = []
        externs: set[str] = set()
        entry: str | None = None

        while (stmt := self.peek()) is not None:
            lineno, text = stmt
            head = text.split()[0]
            if head == "entry":
                self.next()
                parts = text.split()
                if len(parts) != 2:
                    raise PirSyntaxError("expected: entry NAME", lineno)
                entry = parts[1]
            elif head == "global":
                self.next()
                globals_.append(self._parse_global(lineno, text))
            elif head == "extern":
                self.next()
                parts = text.split()
                if len(parts) != 2 or not _IDENT_RE.match(parts[1]):
                    raise PirSyntaxError("expected: extern NAME", lineno)
                externs.add(parts[1])
            elif head == "func":
                functions.append(self._parse_function())
            else:
                raise PirSyntaxError(f"unexpected statement '{text}'", lineno)

        if entry is None:
            entry = "main"
        program = Program(
            functions=tuple(functions),
            entry=entry,
            globals=tuple(globals_),
            externs=frozenset(externs),
        )
        return _derive_attributes(program)

    def _parse_global(self, lineno: int, text: str) -> GlobalDef:
        # global NAME SIZE [= b0 b1 ...]
        m = re.match(r"global\s+(\w+)\s+(\S+)(?:\s*=\s*(.*))?\Z", text)
        if not m:
            raise PirSyntaxError("expected: global NAME SIZE [= BYTES]", lineno)
        name, size_tok, init_tok = m.group(1), m.group(2), m.group(3)
        if not _INT_RE.match(size_tok):
            raise PirSyntaxError(f"bad global size '{size_tok}'", lineno)
        size = _parse_int(size_tok)
        init = b""
        if init_tok:
            vals = []
            for tok in init_tok.split():
                if not _INT_RE.match(tok):
                    raise PirSyntaxError(f"bad init byte '{tok}'", lineno)
                v = _parse_int(tok)
                if not 0 <= v <= 255:
                    raise PirSyntaxError(f"init byte {v} out of range", lineno)
                vals.append(v)
            init = bytes(vals)
        return GlobalDef(name, size, init)

    def _parse_function(self) -> Function:
        lineno, text = self.next()
        m = re.match(r"func\s+(\w+)\s*\(([^)]*)\)\s*(.*?)\s*\Z", text)
        if not m:
            raise PirSyntaxError(
                "expected: func NAME(params) [attrs] {", lineno
            )
        name, params_tok, attrs_tok = m.group(1), m.group(2), m.group(3)
        opener = self.peek()
        if opener is None or opener[1] != "{":
            raise PirSyntaxError(
                f"expected '{{' to open body of '{name}'",
                lineno if opener is None else opener[0],
            )
        self.next()

        params: list[tuple[str, str]] = []
        if params_tok.strip():
            for p in params_tok.split(","):
                p = p.strip()
                if ":" in p:
                    pname, ptype = (x.strip() for x in p.split(":", 1))
                else:
                    pname, ptype = p, "i64"
                if not _IDENT_RE.match(pname) or ptype not in ("i64", "ptr"):
                    raise PirSyntaxError(f"bad parameter '{p}'", lineno)
                params.append((pname, ptype))

        attrs: set[str] = set()
        variant_kind = "original"
        for tok in attrs_tok.split():
            if tok.startswith("variant="):
                variant_kind = tok.split("=", 1)[1]
                if variant_kind not in VARIANT_KINDS:
                    raise PirSyntaxError(f"unknown variant kind '{variant_kind}'", lineno)
            elif tok in FUNCTION_ATTRS:
                attrs.add(tok)
            else:
                raise PirSyntaxError(f"unknown attribute '{tok}'", lineno)

        blocks: list[BasicBlock] = []
        label: str | None = None
        body: list[Instruction] = []
        terminator: Instruction | None = None

        def close_block(at_line: int):
            nonlocal label, body, terminator
            if label is None:
                return
            if terminator is None:
                raise PirSyntaxError(
                    f"block '{label}' has no terminator", at_line
                )
            blocks.append(BasicBlock(label, tuple(body), terminator))
            label, body, terminator = None, [], None

        while True:
            lineno, text = self.next()
            if text == "}":
                close_block(lineno)
                break
            lm = re.match(r"(\w+):\s*(.*)\Z", text)
            if lm:
                close_block(lineno)
                label = lm.group(1)
                text = lm.group(2).strip()
                if not text:
                    continue
            if label is None:
                raise PirSyntaxError("instruction outside a block", lineno)
            if terminator is not None:
                raise PirSyntaxError(
                    f"instruction after terminator in block '{label}'", lineno
                )
            ins = self._parse_instruction(lineno, text)
            if ins.is_terminator():
                terminator = ins
            else:
                body.append(ins)

        if not blocks:
            raise PirSyntaxError(f"function '{name}' has no blocks", lineno)
        return Function(
            name=name,
            params=tuple(params),
            blocks=tuple(blocks),
            attributes=frozenset(attrs),
            variant_kind=variant_kind,
        )

    def _parse_instruction(self, lineno: int, text: str) -> Instruction:
        result = None
        if "=" in text and not text.startswith("check_"):
            lhs, rhs = text.split("=", 1)
            result = lhs.strip()
            if not _IDENT_RE.match(result):
                raise PirSyntaxError(f"bad result register '{result}'", lineno)
            text = rhs.strip()

        toks = text.split()
        opcode = toks[0]
        sanitized = False
        if opcode in ("alloc.s", "free.s"):
            opcode, sanitized = opcode[:-2], True
        if opcode not in _OPCODE_SCHEMAS:
            raise PirSyntaxError(f"unknown opcode '{toks[0]}'", lineno)
        schema = _OPCODE_SCHEMAS[opcode]

        if result is not None and opcode not in _HAS_RESULT | _OPTIONAL_RESULT:
            raise PirSyntaxError(f"'{opcode}' does not produce a result", lineno)
        if result is None and opcode in _HAS_RESULT:
            raise PirSyntaxError(f"'{opcode}' requires a result register", lineno)

        operands = self._parse_operands(lineno, opcode, schema, toks[1:])
        return Instruction(opcode, operands, result, sanitized)

    def _parse_operands(self, lineno, opcode, schema, toks) -> tuple:
        operands: list = []
        i = 0
        for spec in schema:
            if spec.startswith("*"):
                kind = spec[1:]
                while i < len(toks):
                    operands.append(self._operand(lineno, opcode, kind, toks[i]))
                    i += 1
                break
            if i >= len(toks):
                raise PirSyntaxError(
                    f"'{opcode}' expects {len(schema)} operand(s)", lineno
                )
            operands.append(self._operand(lineno, opcode, spec, toks[i]))
            i += 1
        if i != len(toks):
            raise PirSyntaxError(f"too many operands for '{opcode}'", lineno)
        if opcode == "cmp" and operands[0] not in CMP_PREDICATES:
            raise PirSyntaxError(f"bad cmp predicate '{operands[0]}'", lineno)
        if opcode == "check_overflow" and operands[0] not in ("add", "sub", "mul"):
            raise PirSyntaxError(
                f"bad check_overflow op '{operands[0]}'", lineno
            )
        if opcode in ("load", "store", "check_addr") and operands[-1] not in MEM_SIZES:
            raise PirSyntaxError(
                f"bad access size {operands[-1]} (want 1/2/4/8)", lineno
            )
        return tuple(operands)

    def _operand(self, lineno, opcode, kind, tok):
        if kind == "i":
            if not _INT_RE.match(tok):
                raise PirSyntaxError(f"'{opcode}' expects an immediate, got '{tok}'", lineno)
            return _parse_int(tok)
        if kind == "s":
            if not _IDENT_RE.match(tok):
                raise PirSyntaxError(f"'{opcode}' expects a symbol, got '{tok}'", lineno)
            return tok
        # 'v': register name or immediate
        if _INT_RE.match(tok):
            return _parse_int(tok)
        if _IDENT_RE.match(tok):
            return tok
        raise PirSyntaxError(f"bad operand '{tok}' for '{opcode}'", lineno)


def parse_program(text: str, validate: bool = True) -> Program:
    """Parse PIR source into a Program; validates unless told otherwise."""
    program = _Parser(text).parse()
    if validate:
        validate_program(program)
    return program


def _derive_attributes(program: Program) -> Program:
    """Derive attributes the format makes implicit.

    no_memory_access is set iff the body has no load/store/alloc/free,
    address_taken is set on every `addr` target, and the entry function is
    external_visible (it is invoked from outside the program).
    """
    taken = {
        ins.operands[0]
        for f in program.functions
        for b in f.blocks
        for ins in b.all_instructions()
        if ins.opcode == "addr"
    }
    fixed = []
    for f in program.functions:
        attrs = set(f.attributes)
        if has_memory_ops(f):
            attrs.discard("no_memory_access")
        else:
            attrs.add("no_memory_access")
        if f.name in taken:
            attrs.add("address_taken")
        if f.name == program.entry:
            attrs.add("external_visible")
        fixed.append(replace(f, attributes=frozenset(attrs)))
    return program.with_functions(fixed)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _fmt_operand(v) -> str:
    return str(v)


def _fmt_instruction(ins: Instruction) -> str:
    opcode = ins.opcode + (".s" if ins.sanitized else "")
    parts = [opcode] + [_fmt_operand(o) for o in ins.operands]
    text = " ".join(parts)
    if ins.result is not None:
        return f"{ins.result} = {text}"
    return text


def serialize_program(program: Program) -> str:
    """Emit canonical PIR text; the inverse of parse_program."""
    lines: list[str] = [f"entry {program.entry}"]
    for g in program.globals:
        if g.init:
            init = " = " + " ".join(str(b) for b in g.init)
        else:
            init = ""
        lines.append(f"global {g.name} {g.size}{init}")
    for name in sorted(program.externs):
        lines.append(f"extern {name}")
    for f in program.functions:
        params = ", ".join(f"{n}: {t}" for n, t in f.params)
        attrs = " ".join(sorted(f.attributes))
        if f.variant_kind != "original":
            attrs = (attrs + f" variant={f.variant_kind}").strip()
        header = f"func {f.name}({params})" + (f" {attrs}" if attrs else "")
        lines.append(header + " {")
        for b in f.blocks:
            lines.append(f"  {b.label}:")
            for ins in b.all_instructions():
                lines.append(f"    {_fmt_instruction(ins)}")
        lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _check_registers(f: Function) -> None:
    """Every operand register must be defined on all paths reaching its use."""
    label_idx = {b.label: i for i, b in enumerate(f.blocks)}
    n = len(f.blocks)
    params = set(f.param_names())

    defs_in_block: list[set[str]] = []
    for b in f.blocks:
        d = {ins.result for ins in b.all_instructions() if ins.result}
        defs_in_block.append(d)

    preds: list[list[int]] = [[] for _ in range(n)]
    for i, b in enumerate(f.blocks):
        t = b.terminator
        targets = []
        if t.opcode == "branch":
            targets = [t.operands[0]]
        elif t.opcode == "cbranch":
            targets = [t.operands[1], t.operands[2]]
        for lbl in targets:
            preds[label_idx[lbl]].append(i)

    # forward must-define dataflow to a fixpoint
    all_names = params | set().union(*defs_in_block) if defs_in_block else set(params)
    in_sets = [set(all_names) for _ in range(n)]
    in_sets[0] = set(params)
    out_sets = [in_sets[i] | defs_in_block[i] for i in range(n)]
    changed = True
    while changed:
        changed = False
        for i in range(1, n):
            if preds[i]:
                new_in = set.intersection(*(out_sets[p] for p in preds[i]))
            else:
                new_in = set(params)  # unreachable block: only params certain
            if new_in != in_sets[i]:
                in_sets[i] = new_in
                changed = True
            new_out = new_in | defs_in_block[i]
            if new_out != out_sets[i]:
                out_sets[i] = new_out
                changed = True

    symbol_slots = {
        "call": (0,), "addr": (0,), "gaddr": (0,), "cmp": (0,),
        "check_overflow": (0,), "cov_hit": (0, 1), "branch": (0,),
        "cbranch": (1, 2),
    }
    for i, b in enumerate(f.blocks):
        defined = set(in_sets[i])
        for ins in b.all_instructions():
            skip = symbol_slots.get(ins.opcode, ())
            if ins.opcode == "prof_count":
                skip = tuple(range(len(ins.operands)))
            for j, op in enumerate(ins.operands):
                if j in skip or not isinstance(op, str):
                    continue
                if op not in defined:
                    raise PirValidationError(
                        f"register '{op}' used before definition in block "
                        f"'{b.label}'",
                        f.name,
                    )
            if ins.result:
                defined.add(ins.result)


def validate_program(program: Program) -> None:
    """Check structural invariants; raises PirValidationError on the first failure."""
    names = [f.name for f in program.functions]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise PirValidationError(f"duplicate function name(s): {sorted(dupes)}")
    gnames = [g.name for g in program.globals]
    if len(set(gnames)) != len(gnames):
        raise PirValidationError("duplicate global names")
    for g in program.globals:
        if g.size < 1:
            raise PirValidationError(f"global '{g.name}' has size {g.size}")
        if len(g.init) > g.size:
            raise PirValidationError(f"global '{g.name}' init longer than size")

    fmap = program.function_map()
    if program.entry not in fmap:
        raise PirValidationError(f"entry function '{program.entry}' not defined")
    if fmap[program.entry].params:
        raise PirValidationError("entry function must take no parameters")

    callable_names = set(fmap) | program.externs
    global_names = {g.name for g in program.globals}
    for f in program.functions:
        labels = [b.label for b in f.blocks]
        if len(set(labels)) != len(labels):
            raise PirValidationError("duplicate block labels", f.name)
        label_set = set(labels)
        for b in f.blocks:
            for ins in b.instructions:
                if ins.is_terminator():
                    raise PirValidationError(
                        f"terminator inside block '{b.label}' body", f.name
                    )
            t = b.terminator
            targets = ()
            if t.opcode == "branch":
                targets = (t.operands[0],)
            elif t.opcode == "cbranch":
                targets = (t.operands[1], t.operands[2])
            for lbl in targets:
                if lbl not in label_set:
                    raise PirValidationError(
                        f"branch target '{lbl}' not a block of this function",
                        f.name,
                    )
            for ins in b.all_instructions():
                if ins.opcode == "call" and ins.operands[0] not in callable_names:
                    raise PirValidationError(
                        f"call target '{ins.operands[0]}' is not a function, "
                        "trampoline, or declared extern",
                        f.name,
                    )
                if ins.opcode == "addr":
                    target = ins.operands[0]
                    if target not in fmap:
                        raise PirValidationError(
                            f"addr target '{target}' not defined", f.name
                        )
                    if "address_taken" not in fmap[target].attributes:
                        raise PirValidationError(
                            f"addr target '{target}' lacks address_taken", f.name
                        )
                if ins.opcode == "gaddr" and ins.operands[0] not in global_names:
                    raise PirValidationError(
                        f"gaddr target '{ins.operands[0]}' is not a global", f.name
                    )
                if ins.opcode == "icall" and ins.operands[0] < 0:
                    raise PirValidationError("negative dispatch slot", f.name)
                if ins.is_check() and f.variant_kind not in ("sanitized", "coverage"):
                    raise PirValidationError(
                        f"check opcode '{ins.opcode}' outside a sanitized/"
                        "coverage variant body",
                        f.name,
                    )

        mem = has_memory_ops(f)
        declared = "no_memory_access" in f.attributes
        if mem and declared:
            raise PirValidationError(
                "no_memory_access declared but body has memory ops", f.name
            )
        if not mem and not declared:
            raise PirValidationError(
                "memory-free body must carry no_memory_access", f.name
            )
        _check_registers(f)
