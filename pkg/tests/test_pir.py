"""Parser, serializer, and validator behavior."""

import pytest
from hypothesis import given, settings, strategies as st

from varsan.pir import (
    Function,
    PirSyntaxError,
    PirValidationError,
    parse_program,
    serialize_program,
    validate_program,
)

from conftest import corpus_paths, load

MINIMAL = "func main() { b0: r0 = const 2; r1 = const 3; r2 = add r0 r1; return r2 }"


def test_minimal_program_parses():
    program = parse_program(MINIMAL)
    assert len(program.functions) == 1
    assert program.entry == "main"
    validate_program(program)


def test_undefined_register_named_in_error():
    bad = MINIMAL.replace("return r2", "return r9")
    with pytest.raises(PirValidationError, match="r9"):
        validate_program(parse_program(bad))


def test_single_line_and_multi_line_forms_agree():
    multi = """
    func main() {
      b0:
        r0 = const 2
        r1 = const 3
        r2 = add r0 r1
        return r2
    }
    """
    assert parse_program(MINIMAL) == parse_program(multi)


@pytest.mark.parametrize("path", corpus_paths(), ids=lambda p: p.stem)
def test_corpus_round_trip(path):
    program = parse_program(path.read_text())
    validate_program(program)
    again = parse_program(serialize_program(program))
    assert again == program


def test_comments_and_blank_lines_ignored():
    program = parse_program(
        """
        # leading comment
        entry main

        func main() {   # trailing comment
          b0:
            r = const 1  # on an instruction
            return r
        }
        """
    )
    assert program.functions[0].blocks[0].instructions[0].opcode == "const"


def test_default_entry_is_main():
    assert parse_program(MINIMAL).entry == "main"
    named = parse_program("entry other\nfunc other() { b0: r = const 1; return r }")
    assert named.entry == "other"


def test_globals_parse_with_init_bytes():
    program = parse_program(
        """
        global table 8 = 1 2 3
        func main() {
          b0:
            g = gaddr table
            v = load g 1
            return v
        }
        """
    )
    g = program.globals[0]
    assert (g.name, g.size, g.init) == ("table", 8, b"\x01\x02\x03")
    validate_program(program)


def test_sanitized_alloc_mnemonic_sets_flag():
    program = parse_program(
        """
        func main() {
          b0:
            p = alloc.s 8
            free.s p
            r = const 0
            return r
        }
        """
    )
    ins = program.functions[0].blocks[0].instructions
    assert ins[0].opcode == "alloc" and ins[0].sanitized
    assert ins[1].opcode == "free" and ins[1].sanitized


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("func main() { b0: r = bogus 1; return r }", "bogus"),
        ("func main() { b0: r = const; return r }", "operand"),
        ("func main() { b0: const 1; return 0 }", "result"),
        ("func main() { b0: return 0", "unexpected end"),
        ("func main() { r = const 1; return r }", "outside a block"),
        ("entry", "entry NAME"),
        ("bogus_top_level", "unexpected statement"),
    ],
)
def test_syntax_errors(text, fragment):
    with pytest.raises(PirSyntaxError, match=fragment):
        parse_program(text)


def test_syntax_error_carries_line_number():
    text = "entry main\nfunc main() {\n  b0:\n    r = wat 1\n    return r\n}"
    with pytest.raises(PirSyntaxError) as exc:
        parse_program(text)
    assert exc.value.line == 4


@pytest.mark.parametrize(
    "text, fragment",
    [
        # duplicate function name
        (
            "func f() { b0: r = const 1; return r }\n"
            "func f() { b0: r = const 2; return r }\n"
            "entry f",
            "duplicate",
        ),
        # entry must exist
        ("entry missing\nfunc main() { b0: r = const 1; return r }", "missing"),
        # entry takes no parameters
        ("entry main\nfunc main(x: i64) { b0: return x }", "parameter"),
        # branch target must exist
        ("func main() { b0: branch nowhere }", "nowhere"),
        # call target must exist
        ("func main() { b0: r = call ghost; return r }", "ghost"),
        # gaddr target must be a declared global
        ("func main() { b0: g = gaddr ghost; return g }", "ghost"),
        # check opcodes only in sanitized or coverage bodies
        (
            "func main() { b0: a = const 0; check_addr a 1; r = const 0; return r }",
            "check_addr",
        ),
        # use before definition on one path
        (
            """
            func main() {
              b0:
                c = const 1
                cbranch c yes no
              yes:
                v = const 5
                branch done
              no:
                branch done
              done:
                return v
            }
            """,
            "'v'",
        ),
    ],
)
def test_validation_errors(text, fragment):
    with pytest.raises(PirValidationError, match=fragment):
        validate_program(parse_program(text))


def test_register_defined_on_all_paths_accepted():
    program = load(
        """
        func main() {
          b0:
            c = const 1
            cbranch c yes no
          yes:
            v = const 5
            branch done
          no:
            v = const 6
            branch done
          done:
            return v
        }
        """
    )
    assert len(program.functions[0].blocks) == 4


def test_attribute_derivation():
    program = load(
        """
        entry main
        func leaf() {
          b0:
            p = alloc 8
            free p
            r = const 0
            return r
        }
        func pure(x: i64) {
          b0:
            y = add x 1
            return y
        }
        func main() {
          b0:
            f = addr pure
            r = call leaf
            s = callv f 1
            t = add r s
            return t
        }
        """
    )
    by_name = {f.name: f for f in program.functions}
    assert "no_memory_access" not in by_name["leaf"].attributes
    assert "no_memory_access" in by_name["pure"].attributes
    assert "address_taken" in by_name["pure"].attributes
    assert "external_visible" in by_name["main"].attributes


# -- random program generator (round-trip property) -----------------------

_names = st.sampled_from(["ra", "rb", "rc", "rd", "re"])


@st.composite
def straightline_function(draw):
    """A single-block function of const/arithmetic with a final return."""
    n = draw(st.integers(min_value=1, max_value=8))
    lines = []
    defined = []
    for i in range(n):
        reg = f"v{i}"
        if defined and draw(st.booleans()):
            op = draw(st.sampled_from(["add", "sub", "mul"]))
            a = draw(st.sampled_from(defined))
            b = draw(st.sampled_from(defined))
            lines.append(f"{reg} = {op} {a} {b}")
        else:
            lines.append(f"{reg} = const {draw(st.integers(-2**63, 2**63 - 1))}")
        defined.append(reg)
    lines.append(f"return {draw(st.sampled_from(defined))}")
    body = "; ".join(lines)
    return f"func main() {{ b0: {body} }}"


@given(straightline_function())
@settings(max_examples=60, deadline=None)
def test_generated_programs_round_trip(text):
    program = parse_program(text)
    validate_program(program)
    assert parse_program(serialize_program(program)) == program


def test_function_map_and_immutability(arith_program):
    fmap = arith_program.function_map()
    assert set(fmap) == {"main"}
    assert isinstance(fmap["main"], Function)
    with pytest.raises(Exception):
        arith_program.functions[0].name = "other"
