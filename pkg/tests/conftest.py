import pathlib

import pytest

from varsan.pir import parse_program, validate_program

PROGS = pathlib.Path(__file__).resolve().parents[1] / "src" / "varsan" / "progs"


def load(text):
    """Parse and validate inline program text."""
    program = parse_program(text)
    validate_program(program)
    return program


def corpus_paths():
    return sorted(PROGS.rglob("*.pir"))


@pytest.fixture
def arith_program():
    return load(
        """
        entry main
        func main() {
          b0:
            a = const 2
            b = const 3
            c = add a b
            out c
            return c
        }
        """
    )


@pytest.fixture
def heap_program():
    # alloc(8), store one past the end on request
    return load(
        """
        entry main
        func main() {
          b0:
            p = alloc 8
            q = alloc 8
            sel = in 0
            bad = cmp eq sel 1
            off = select bad 8 0
            a = add p off
            v = const 5
            store a v 1
            r = load a 1
            out r
            return r
        }
        """
    )
