#!/usr/bin/env python3
"""Regenerate the workload blobs shipped under src/varsan/progs/workloads.

Every blob is a deterministic function of (program name, split, seed), so
rerunning this script never changes the checked-in bytes unless the seed
or the size table does.
"""

import argparse
import random
from pathlib import Path

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "varsan" / "progs" / "workloads"

# sizes are bytes except matmul, which stores the matrix dimension
SIZES = {
    "sort": {"train": 48, "ref": 96},
    "matmul": {"train": 6, "ref": 8},
    "hashtable": {"train": 48, "ref": 96},
    "strscan": {"train": 96, "ref": 160},
    "parser": {"train": 80, "ref": 140},
    "checksum": {"train": 128, "ref": 192},
}


def random_bytes(rng: random.Random, n: int) -> bytes:
    return bytes(rng.randrange(256) for _ in range(n))


def strscan_bytes(rng: random.Random, n: int) -> bytes:
    # lowercase noise with the scanned pattern planted at fixed strides
    out = bytearray(rng.randrange(97, 123) for _ in range(n))
    for pos in range(17, n - 3, 17):
        out[pos:pos + 3] = b"abc"
    return bytes(out)


def expr(rng: random.Random, depth: int) -> str:
    roll = rng.random()
    if depth <= 0 or roll < 0.45:
        return str(rng.randrange(1000))
    if roll < 0.60:
        return "(" + expr(rng, depth - 1) + ")"
    op = rng.choice("+*")
    return expr(rng, depth - 1) + op + expr(rng, depth - 1)


def parser_bytes(rng: random.Random, target: int) -> bytes:
    parts = []
    total = 0
    while total < target:
        e = expr(rng, 5)
        parts.append(e)
        total += len(e) + 1
    return ";".join(parts).encode("ascii")[:target]


def build(name: str, which: str, seed: int) -> bytes:
    size = SIZES[name][which]
    rng = random.Random(f"{name}:{which}:{seed}")
    if name == "matmul":
        return random_bytes(rng, 2 * size * size)
    if name == "strscan":
        return strscan_bytes(rng, size)
    if name == "parser":
        return parser_bytes(rng, size)
    return random_bytes(rng, size)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    for name in sorted(SIZES):
        for which in ("train", "ref"):
            blob = build(name, which, args.seed)
            path = args.out / f"{name}.{which}.bin"
            path.write_bytes(blob)
            print(f"{path.name}: {len(blob)} bytes")


if __name__ == "__main__":
    main()
