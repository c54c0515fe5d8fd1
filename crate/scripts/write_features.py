#!/usr/bin/env python3
"""Minimal independent writer for MCAF dense feature files.

Layout: magic b"MCAF", then little-endian u32 version (1), u32 rows,
u32 cols, then rows*cols little-endian f64 values in row-major order.

Cell values follow a fixed integer formula so any conforming reader can
reconstruct the expected matrix bit-for-bit; the first three cells carry
edge-case values (negative zero, the smallest subnormal, the largest
finite double).

Usage: write_features.py OUT ROWS COLS
"""

import struct
import sys


def cell(index):
    if index == 0:
        return -0.0
    if index == 1:
        return 5e-324
    if index == 2:
        return 1.7976931348623157e308
    return index * 0.5 - 3.25


def main():
    if len(sys.argv) != 4:
        raise SystemExit(f"usage: {sys.argv[0]} OUT ROWS COLS")
    out, rows, cols = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
    values = [cell(i) for i in range(rows * cols)]
    with open(out, "wb") as f:
        f.write(b"MCAF")
        f.write(struct.pack("<III", 1, rows, cols))
        f.write(struct.pack(f"<{len(values)}d", *values))


if __name__ == "__main__":
    main()
