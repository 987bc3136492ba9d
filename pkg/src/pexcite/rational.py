"""Exact rational helpers: coercion, parsing and Gaussian elimination over Q."""
from __future__ import annotations

import math
from fractions import Fraction
from typing import Iterable, Sequence

Row = tuple[Fraction, ...]


def to_fraction(value) -> Fraction:
    """Coerce ints, Fractions, decimal/"p/q" strings and finite floats to a Fraction.

    Floats go through their shortest repr, so ``0.1`` becomes ``1/10`` rather
    than the binary expansion.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not numbers here")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {value!r}")
        return Fraction(repr(float(value)))
    if isinstance(value, str):
        return Fraction(value.strip())
    # numpy scalars and the like
    if hasattr(value, "item"):
        return to_fraction(value.item())
    raise TypeError(f"cannot interpret {value!r} as a rational number")


def format_fraction(q: Fraction) -> str:
    return f"{q.numerator}/{q.denominator}"


def fraction_vector(values: Iterable) -> tuple[Fraction, ...]:
    return tuple(to_fraction(v) for v in values)


def rref(rows: Iterable[Sequence], ncols: int | None = None) -> tuple[Row, ...]:
    """Reduced row echelon form with zero rows removed.

    The result is canonical for the row space: two matrices span the same
    space iff their ``rref`` tuples are equal.
    """
    mat = [list(map(to_fraction, r)) for r in rows]
    if not mat:
        return ()
    n = len(mat[0]) if ncols is None else ncols
    if any(len(r) != n for r in mat):
        raise ValueError("ragged matrix")
    piv_r = 0
    for c in range(n):
        pivot = next((i for i in range(piv_r, len(mat)) if mat[i][c] != 0), None)
        if pivot is None:
            continue
        mat[piv_r], mat[pivot] = mat[pivot], mat[piv_r]
        p = mat[piv_r][c]
        if p != 1:
            mat[piv_r] = [v / p for v in mat[piv_r]]
        prow = mat[piv_r]
        for i in range(len(mat)):
            if i != piv_r and mat[i][c] != 0:
                f = mat[i][c]
                mat[i] = [a - f * b for a, b in zip(mat[i], prow)]
        piv_r += 1
        if piv_r == len(mat):
            break
    return tuple(tuple(r) for r in mat[:piv_r])


def rank(rows: Iterable[Sequence]) -> int:
    return len(rref(rows))


def normalize_row(row: Sequence) -> Row | None:
    """Scale a single row so its first nonzero entry is +1; ``None`` for a zero row."""
    r = tuple(map(to_fraction, row))
    lead = next((v for v in r if v != 0), None)
    if lead is None:
        return None
    return tuple(v / lead for v in r)


def matvec(rows: Sequence[Row], vec: Sequence[Fraction]) -> tuple[Fraction, ...]:
    return tuple(sum((a * b for a, b in zip(r, vec)), Fraction(0)) for r in rows)


def contains_rowspace(big: Sequence[Row], small: Sequence[Row]) -> bool:
    """True iff every row of ``small`` lies in the row space of ``big``."""
    if not small:
        return True
    return rank(list(big) + list(small)) == rank(big)
