"""Excluding frequency conditions that guarantee PE of the differentiated basis.

The set of admissible frequency vectors is described as

    Omega = { w : C_z w != 0  for every z }

with exact rational matrices ``C_z`` in reduced row echelon form.  It is the
intersection of two parts: uniqueness of the frequencies inside every
expanded basis element (single-row conditions) and the frequency-tuple
conditions, whose complement is a conjunction over tuple columns of
disjunctions of linear equations.  That complement is expanded into a
disjunction of homogeneous systems column by column, solving and
canonicalizing each system on the way.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .rational import Row, format_fraction, matvec, normalize_row, rank, rref, to_fraction
from .trig import Freq, SinusoidSum

log = logging.getLogger(__name__)

SINE, COSINE = 0, 1
DEFAULT_MAX_ALTERNATIVES = 10**6

# an RREF with no rows: the homogeneous system is solved by every omega
ALL_FREE: tuple[Row, ...] = ()


class ConditionError(ValueError):
    pass


class OmegaSamplingError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class ConditionMatrix:
    """One condition ``C w != 0``; rows are a zero-row-free RREF."""

    rows: tuple[Row, ...]

    def __post_init__(self):
        if not self.rows:
            raise ConditionError("a condition matrix needs at least one row")

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence]) -> "ConditionMatrix":
        return cls(rref(rows))

    @property
    def m(self) -> int:
        return len(self.rows[0])

    def satisfied_by(self, omega: Sequence[Fraction]) -> bool:
        return any(v != 0 for v in matvec(self.rows, omega))

    def describe(self, names: Sequence[str] | None = None) -> str:
        exprs = [linear_form(r, names) for r in self.rows]
        if len(exprs) == 1:
            return f"{exprs[0]} != 0"
        return "[" + ", ".join(exprs) + "] != 0"

    def to_json(self) -> list[list[str]]:
        return [[format_fraction(v) for v in r] for r in self.rows]


def _sort_key(c: ConditionMatrix):
    return (len(c.rows), c.rows)


@dataclass(frozen=True)
class ConditionSet:
    """Conjunction of :class:`ConditionMatrix` constraints over ``m`` frequencies."""

    m: int
    conditions: tuple[ConditionMatrix, ...] = ()
    is_empty_omega: bool = False

    @property
    def count(self) -> int:
        return len(self.conditions)

    def __contains__(self, omega) -> bool:
        return membership(omega, self)

    def describe(self, names: Sequence[str] | None = None) -> list[str]:
        if self.is_empty_omega:
            return ["Omega is empty"]
        return [c.describe(names) for c in self.conditions]

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "conditions": [c.to_json() for c in self.conditions],
            "empty": self.is_empty_omega,
            "count": self.count,
        }

    @classmethod
    def from_json(cls, data) -> "ConditionSet":
        m = int(data["m"])
        conds = tuple(ConditionMatrix.from_rows(rows) for rows in data["conditions"])
        return cls(m, conds, bool(data.get("empty", False)))


def linear_form(row: Sequence[Fraction], names: Sequence[str] | None = None) -> str:
    names = names or [f"w{j + 1}" for j in range(len(row))]
    text = ""
    for coef, name in zip(row, names):
        if coef == 0:
            continue
        mag = abs(coef)
        sym = name if mag == 1 else f"{mag}*{name}"
        if not text:
            text = ("-" if coef < 0 else "") + sym
        else:
            text += (" - " if coef < 0 else " + ") + sym
    return text or "0"


def _canonical_set(m: int, mats: Iterable[tuple[Row, ...]]) -> tuple[ConditionMatrix, ...]:
    unique = {r for r in mats}
    return tuple(sorted((ConditionMatrix(r) for r in unique), key=_sort_key))


def _prune(mats: Sequence[ConditionMatrix], mode: str) -> tuple[ConditionMatrix, ...]:
    """Drop every matrix that is implied by another member.

    ``mode="rows"`` removes matrices whose row set contains another member's
    rows; ``mode="span"`` removes matrices whose row space contains another
    member's row space (strictly stronger, still an equivalence).
    """
    mats = sorted(set(mats), key=_sort_key)
    if mode not in ("rows", "span"):
        raise ValueError(f"unknown pruning mode {mode!r}")
    keep: list[ConditionMatrix] = []
    row_sets = [frozenset(c.rows) for c in mats]
    for i, c in enumerate(mats):
        redundant = False
        for j, other in enumerate(mats):
            if i == j:
                continue
            if mode == "rows":
                implied = row_sets[j] < row_sets[i]
            else:
                implied = len(other.rows) < len(c.rows) and rank(c.rows + other.rows) == len(c.rows)
            if implied:
                redundant = True
                break
        if not redundant:
            keep.append(c)
    return tuple(keep)


# -- uniqueness within elements ------------------------------------------


def build_omega1(expanded: Sequence[SinusoidSum]) -> ConditionSet:
    """Pairwise ``w_a != +-w_b`` among same-type terms of each element."""
    if not expanded:
        raise ConditionError("no expanded basis elements")
    m = expanded[0].m
    rows: set[Row] = set()
    empty = False
    for s in expanded:
        if s.m != m:
            raise ConditionError("expanded elements disagree on m")
        for freqs in (s.sine_freqs, s.cosine_freqs):
            for f1, f2 in itertools.combinations(freqs, 2):
                for sign in (-1, 1):
                    r = normalize_row([a + sign * b for a, b in zip(f1, f2)])
                    if r is None:
                        empty = True
                    else:
                        rows.add(r)
    if empty:
        return ConditionSet(m, (), True)
    return ConditionSet(m, _canonical_set(m, ((r,) for r in rows)))


# -- tuple table ---------------------------------------------------------


@dataclass(frozen=True)
class Term:
    """One sinusoidal term of an expanded element (an entry of ``W_h``)."""

    element: int
    index: int
    freq: Freq
    kind: int  # SINE or COSINE


@dataclass(frozen=True)
class TupleTable:
    m: int
    elements: tuple[tuple[Term, ...], ...]
    columns: tuple[tuple[int, ...], ...]

    @property
    def h(self) -> int:
        return len(self.elements)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @property
    def P(self) -> list[list[Freq]]:
        return [[self.elements[hb][col[hb]].freq for col in self.columns] for hb in range(self.h)]

    @property
    def T(self) -> np.ndarray:
        return np.array(
            [[self.elements[hb][col[hb]].kind for col in self.columns] for hb in range(self.h)],
            dtype=int,
        )

    def W(self, hb: int) -> list[Freq]:
        return [t.freq for t in self.elements[hb]]

    def column_terms(self, n: int) -> tuple[Term, ...]:
        col = self.columns[n]
        return tuple(self.elements[hb][col[hb]] for hb in range(self.h))


def element_terms(hb: int, s: SinusoidSum) -> tuple[Term, ...]:
    terms = [Term(hb, 0, f, SINE) for f in s.sine_freqs]
    terms += [Term(hb, 0, f, COSINE) for f in s.cosine_freqs]
    return tuple(Term(t.element, i, t.freq, t.kind) for i, t in enumerate(terms))


def build_tuple_table(expanded: Sequence[SinusoidSum], max_columns: int = 10**6) -> TupleTable:
    """All tuples picking one term per element, in lexicographic order of term indices."""
    if not expanded:
        raise ConditionError("no expanded basis elements")
    elements = tuple(element_terms(hb, s) for hb, s in enumerate(expanded))
    for hb, terms in enumerate(elements):
        if not terms:
            raise ConditionError(f"basis element {hb} expands to a constant; its derivative is zero")
    n_p = math.prod(len(t) for t in elements)
    if n_p > max_columns:
        raise ConditionError(f"tuple table would have {n_p} columns (cap {max_columns})")
    columns = tuple(itertools.product(*(range(len(t)) for t in elements)))
    return TupleTable(expanded[0].m, elements, columns)


def np1_exactness_flag(table: TupleTable) -> bool:
    """With a single tuple the conditions are necessary as well as sufficient."""
    return table.n_columns == 1


def column_violations(table: TupleTable, n: int) -> set[Row] | None:
    """Normalized rows ``r`` of the equations ``r . w = 0`` that break column ``n``.

    Returns ``None`` when some equation is ``0 = 0``, i.e. the column is
    violated for every omega.
    """
    col = table.column_terms(n)
    h = table.h
    rows: set[Row] = set()

    def add(vec) -> bool:
        r = normalize_row(vec)
        if r is None:
            return False
        rows.add(r)
        return True

    def add_pm(f1: Freq, f2: Freq) -> bool:
        return add([a - b for a, b in zip(f1, f2)]) and add([a + b for a, b in zip(f1, f2)])

    # group I: a chosen frequency vanishes
    for t in col:
        if not add(t.freq):
            return None
    for h1 in range(h):
        t1 = col[h1]
        # group II: same-type chosen frequencies coincide up to sign
        for h2 in range(h1 + 1, h):
            if col[h2].kind == t1.kind and not add_pm(t1.freq, col[h2].freq):
                return None
        # groups IIIa/IIIb: a chosen frequency meets a non-chosen same-type term elsewhere
        for h2 in range(h):
            if h2 == h1:
                continue
            own = col[h2]
            for other in table.elements[h2]:
                if other.kind != t1.kind or other == own:
                    continue
                if not add_pm(t1.freq, other.freq):
                    return None
    return rows


def build_omega2(
    table: TupleTable,
    max_alternatives: int = DEFAULT_MAX_ALTERNATIVES,
    absorb: bool = False,
) -> ConditionSet:
    """Expand the complement conjunction column by column into RREF alternatives.

    The accumulated disjunction collapses to "every omega" as soon as one
    alternative has no pivot (all variables free); it is then dropped and the
    expansion restarts from the next column.  If the final disjunction is of
    that kind the set is empty.  ``absorb`` additionally drops alternatives
    whose solution space lies inside another's.
    """
    m = table.m
    acc: set[tuple[Row, ...]] | None = None  # None: nothing accumulated yet
    for n in range(table.n_columns):
        viol = column_violations(table, n)
        disj = {ALL_FREE} if viol is None else {(r,) for r in viol}
        if not disj:
            # a column without possible violations: the conjunction is unsatisfiable
            acc = set()
            break
        if acc is None or acc == {ALL_FREE}:
            acc = disj
        elif disj == {ALL_FREE}:
            pass
        else:
            combined: set[tuple[Row, ...]] = set()
            for a in acc:
                for b in disj:
                    if b[0] in a:
                        combined.add(a)
                    else:
                        combined.add(rref(a + b, m))
                if len(combined) > max_alternatives:
                    raise ConditionError(
                        f"expansion exceeded {max_alternatives} alternatives at column {n}"
                    )
            acc = combined
        if ALL_FREE in acc:
            acc = {ALL_FREE}
        elif absorb:
            acc = {c.rows for c in _prune([ConditionMatrix(r) for r in acc], "span")}
        log.debug("column %d: %d alternatives", n, len(acc))
    assert acc is not None
    if acc == {ALL_FREE}:
        return ConditionSet(m, (), True)
    # full-rank alternatives (only omega = 0) remain as conditions w != 0
    return ConditionSet(m, _canonical_set(m, acc))


# -- set operations --------------------------------------------------------


def intersect(a: ConditionSet, b: ConditionSet, prune: str = "rows") -> ConditionSet:
    """Conjunction of two condition sets with redundant matrices removed."""
    if a.m != b.m:
        raise ConditionError(f"frequency dimension mismatch: {a.m} vs {b.m}")
    if a.is_empty_omega or b.is_empty_omega:
        return ConditionSet(a.m, (), True)
    return ConditionSet(a.m, _prune(list(a.conditions) + list(b.conditions), prune))


def intersect_all(sets: Sequence[ConditionSet], prune: str = "rows") -> ConditionSet:
    if not sets:
        raise ConditionError("nothing to intersect")
    out = sets[0]
    if len(sets) == 1:
        out = ConditionSet(out.m, _prune(out.conditions, prune), out.is_empty_omega)
    for s in sets[1:]:
        out = intersect(out, s, prune)
    return out


def membership(omega_c: Sequence, cset: ConditionSet) -> bool:
    """Exact test of ``C_z w != 0`` for all ``z``."""
    w = tuple(to_fraction(v) for v in omega_c)
    if len(w) != cset.m:
        raise ConditionError(f"omega has length {len(w)}, expected {cset.m}")
    if cset.is_empty_omega:
        return False
    return all(c.satisfied_by(w) for c in cset.conditions)


def violated(omega_c: Sequence, cset: ConditionSet) -> list[ConditionMatrix]:
    w = tuple(to_fraction(v) for v in omega_c)
    return [c for c in cset.conditions if not c.satisfied_by(w)]


@dataclass(frozen=True)
class OmegaSample:
    omega: tuple[Fraction, ...]
    attempts: int


def sample_omega(
    cset: ConditionSet,
    box: Sequence[tuple],
    seed: int | None = None,
    max_attempts: int = 1000,
    max_denominator: int = 1000,
) -> OmegaSample:
    """Rejection-sample a rational member of ``cset`` from the box ``[(lo, hi), ...]``."""
    if len(box) != cset.m:
        raise ConditionError(f"box has {len(box)} intervals, expected {cset.m}")
    if cset.is_empty_omega:
        raise OmegaSamplingError("Omega is empty")
    lo = [to_fraction(b[0]) for b in box]
    hi = [to_fraction(b[1]) for b in box]
    if any(l > u for l, u in zip(lo, hi)):
        raise ConditionError("box bounds must satisfy lo <= hi")
    rng = np.random.default_rng(seed)
    for attempt in range(1, max_attempts + 1):
        w = []
        for l, u in zip(lo, hi):
            x = Fraction(float(rng.uniform(float(l), float(u)))).limit_denominator(max_denominator)
            w.append(min(max(x, l), u))
        if membership(w, cset):
            return OmegaSample(tuple(w), attempt)
    raise OmegaSamplingError(
        f"no member of Omega found in {max_attempts} draws; the box is likely degenerate"
    )


# -- pipeline ----------------------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    omega1: ConditionSet
    omega2: ConditionSet
    omega: ConditionSet
    table: TupleTable

    @property
    def exact(self) -> bool:
        return np1_exactness_flag(self.table)


def conditions_from_expansion(
    expanded: Sequence[SinusoidSum],
    prune: str = "rows",
    absorb: bool = False,
    max_alternatives: int = DEFAULT_MAX_ALTERNATIVES,
) -> ConditionReport:
    o1 = build_omega1(expanded)
    table = build_tuple_table(expanded)
    o2 = build_omega2(table, max_alternatives=max_alternatives, absorb=absorb)
    return ConditionReport(o1, o2, intersect(o1, o2, prune), table)
