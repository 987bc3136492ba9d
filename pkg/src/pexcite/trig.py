"""Exact algebra over sums of sinusoids with integer-combination frequencies.

A :class:`SinusoidSum` represents

    e + sum_b  s_b * sin((b . w) t) + c_b * cos((b . w) t)

where ``w`` is a vector of ``m`` symbolic frequency variables and each key
``b`` is an integer vector.  Amplitudes are exact rationals.  Keys are kept in
a canonical sign (first nonzero entry positive), zero-frequency cosines fold
into the constant and zero-frequency sines vanish, so equal signals have
equal representations.

After one differentiation the amplitudes carry an implicit factor ``(b . w)``;
this is tracked by ``derivative_factor`` instead of general symbolic
amplitudes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .rational import format_fraction, to_fraction

Freq = tuple[int, ...]

ZERO = Fraction(0)
HALF = Fraction(1, 2)


class TrigAlgebraError(ValueError):
    pass


def canonical_freq(b: Sequence[int]) -> tuple[Freq, int]:
    """Return ``(key, sign)`` with ``key = sign * b`` and first nonzero entry of key positive.

    ``sign`` is 0 for the zero vector.
    """
    key = []
    for v in b:
        if isinstance(v, Fraction):
            if v.denominator != 1:
                raise TrigAlgebraError(f"non-integer frequency multiplier {v}")
            v = v.numerator
        elif not isinstance(v, (int, np.integer)):
            raise TrigAlgebraError(f"non-integer frequency multiplier {v!r}")
        key.append(int(v))
    lead = next((v for v in key if v != 0), 0)
    if lead == 0:
        return tuple(key), 0
    if lead < 0:
        return tuple(-v for v in key), -1
    return tuple(key), 1


@dataclass(frozen=True)
class SinusoidSum:
    """Canonical exact sinusoid sum; build instances through :meth:`build`."""

    m: int
    constant: Fraction = ZERO
    terms: tuple[tuple[Freq, Fraction, Fraction], ...] = ()
    derivative_factor: bool = False
    _map: dict = field(default=None, compare=False, repr=False, hash=False)

    @classmethod
    def build(
        cls,
        m: int,
        constant=0,
        terms: Iterable[tuple[Sequence[int], object, object]] = (),
        derivative_factor: bool = False,
    ) -> "SinusoidSum":
        acc: dict[Freq, list[Fraction]] = {}
        const = to_fraction(constant)
        if derivative_factor and const != 0:
            raise TrigAlgebraError("a differentiated sum has no constant part")
        for b, s, c in terms:
            if len(b) != m:
                raise TrigAlgebraError(f"frequency {tuple(b)} has length {len(b)}, expected {m}")
            key, sign = canonical_freq(b)
            s, c = to_fraction(s), to_fraction(c)
            if sign == 0:
                # cos(0) = 1, sin(0) = 0; a derivative factor (0 . w) kills both
                if not derivative_factor:
                    const += c
                continue
            if sign < 0:
                # sin is odd and cos even; the factor (b . w) is odd as well
                if derivative_factor:
                    c = -c
                else:
                    s = -s
            slot = acc.setdefault(key, [ZERO, ZERO])
            slot[0] += s
            slot[1] += c
        items = tuple(
            (k, v[0], v[1]) for k, v in sorted(acc.items()) if v[0] != 0 or v[1] != 0
        )
        out = cls(m, const, items, derivative_factor)
        object.__setattr__(out, "_map", {k: (s, c) for k, s, c in items})
        return out

    @classmethod
    def const(cls, m: int, value) -> "SinusoidSum":
        return cls.build(m, value)

    @classmethod
    def sin(cls, b: Sequence[int], amplitude=1) -> "SinusoidSum":
        return cls.build(len(b), 0, [(b, amplitude, 0)])

    @classmethod
    def cos(cls, b: Sequence[int], amplitude=1) -> "SinusoidSum":
        return cls.build(len(b), 0, [(b, 0, amplitude)])

    @property
    def term_map(self) -> Mapping[Freq, tuple[Fraction, Fraction]]:
        if self._map is None:
            object.__setattr__(self, "_map", {k: (s, c) for k, s, c in self.terms})
        return self._map

    @property
    def sine_freqs(self) -> list[Freq]:
        return [k for k, s, _ in self.terms if s != 0]

    @property
    def cosine_freqs(self) -> list[Freq]:
        return [k for k, _, c in self.terms if c != 0]

    @property
    def counts(self) -> tuple[int, int]:
        """``(L, K)``: number of nonzero sine and cosine amplitudes."""
        return len(self.sine_freqs), len(self.cosine_freqs)

    def is_zero(self) -> bool:
        return self.constant == 0 and not self.terms

    def is_constant(self) -> bool:
        return not self.terms

    # -- arithmetic -----------------------------------------------------

    def _check_compatible(self, other: "SinusoidSum") -> None:
        if self.m != other.m:
            raise TrigAlgebraError(f"frequency dimension mismatch: {self.m} vs {other.m}")

    def __add__(self, other) -> "SinusoidSum":
        if not isinstance(other, SinusoidSum):
            other = SinusoidSum.const(self.m, other)
        self._check_compatible(other)
        if self.is_zero():
            return other
        if other.is_zero():
            return self
        if self.derivative_factor != other.derivative_factor:
            raise TrigAlgebraError("cannot add differentiated and plain sums; resolve first")
        return SinusoidSum.build(
            self.m,
            self.constant + other.constant,
            list(self.terms) + list(other.terms),
            self.derivative_factor,
        )

    __radd__ = __add__

    def __neg__(self) -> "SinusoidSum":
        return self.scale(-1)

    def __sub__(self, other) -> "SinusoidSum":
        if not isinstance(other, SinusoidSum):
            other = SinusoidSum.const(self.m, other)
        return self + (-other)

    def scale(self, k) -> "SinusoidSum":
        k = to_fraction(k)
        return SinusoidSum.build(
            self.m,
            self.constant * k,
            [(b, s * k, c * k) for b, s, c in self.terms],
            self.derivative_factor,
        )

    def __mul__(self, other) -> "SinusoidSum":
        if isinstance(other, SinusoidSum):
            return multiply(self, other)
        return self.scale(other)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "SinusoidSum":
        if not isinstance(k, int) or k < 0:
            raise TrigAlgebraError("only nonnegative integer powers")
        result = SinusoidSum.const(self.m, 1)
        base = self
        while k:
            if k & 1:
                result = multiply(result, base)
            k >>= 1
            if k:
                base = multiply(base, base)
        return result

    # -- serialization --------------------------------------------------

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "constant": format_fraction(self.constant),
            "terms": [
                {"freq": list(b), "sin": format_fraction(s), "cos": format_fraction(c)}
                for b, s, c in self.terms
            ],
            "derivative_factor": self.derivative_factor,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "SinusoidSum":
        terms = data.get("terms", [])
        m = data.get("m")
        if m is None:
            if not terms:
                raise TrigAlgebraError("cannot infer m from an empty term list")
            m = len(terms[0]["freq"])
        return cls.build(
            int(m),
            data.get("constant", 0),
            [(t["freq"], t.get("sin", 0), t.get("cos", 0)) for t in terms],
            bool(data.get("derivative_factor", False)),
        )

    def __str__(self) -> str:
        return format_sum(self)


def multiply(a: SinusoidSum, b: SinusoidSum) -> SinusoidSum:
    """Product via product-to-sum identities."""
    a._check_compatible(b)
    if a.derivative_factor or b.derivative_factor:
        raise TrigAlgebraError("products of differentiated sums are not representable")
    m = a.m
    out: list[tuple[Freq, Fraction, Fraction]] = []
    const = a.constant * b.constant
    if a.constant:
        out.extend((f, s * a.constant, c * a.constant) for f, s, c in b.terms)
    if b.constant:
        out.extend((f, s * b.constant, c * b.constant) for f, s, c in a.terms)
    for f1, s1, c1 in a.terms:
        for f2, s2, c2 in b.terms:
            diff = tuple(x - y for x, y in zip(f1, f2))
            summ = tuple(x + y for x, y in zip(f1, f2))
            # sin f1 sin f2 = (cos(f1-f2) - cos(f1+f2)) / 2
            # cos f1 cos f2 = (cos(f1-f2) + cos(f1+f2)) / 2
            # sin f1 cos f2 = (sin(f1+f2) + sin(f1-f2)) / 2
            # cos f1 sin f2 = (sin(f1+f2) - sin(f1-f2)) / 2
            ss, cc, sc, cs = s1 * s2, c1 * c2, s1 * c2, c1 * s2
            out.append((diff, HALF * (sc - cs), HALF * (ss + cc)))
            out.append((summ, HALF * (sc + cs), HALF * (cc - ss)))
    return SinusoidSum.build(m, const, out)


def differentiate(s: SinusoidSum) -> SinusoidSum:
    """Time derivative; amplitudes become implicitly multiplied by ``b . w``."""
    if s.derivative_factor:
        raise TrigAlgebraError("only one symbolic differentiation is supported; resolve first")
    # d/dt [A sin(wt) + B cos(wt)] = w [A cos(wt) - B sin(wt)]
    return SinusoidSum.build(
        s.m, 0, [(f, -c, sn) for f, sn, c in s.terms], derivative_factor=True
    )


def resolve(s: SinusoidSum, omega: Sequence) -> SinusoidSum:
    """Fold the symbolic derivative factor into the amplitudes for exact ``omega``."""
    if not s.derivative_factor:
        return s
    w = [to_fraction(v) for v in omega]
    if len(w) != s.m:
        raise TrigAlgebraError(f"omega has length {len(w)}, expected {s.m}")
    out = []
    for f, sn, c in s.terms:
        k = sum((bj * wj for bj, wj in zip(f, w)), ZERO)
        out.append((f, sn * k, c * k))
    return SinusoidSum.build(s.m, 0, out)


def substitute(s: SinusoidSum, multiples: Sequence[int]) -> SinusoidSum:
    """Map the ``m`` frequency variables onto integer multiples of one base frequency.

    With ``w_j = multiples[j] * w0`` every term frequency becomes an integer
    multiple of ``w0`` and numerically equal frequencies merge exactly.
    """
    if len(multiples) != s.m:
        raise TrigAlgebraError(f"got {len(multiples)} multiples for m={s.m}")
    out = []
    for f, sn, c in s.terms:
        k = sum(int(b) * int(n) for b, n in zip(f, multiples))
        out.append(((k,), sn, c))
    return SinusoidSum.build(1, s.constant, out, s.derivative_factor)


def evaluate(s: SinusoidSum, omega: Sequence[float], t) -> np.ndarray | float:
    """Numeric value at time(s) ``t`` for numeric frequency variables ``omega``."""
    w = np.asarray(omega, dtype=float)
    if w.shape != (s.m,):
        raise TrigAlgebraError(f"omega has shape {w.shape}, expected ({s.m},)")
    t_arr = np.asarray(t, dtype=float)
    val = np.full(t_arr.shape, float(s.constant))
    for f, sn, c in s.terms:
        freq = float(np.dot(f, w))
        arg = freq * t_arr
        part = float(sn) * np.sin(arg) + float(c) * np.cos(arg)
        if s.derivative_factor:
            part = part * freq
        val = val + part
    if val.ndim == 0:
        return float(val)
    return val


def format_sum(s: SinusoidSum, names: Sequence[str] | None = None) -> str:
    names = names or [f"w{j + 1}" for j in range(s.m)]

    def freq_str(f: Freq) -> str:
        parts = []
        for coef, name in zip(f, names):
            if coef == 0:
                continue
            mag = abs(coef)
            sym = name if mag == 1 else f"{mag}{name}"
            parts.append(("-" if coef < 0 else "+") + sym)
        text = "".join(parts).lstrip("+")
        return text

    pieces = []
    if s.constant:
        pieces.append(str(s.constant))
    for f, sn, c in s.terms:
        fs = freq_str(f)
        factor = f"({fs})*" if s.derivative_factor else ""
        if sn:
            pieces.append(f"{sn}*{factor}sin(({fs})t)")
        if c:
            pieces.append(f"{c}*{factor}cos(({fs})t)")
    return " + ".join(pieces) if pieces else "0"


# -- specs and expansion ------------------------------------------------


@dataclass(frozen=True)
class DesiredStateSpec:
    """Desired state template: ``x_o = sum_j g[o][j] sin(w_j t) + gbar[o][j] cos(w_j t)``."""

    m: int
    sin_amps: tuple[tuple[Fraction, ...], ...]
    cos_amps: tuple[tuple[Fraction, ...], ...]

    def __post_init__(self):
        if self.m < 1:
            raise TrigAlgebraError("need at least one frequency variable")
        if len(self.sin_amps) != len(self.cos_amps):
            raise TrigAlgebraError("sin and cos amplitude lists differ in state dimension")
        for o, (g, gb) in enumerate(zip(self.sin_amps, self.cos_amps)):
            if len(g) != self.m or len(gb) != self.m:
                raise TrigAlgebraError(f"state {o}: amplitude rows must have length m={self.m}")
            if all(v == 0 for v in g) and all(v == 0 for v in gb):
                raise TrigAlgebraError(f"state {o} is identically zero")

    @classmethod
    def create(cls, m: int, sin_amps, cos_amps=None) -> "DesiredStateSpec":
        sin_rows = tuple(tuple(to_fraction(v) for v in row) for row in sin_amps)
        if cos_amps is None:
            cos_rows = tuple(tuple(ZERO for _ in row) for row in sin_rows)
        else:
            cos_rows = tuple(tuple(to_fraction(v) for v in row) for row in cos_amps)
        return cls(m, sin_rows, cos_rows)

    @property
    def n(self) -> int:
        return len(self.sin_amps)

    def scaled(self, nu: Sequence) -> "DesiredStateSpec":
        nu = [to_fraction(v) for v in nu]
        if len(nu) != self.n:
            raise TrigAlgebraError(f"scaling has length {len(nu)}, expected {self.n}")
        if any(v == 0 for v in nu):
            raise TrigAlgebraError("scaling entries must be nonzero")
        return DesiredStateSpec(
            self.m,
            tuple(tuple(v * k for v in row) for row, k in zip(self.sin_amps, nu)),
            tuple(tuple(v * k for v in row) for row, k in zip(self.cos_amps, nu)),
        )

    def state_sums(self) -> list[SinusoidSum]:
        out = []
        for g, gb in zip(self.sin_amps, self.cos_amps):
            terms = []
            for j in range(self.m):
                unit = tuple(1 if i == j else 0 for i in range(self.m))
                terms.append((unit, g[j], gb[j]))
            out.append(SinusoidSum.build(self.m, 0, terms))
        return out

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "sin": [[format_fraction(v) for v in row] for row in self.sin_amps],
            "cos": [[format_fraction(v) for v in row] for row in self.cos_amps],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "DesiredStateSpec":
        return cls.create(int(data["m"]), data["sin"], data.get("cos"))


@dataclass(frozen=True)
class BasisSpec:
    """Monomial basis ``phi_h(x) = coeff_h * prod_j x_j ** exponents[h][j]``."""

    coefficients: tuple[Fraction, ...]
    exponents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.coefficients) != len(self.exponents):
            raise TrigAlgebraError("one coefficient per basis element required")
        if not self.exponents:
            raise TrigAlgebraError("empty basis")
        n = len(self.exponents[0])
        for h, (coef, exps) in enumerate(zip(self.coefficients, self.exponents)):
            if len(exps) != n:
                raise TrigAlgebraError("all exponent rows must have the same length")
            if coef == 0:
                raise TrigAlgebraError(f"basis element {h} has a zero coefficient")
            if any(e < 0 for e in exps) or all(e == 0 for e in exps):
                raise TrigAlgebraError(f"basis element {h} must be a nonconstant monomial")

    @classmethod
    def monomials(cls, exponents, coefficients=None) -> "BasisSpec":
        exps = tuple(tuple(int(e) for e in row) for row in exponents)
        if coefficients is None:
            coefs = tuple(Fraction(1) for _ in exps)
        else:
            coefs = tuple(to_fraction(c) for c in coefficients)
        return cls(coefs, exps)

    @property
    def h(self) -> int:
        return len(self.exponents)

    @property
    def n(self) -> int:
        return len(self.exponents[0])

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Numeric basis values; ``x`` has shape (n, ...) and the result (h, ...)."""
        x = np.asarray(x, dtype=float)
        rows = []
        for coef, exps in zip(self.coefficients, self.exponents):
            v = float(coef) * np.ones(x.shape[1:])
            for j, e in enumerate(exps):
                if e:
                    v = v * x[j] ** e
            rows.append(v)
        return np.array(rows)

    def to_json(self) -> dict:
        return {
            "coefficients": [format_fraction(c) for c in self.coefficients],
            "exponents": [list(e) for e in self.exponents],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "BasisSpec":
        return cls.monomials(data["exponents"], data.get("coefficients"))


def expand_monomial(coef, exponents: Sequence[int], states: Sequence[SinusoidSum], m: int) -> SinusoidSum:
    result = SinusoidSum.const(m, coef)
    for x, e in zip(states, exponents):
        if e:
            result = multiply(result, x ** e)
    return result


def expand_basis(basis: BasisSpec, state: DesiredStateSpec) -> list[SinusoidSum]:
    """Expand every basis element along the desired state into canonical sinusoid sums."""
    if basis.n != state.n:
        raise TrigAlgebraError(
            f"basis acts on {basis.n} states but the desired state has {state.n}"
        )
    xs = state.state_sums()
    return [
        expand_monomial(coef, exps, xs, state.m)
        for coef, exps in zip(basis.coefficients, basis.exponents)
    ]


def expand_states(basis: BasisSpec, states: Sequence[SinusoidSum]) -> list[SinusoidSum]:
    """Like :func:`expand_basis` but for arbitrary (already built) state sums."""
    if basis.n != len(states):
        raise TrigAlgebraError(f"basis acts on {basis.n} states, got {len(states)}")
    m = states[0].m
    return [
        expand_monomial(coef, exps, states, m)
        for coef, exps in zip(basis.coefficients, basis.exponents)
    ]


def lcm_denominator(values: Iterable[Fraction]) -> int:
    out = 1
    for v in values:
        out = math.lcm(out, to_fraction(v).denominator)
    return out
