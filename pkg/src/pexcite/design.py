"""Excitation design: pick frequencies and scaling, invert the benchmark, certify PE.

All plan signals are stored as single-variable sinusoid sums whose frequency
keys are integer multiples of a base frequency ``base`` (rad/s), so equal
numeric frequencies merge exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import benchmark
from .conditions import ConditionSet, membership
from .rational import format_fraction, rank, to_fraction
from .trig import (
    BasisSpec,
    DesiredStateSpec,
    SinusoidSum,
    differentiate,
    evaluate,
    expand_states,
    lcm_denominator,
    resolve,
    substitute,
)

KINDS = ("flat_feedforward", "probing_noise", "none")

# x_d = [sin w1 t + sin w2 t, sin w3 t]
BENCHMARK_TEMPLATE = DesiredStateSpec.create(3, [[1, 1, 0], [0, 0, 1]])
BENCHMARK_BASIS = BasisSpec.monomials(benchmark.BASIS_EXPONENTS)

# the three feed-forward designs of the benchmark study
REFERENCE_SIGNALS = {
    "u11": ((1, 2, 3), (Fraction(1, 4), Fraction(1, 4))),
    "u12": ((Fraction(1, 2), 1, 2), (Fraction(1, 4), Fraction(1, 4))),
    "u13": ((Fraction(1, 2), 1, 2), (Fraction(1, 2), Fraction(1, 2))),
}


class DesignError(ValueError):
    pass


class CertificateError(DesignError):
    pass


Inversion = Callable[[Sequence[SinusoidSum], Fraction], Sequence[SinusoidSum]]


def benchmark_inversion(xbar_d: Sequence[SinusoidSum], base: Fraction) -> list[SinusoidSum]:
    """Flat output y = x1: x1 = y and x2 = y' + 2y from the first state equation."""
    y = xbar_d[0]
    return [y, resolve(differentiate(y), [base]) + y.scale(2)]


@dataclass(frozen=True)
class ExcitationPlan:
    omega_c: tuple[Fraction, ...]
    nu: tuple[Fraction, ...]
    base: Fraction
    multiples: tuple[int, ...]
    xbar_d: tuple[SinusoidSum, ...]
    xhat: tuple[SinusoidSum, ...] | None
    u_hat_kind: str = "flat_feedforward"

    def xhat_at(self, t) -> np.ndarray:
        if self.xhat is None:
            raise DesignError("plan has no internal trajectory")
        return np.array([evaluate(s, [float(self.base)], t) for s in self.xhat])

    def to_json(self) -> dict:
        return {
            "omega_c": [format_fraction(v) for v in self.omega_c],
            "nu": [format_fraction(v) for v in self.nu],
            "base_frequency": format_fraction(self.base),
            "multiples": list(self.multiples),
            "xbar_d": [s.to_json() for s in self.xbar_d],
            "xhat": None if self.xhat is None else [s.to_json() for s in self.xhat],
            "u_hat_kind": self.u_hat_kind,
        }


def frequency_base(omega_c: Sequence[Fraction]) -> tuple[Fraction, tuple[int, ...]]:
    """Base frequency ``1/L`` (L = lcm of denominators) and the integer multiples of omega_c."""
    den = lcm_denominator(omega_c)
    base = Fraction(1, den)
    return base, tuple(int(v * den) for v in omega_c)


def make_plan(
    state: DesiredStateSpec,
    omega_c: Sequence,
    nu: Sequence,
    cset: ConditionSet | None,
    kind: str = "flat_feedforward",
    inversion: Inversion | None = benchmark_inversion,
) -> ExcitationPlan:
    """Fix ``omega_c`` and the scaling ``nu`` and build ``diag(nu) x_d(omega_c)``."""
    if kind not in KINDS:
        raise DesignError(f"unknown excitation kind {kind!r}")
    w = tuple(to_fraction(v) for v in omega_c)
    scaling = tuple(to_fraction(v) for v in nu)
    if len(w) != state.m:
        raise DesignError(f"omega_c has length {len(w)}, template uses m={state.m}")
    if any(v == 0 for v in scaling):
        raise DesignError("scaling entries must be nonzero")
    if kind == "flat_feedforward":
        if cset is None:
            raise DesignError("a feed-forward plan needs the condition set")
        if not membership(w, cset):
            raise DesignError(f"omega_c = {[str(v) for v in w]} is not in Omega")
    base, multiples = frequency_base(w)
    xbar = tuple(substitute(s, multiples) for s in state.scaled(scaling).state_sums())
    xhat = None
    if kind == "flat_feedforward" and inversion is not None:
        xhat = tuple(inversion(xbar, base))
    return ExcitationPlan(w, scaling, base, multiples, xbar, xhat, kind)


@lru_cache(maxsize=1)
def benchmark_conditions():
    """Condition report for the benchmark basis and template (built once per process)."""
    from .conditions import conditions_from_expansion
    from .trig import expand_basis

    return conditions_from_expansion(expand_basis(BENCHMARK_BASIS, BENCHMARK_TEMPLATE))


def reference_plan(name: str, cset: ConditionSet | None = None) -> ExcitationPlan:
    if name not in REFERENCE_SIGNALS:
        raise DesignError(f"unknown signal {name!r}; expected one of {sorted(REFERENCE_SIGNALS)}")
    omega, nu = REFERENCE_SIGNALS[name]
    if cset is None:
        cset = benchmark_conditions().omega
    return make_plan(BENCHMARK_TEMPLATE, omega, nu, cset)


def internal_trajectory(plan: ExcitationPlan, inversion: Inversion | None = benchmark_inversion):
    """A-priori state trajectory from the flat inversion of ``plan.xbar_d``."""
    if inversion is None:
        raise DesignError("no inversion available for this model; supply one")
    return tuple(inversion(plan.xbar_d, plan.base))


# -- certificate ---------------------------------------------------------


@dataclass(frozen=True)
class PECertificate:
    """``sigma_hat = M dv_o/dt`` with ``v_o`` an orthogonal sin/cos family."""

    M: tuple[tuple[Fraction, ...], ...]
    v_o: tuple[tuple[Fraction, str], ...]  # (frequency in rad/s, "sin" | "cos")
    rank: int

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.M), len(self.v_o)

    @property
    def v_o_frequencies(self) -> list[Fraction]:
        return sorted({f for f, _ in self.v_o})

    @property
    def full_rank(self) -> bool:
        return self.rank == len(self.M)

    def sigma_hat(self, t) -> np.ndarray:
        """Evaluate ``M dv_o/dt`` at times ``t``."""
        t = np.asarray(t, dtype=float)
        dv = []
        for f, kind in self.v_o:
            w = float(f)
            dv.append(w * np.cos(w * t) if kind == "sin" else -w * np.sin(w * t))
        return np.array(self.M, dtype=float) @ np.array(dv)

    def to_json(self) -> dict:
        return {
            "M": [[format_fraction(v) for v in row] for row in self.M],
            "v_o": [{"freq": format_fraction(f), "kind": k} for f, k in self.v_o],
            "rank": self.rank,
        }


def build_certificate(plan: ExcitationPlan, basis: BasisSpec, strict: bool = True) -> PECertificate:
    if plan.xhat is None:
        raise CertificateError("plan has no internal trajectory")
    phi = expand_states(basis, plan.xhat)
    slots: set[tuple[int, str]] = set()
    for s in phi:
        for k, sn, c in s.terms:
            if sn:
                slots.add((k[0], "sin"))
            if c:
                slots.add((k[0], "cos"))
    if not slots:
        raise CertificateError("phi(xhat) is constant; v_o is empty")
    order = sorted(slots, key=lambda kc: (kc[0], kc[1] != "sin"))
    M = tuple(
        tuple(
            s.term_map.get((k,), (Fraction(0), Fraction(0)))[0 if kind == "sin" else 1]
            for k, kind in order
        )
        for s in phi
    )
    cert = PECertificate(M, tuple((k * plan.base, kind) for k, kind in order), rank(M))
    if strict and not cert.full_rank:
        raise CertificateError(f"M has rank {cert.rank} < {len(M)}; PE not certified")
    return cert


# -- feed-forward ----------------------------------------------------------


def pack_sum(s: SinusoidSum, base: Fraction) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Numeric arrays (rad/s, sin amps, cos amps, constant) of an unflagged single-variable sum."""
    if s.derivative_factor:
        s = resolve(s, [base])
    freqs = np.array([float(k[0] * base) for k, _, _ in s.terms])
    sins = np.array([float(v) for _, v, _ in s.terms])
    coss = np.array([float(v) for _, _, v in s.terms])
    return freqs, sins, coss, float(s.constant)


@dataclass(frozen=True)
class FlatFeedforward:
    """Benchmark feed-forward ``u1(t, theta1, theta2)``; ``u2`` is identically zero.

    Holds ``(x1_hat, x2_hat, d/dt x2_hat)`` packed as padded arrays of shape
    (3, K) for the compiled simulator.
    """

    freqs: np.ndarray
    sins: np.ndarray
    coss: np.ndarray
    consts: np.ndarray
    signals: tuple[SinusoidSum, ...] = field(repr=False, default=())

    @classmethod
    def from_plan(cls, plan: ExcitationPlan) -> "FlatFeedforward":
        if plan.xhat is None:
            raise DesignError("plan has no internal trajectory")
        x1, x2 = plan.xhat
        x2dot = resolve(differentiate(x2), [plan.base])
        packed = [pack_sum(s, plan.base) for s in (x1, x2, x2dot)]
        width = max(1, max(len(p[0]) for p in packed))

        def pad(i):
            out = np.zeros((3, width))
            for r, p in enumerate(packed):
                out[r, : len(p[i])] = p[i]
            return out

        consts = np.array([p[3] for p in packed])
        return cls(pad(0), pad(1), pad(2), consts, (x1, x2, x2dot))

    def reference(self, t) -> np.ndarray:
        """``[x1_hat, x2_hat, x2_hat']`` at times ``t``."""
        t = np.asarray(t, dtype=float)
        arg = self.freqs[:, :, None] * t.reshape(-1)[None, None, :]
        val = (self.sins[:, :, None] * np.sin(arg) + self.coss[:, :, None] * np.cos(arg)).sum(axis=1)
        val += self.consts[:, None]
        return val.reshape((3,) + t.shape)

    def u(self, t: float, theta1: Sequence[float], theta2: Sequence[float]) -> float:
        x1, x2, x2d = self.reference(float(t))
        w = np.array([theta1, theta2], dtype=float)
        return float(benchmark.feedforward(float(x1), float(x2), float(x2d), w))


def feedforward_u(plan: ExcitationPlan, theta1, theta2, t: float) -> tuple[float, float]:
    """``(u1_hat, u2_hat)`` for the current policy weights."""
    return FlatFeedforward.from_plan(plan).u(t, theta1, theta2), 0.0
