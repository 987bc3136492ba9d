"""Numerical persistence-of-excitation checks on sampled vector signals.

``lambda2`` is the smallest eigenvalue of the cumulative Gram integral
``int_{t0}^t sigma sigma^T``, ``lambda1`` the same over a sliding window of
length ``T``.  ``T1`` is the first time at which ``lambda2`` reaches the
threshold ``alpha1``; the signal is reported PE when ``lambda1`` computed
with window ``T1`` stays above ``alpha1`` over the whole trace.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

JACOBI_TOL = 1e-12
DEFAULT_ALPHA1 = 1e-4


class PEVerifyError(ValueError):
    pass


class NotReachedError(PEVerifyError):
    """``lambda2`` never reached the threshold within the trace."""


@dataclass(frozen=True)
class SignalTrace:
    t: np.ndarray
    samples: np.ndarray  # (N, h)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if t.ndim != 1 or len(t) != len(s):
            raise PEVerifyError("times and samples must have matching length")
        if len(t) == 0:
            raise PEVerifyError("empty trace")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
            raise PEVerifyError("trace contains non-finite values")
        if len(t) > 1:
            d = np.diff(t)
            if np.any(d <= 0) or np.max(np.abs(d - d[0])) > 1e-9 * max(1.0, abs(t[-1])):
                raise PEVerifyError("sample times must be uniformly spaced")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "samples", s)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    @property
    def h(self) -> int:
        return self.samples.shape[1]

    @classmethod
    def from_function(cls, fn, t_end: float, dt: float, t0: float = 0.0) -> "SignalTrace":
        n = int(round((t_end - t0) / dt))
        t = t0 + dt * np.arange(n + 1)
        return cls(t, np.asarray(fn(t), dtype=float).reshape(-1, n + 1).T)


# -- eigenvalues -------------------------------------------------------------


@njit(cache=True)
def _jacobi_batch(A, tol, max_sweeps):
    n, h, _ = A.shape
    ev = np.empty((n, h))
    for b in range(n):
        a = A[b]
        scale = 0.0
        for i in range(h):
            for j in range(h):
                scale = max(scale, abs(a[i, j]))
        if scale == 0.0:
            scale = 1.0
        for _ in range(max_sweeps):
            off = 0.0
            for p in range(h - 1):
                for q in range(p + 1, h):
                    off = max(off, abs(a[p, q]))
            if off <= tol * scale:
                break
            for p in range(h - 1):
                for q in range(p + 1, h):
                    apq = a[p, q]
                    if abs(apq) <= 1e-300:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    at = abs(theta)
                    if at > 1e150:
                        tt = 0.5 / at
                    else:
                        tt = 1.0 / (at + math.sqrt(at * at + 1.0))
                    if theta < 0:
                        tt = -tt
                    c = 1.0 / math.sqrt(tt * tt + 1.0)
                    s = tt * c
                    # A <- J^T A J with J the (p, q) rotation
                    for k in range(h):
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = c * akp - s * akq
                        a[k, q] = s * akp + c * akq
                    for k in range(h):
                        apk = a[p, k]
                        aqk = a[q, k]
                        a[p, k] = c * apk - s * aqk
                        a[q, k] = s * apk + c * aqk
                    a[p, q] = 0.0
                    a[q, p] = 0.0
        for i in range(h):
            ev[b, i] = a[i, i]
    return ev


def jacobi_eigvals(A: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues (ascending) of a batch of symmetric matrices ``(..., h, h)``.

    Cyclic Jacobi rotations per matrix; sweeps stop once
    ``max |offdiag| <= tol * max |A|``.
    """
    A = np.asarray(A, dtype=float)
    shape = A.shape
    if A.ndim < 2 or shape[-1] != shape[-2]:
        raise PEVerifyError("expected square matrices")
    h = shape[-1]
    A = A.reshape(-1, h, h)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    ev = np.sort(_jacobi_batch(np.ascontiguousarray(A), tol, max_sweeps), axis=1)
    return ev.reshape(shape[:-1])


def min_eig(A: np.ndarray) -> np.ndarray:
    return jacobi_eigvals(A)[..., 0]


# -- Gram integrals ----------------------------------------------------------


def cumulative_gram(trace: SignalTrace) -> np.ndarray:
    """Trapezoidal ``int_{t0}^{t_k} sigma sigma^T`` for every sample ``k``, shape (N, h, h)."""
    s = trace.samples
    outer = s[:, :, None] * s[:, None, :]
    G = np.zeros_like(outer)
    if len(s) > 1:
        G[1:] = np.cumsum(0.5 * trace.dt * (outer[1:] + outer[:-1]), axis=0)
    return G


def gram_at(trace: SignalTrace, t: float) -> np.ndarray:
    """Gram integral up to an arbitrary time, linear interpolation on the last partial step."""
    t_rel = float(t) - float(trace.t[0])
    if t_rel < 0 or t > trace.t[-1] + 1e-12:
        raise PEVerifyError("time outside the trace")
    G = cumulative_gram(trace)
    k = min(int(math.floor(t_rel / trace.dt)), len(trace.t) - 1) if len(trace.t) > 1 else 0
    frac = t_rel - k * trace.dt if len(trace.t) > 1 else 0.0
    if frac <= 0 or k + 1 >= len(trace.t):
        return G[k]
    a = trace.samples[k]
    b = a + (trace.samples[k + 1] - a) * frac / trace.dt
    return G[k] + 0.5 * frac * (np.outer(a, a) + np.outer(b, b))


def gram_from_upper(upper: np.ndarray, h: int) -> np.ndarray:
    """Expand row-major upper-triangle vectors ``(N, h(h+1)/2)`` to full matrices."""
    upper = np.asarray(upper, dtype=float)
    iu = np.triu_indices(h)
    G = np.zeros((len(upper), h, h))
    G[:, iu[0], iu[1]] = upper
    G[:, iu[1], iu[0]] = upper
    return G


def lambda2_trace(trace: SignalTrace, gram: np.ndarray | None = None) -> np.ndarray:
    """``lambda_min`` of the cumulative Gram integral at every sample."""
    if trace is not None and len(trace.t) < 2 and gram is None:
        raise PEVerifyError("need at least two samples")
    G = cumulative_gram(trace) if gram is None else gram
    return min_eig(G)


def find_T1(t: np.ndarray, lambda2: np.ndarray, alpha1: float = DEFAULT_ALPHA1) -> float:
    """Smallest sampled ``t - t0`` with ``lambda2 >= alpha1``."""
    hit = np.nonzero(np.asarray(lambda2) >= alpha1)[0]
    if len(hit) == 0:
        raise NotReachedError(
            f"lambda2 stays below {alpha1:g} up to t - t0 = {t[-1] - t[0]:.6g} s"
        )
    return float(t[hit[0]] - t[0])


def window_steps(trace: SignalTrace, T: float) -> int:
    if not T > 0:
        raise PEVerifyError("window must be positive")
    w = T / trace.dt
    k = int(round(w))
    if abs(w - k) > 1e-6 * max(1.0, w):
        raise PEVerifyError("window must be a multiple of the sample step")
    if k >= len(trace.t):
        raise PEVerifyError(f"window {T:g} s longer than the trace")
    return k


def lambda1_trace(
    trace: SignalTrace, T: float, gram: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """``(t, lambda_min(int_t^{t+T} sigma sigma^T))`` for ``t`` in ``[t0, t_end - T]``."""
    k = window_steps(trace, T)
    G = cumulative_gram(trace) if gram is None else gram
    return trace.t[: len(trace.t) - k], min_eig(G[k:] - G[:-k])


# -- degree of PE ------------------------------------------------------------


def unit_directions(h: int, n: int = 1000) -> np.ndarray:
    """Deterministic quasi-uniform unit vectors; antipodal pairs are redundant for ``|s.e|``."""
    if h == 1:
        return np.ones((1, 1))
    if h == 2:
        a = np.pi * np.arange(n) / n
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    if h == 3:
        # Fibonacci lattice on the sphere
        k = np.arange(n) + 0.5
        z = 1.0 - 2.0 * k / n
        r = np.sqrt(1.0 - z * z)
        ang = np.pi * (3.0 - math.sqrt(5.0)) * k
        return np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=1)
    from scipy.stats import norm, qmc

    u = qmc.Halton(d=h, scramble=False).random(n + 1)[1:]
    v = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def estimate_alphaI(
    trace: SignalTrace, T: float, n_directions: int = 1000, chunk: int = 50
) -> float:
    """``min_{t, iota} (1/T) int_t^{t+T} |sigma . iota|`` over a fixed set of directions."""
    k = window_steps(trace, T)
    dirs = unit_directions(trace.h, n_directions)
    best = math.inf
    for a in range(0, len(dirs), chunk):
        proj = np.abs(trace.samples @ dirs[a : a + chunk].T)  # (N, c)
        c = np.zeros_like(proj)
        c[1:] = np.cumsum(0.5 * trace.dt * (proj[1:] + proj[:-1]), axis=0)
        best = min(best, float(np.min(c[k:] - c[:-k])) / (k * trace.dt))
    return max(best, 0.0)


# -- report ------------------------------------------------------------------


def min_window(
    trace: SignalTrace,
    alpha1: float = DEFAULT_ALPHA1,
    gram: np.ndarray | None = None,
    max_window: float | None = None,
    stride: int = 10,
) -> float | None:
    """Smallest window ``T`` (a multiple of the sample step) with ``lambda1 >= alpha1``
    for every start time of the trace, or None if no ``T <= max_window`` works.

    The passing predicate is monotone in ``T`` (window Gram increments are
    positive semidefinite), so a bisection over the step count applies.  The
    search screens start times at ``stride`` and confirms the result on all.
    """
    G = cumulative_gram(trace) if gram is None else gram
    n = len(G)
    hi = n - 1 if max_window is None else min(n - 1, int(math.floor(max_window / trace.dt + 1e-9)))
    if hi < 1:
        return None

    def passes(k: int, step: int) -> bool:
        starts = np.arange(0, n - k, step)
        return bool(np.min(min_eig(G[starts + k] - G[starts])) >= alpha1)

    # bisection over the coarse screen, then walk up until every start passes
    if not passes(hi, 1):
        return None
    lo = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if passes(mid, stride):
            hi = mid
        else:
            lo = mid
    top = n - 1 if max_window is None else min(n - 1, int(math.floor(max_window / trace.dt + 1e-9)))
    while not passes(hi, 1):
        lo, hi = hi, min(top, hi + max(1, (hi + 9) // 10))
        if lo == top:
            return None
    # tighten below the coarse answer with the full start set
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if passes(mid, 1):
            hi = mid
        else:
            lo = mid
    return hi * trace.dt


@dataclass
class PEReport:
    lambda2: np.ndarray = field(repr=False)
    T1: float | None
    lambda1_t: np.ndarray | None = field(repr=False)
    lambda1: np.ndarray | None = field(repr=False)
    alpha1_threshold: float
    verdict: bool
    alphaI_estimate: float | None
    verified_horizon: float
    lambda2_final: float
    window: float | None = None  # window of the lambda1 series
    window_source: str = "T1"  # "T1", "given" or "search"

    @property
    def min_lambda1(self) -> float | None:
        return None if self.lambda1 is None or len(self.lambda1) == 0 else float(np.min(self.lambda1))

    def to_json(self) -> dict:
        return {
            "T1_s": self.T1,
            "window_s": self.window,
            "window_source": self.window_source,
            "alpha1": self.alpha1_threshold,
            "verdict": "PE" if self.verdict else "not PE",
            "pe": self.verdict,
            "min_lambda1": self.min_lambda1,
            "lambda2_final": self.lambda2_final,
            "alphaI_estimate": self.alphaI_estimate,
            "verified_horizon_s": self.verified_horizon,
        }


def verify(
    trace: SignalTrace,
    alpha1: float = DEFAULT_ALPHA1,
    T: float | None = None,
    gram: np.ndarray | None = None,
    alphaI: bool = False,
    search: bool = True,
    max_window: float | None = None,
) -> PEReport:
    """Sliding-window PE test.

    The window is ``T`` if given, else ``T1`` from the cumulative eigenvalue.
    When the ``T1`` window fails somewhere along the trace and ``search`` is
    set, the smallest window that passes everywhere (up to ``max_window``,
    default a quarter of the trace) is used instead; the verdict is negative
    only if no such window exists.
    """
    G = cumulative_gram(trace) if gram is None else gram
    lam2 = lambda2_trace(trace, G)
    horizon = float(trace.t[-1] - trace.t[0])
    try:
        T1 = find_T1(trace.t, lam2, alpha1)
    except NotReachedError:
        T1 = None

    def fits(w):
        return w is not None and w > 0 and int(round(w / trace.dt)) < len(trace.t)

    source = "given" if T is not None else "T1"
    window = T if T is not None else T1
    lam = None
    if fits(window):
        window = int(round(window / trace.dt)) * trace.dt
        lam = lambda1_trace(trace, window, G)
    if T is None and search and (lam is None or np.min(lam[1]) < alpha1):
        w = min_window(trace, alpha1, G, horizon / 4 if max_window is None else max_window)
        if w is not None:
            window, source = w, "search"
            lam = lambda1_trace(trace, window, G)
    if lam is None:
        return PEReport(lam2, T1, None, None, alpha1, False, None, horizon, float(lam2[-1]),
                        None, source)
    t1, lam1 = lam
    verdict = bool(np.min(lam1) >= alpha1)
    aI = estimate_alphaI(trace, window) if alphaI else None
    return PEReport(lam2, T1, t1, lam1, alpha1, verdict, aI, horizon - window, float(lam2[-1]),
                    window, source)


# -- CSV -----------------------------------------------------------------------


def read_signal_csv(path: str | Path, columns: list[str] | None = None) -> SignalTrace:
    """Load ``t`` plus signal columns; by default every column other than ``t``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PEVerifyError(f"{path}: empty file")
    head = [c.strip() for c in rows[0]]
    if "t" not in head:
        raise PEVerifyError(f"{path}: missing 't' column")
    cols = columns or [c for c in head if c != "t"]
    missing = [c for c in cols if c not in head]
    if missing:
        raise PEVerifyError(f"{path}: missing columns {missing}")
    data = np.array(rows[1:], dtype=float)
    if data.size == 0:
        raise PEVerifyError(f"{path}: no samples")
    return SignalTrace(data[:, head.index("t")], data[:, [head.index(c) for c in cols]])


def write_series_csv(path: str | Path, t: np.ndarray, series: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *series])
        cols = [np.asarray(v) for v in series.values()]
        for k in range(len(t)):
            w.writerow([repr(float(t[k]))] + [repr(float(c[k])) for c in cols])
