"""Online policy iteration for the benchmark game with excitation injection.

The state is integrated with classical fixed-step RK4.  Critic weights follow

    theta_i' = -eta_i * sigma_bar * e_i,   e_i = theta_i . sigma_bar + Q_i + sum_j R_ij mu_j^2

with the model-compensated regressor ``sigma_bar = dphi/dx (f + g mu)``.  The
weight ODE is stiff (``eta |sigma|^2`` reaches ``eta_v``), so instead of an
explicit stage scheme each step applies the fourth-order Magnus exponential
of the affine system ``[theta; 1]' = B(t) [theta; 1]`` with regressors at the
two Gauss points (states from cubic Hermite interpolation of the RK4 step),
split into substeps wherever ``eta |sigma|^2 dt`` is large.
Its symmetric part is negative semidefinite and the commutator term is skew,
so the step never increases the distance to the evaluation target.

Policy evaluation ends when ``|theta_i(t - tau) - theta_i(t)| < eval_threshold``
for both players (after at least ``tau`` in the phase); then both policies
are re-bound to the current critics.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from . import benchmark as bm
from .design import ExcitationPlan, FlatFeedforward

log = logging.getLogger(__name__)

# sigma_max^2 implied by the published learning rates eta_v / sigma_max^2
REFERENCE_SIGMA_MAX_SQ = {"noise": 21.0, "u11": 274.0, "u12": 125.0, "u13": 1670.0}

STATUS_HORIZON, STATUS_CONVERGED, STATUS_DIVERGED = 0, 1, 2
EVENT_IMPROVEMENT = 1

DIVERGENCE_LIMIT = 1e3


class SimulationError(RuntimeError):
    pass


class DivergenceError(SimulationError):
    pass


@dataclass(frozen=True)
class GameSpec:
    """The two-player benchmark; numeric data only, dynamics live in :mod:`benchmark`."""

    q_scale: tuple[float, ...] = tuple(bm.Q_SCALE)
    R: tuple[tuple[float, ...], ...] = tuple(map(tuple, bm.R))
    theta0: tuple[tuple[float, ...], ...] = tuple(map(tuple, bm.THETA0))
    theta_star: tuple[tuple[float, ...], ...] = tuple(map(tuple, bm.THETA_STAR))
    basis_exponents: tuple[tuple[int, ...], ...] = bm.BASIS_EXPONENTS

    n: int = 2
    N: int = 2

    def f(self, x) -> np.ndarray:
        return np.array(bm.drift(float(x[0]), float(x[1])))

    def g(self, x) -> np.ndarray:
        return np.array([[0.0, 0.0], [bm.g1(float(x[0])), bm.g2(float(x[0]))]])

    def Q(self, i: int, x) -> float:
        return self.q_scale[i] * float(np.dot(x, x))

    def grad_phi(self, x) -> np.ndarray:
        x1, x2 = float(x[0]), float(x[1])
        return np.array([[2 * x1, 0.0], [x2, x1], [0.0, 2 * x2]])

    def policy(self, i: int, x, theta_i) -> float:
        """``mu_i = -1/2 R_ii^-1 g_i^T (dphi/dx)^T theta_i``."""
        gi = self.g(x)[:, i]
        return float(-0.5 / self.R[i][i] * gi @ self.grad_phi(x).T @ np.asarray(theta_i, float))

    def sigma_bar(self, x, weights) -> np.ndarray:
        mu = [self.policy(i, x, weights[i]) for i in range(self.N)]
        return self.grad_phi(x) @ (self.f(x) + self.g(x) @ np.array(mu))

    def residual(self, i: int, x, theta_i, weights) -> float:
        """Bellman residual ``e_i`` of critic ``theta_i`` for the policies ``weights``."""
        mu = np.array([self.policy(j, x, weights[j]) for j in range(self.N)])
        cost = self.Q(i, x) + float(np.dot(self.R[i], mu**2))
        return float(np.dot(theta_i, self.sigma_bar(x, weights))) + cost


def policy(x, theta_i, game: GameSpec, i: int) -> float:
    return game.policy(i, x, theta_i)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    eta_v: float = 1e4
    sigma_max_sq: float | None = None  # None: measure from a pre-run
    tau: float = 40.0
    eval_threshold: float = 1e-3
    conv_threshold: float = 1e-3
    horizon: float = 4000.0
    noise_amplitude: float | None = None  # None: calibrate for noise runs
    noise_seed: int = 0
    record_every: int = 10
    stop_on_convergence: bool = True
    learning: bool = True
    x0: tuple[float, float] | None = None  # None: xhat(0) for feed-forward, origin otherwise
    noise_target_sigma_max_sq: float = 21.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.eval_threshold <= 0 or self.conv_threshold <= 0:
            raise ValueError("thresholds must be positive")
        steps = self.tau / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError("tau must be a multiple of dt")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def tau_steps(self) -> int:
        return int(round(self.tau / self.dt))


@njit(cache=True)
def _eval_sum(freqs, sins, coss, const, row, t):
    v = const[row]
    for k in range(freqs.shape[1]):
        w = freqs[row, k]
        if sins[row, k] != 0.0:
            v += sins[row, k] * math.sin(w * t)
        if coss[row, k] != 0.0:
            v += coss[row, k] * math.cos(w * t)
    return v


@njit(cache=True)
def _uhat(use_ff, freqs, sins, coss, const, w, noise_u, t):
    if use_ff:
        x1h = _eval_sum(freqs, sins, coss, const, 0, t)
        x2h = _eval_sum(freqs, sins, coss, const, 1, t)
        x2d = _eval_sum(freqs, sins, coss, const, 2, t)
        return bm.feedforward(x1h, x2h, x2d, w) + noise_u
    return noise_u


@njit(cache=True)
def _rhs(x1, x2, w, u1hat):
    f1, f2 = bm.drift(x1, x2)
    mu1, mu2 = bm.policies(x1, x2, w)
    return f1, f2 + bm.g1(x1) * (mu1 + u1hat) + bm.g2(x1) * mu2


@njit(cache=True)
def _gram_acc(G, s, scale):
    k = 0
    for a in range(3):
        for b in range(a, 3):
            G[k] += scale * s[a] * s[b]
            k += 1


# Pade coefficients with the 1-norm bounds below which no squaring is needed
_PADE3 = np.array([120.0, 60.0, 12.0, 1.0])
_PADE5 = np.array([30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0])
_PADE7 = np.array([17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0])
_THETA3 = 1.495585217958292e-2
_THETA5 = 2.539398330063230e-1
_THETA7 = 9.504178996162932e-1
_GAUSS_LO = 0.5 - math.sqrt(3.0) / 6.0
_GAUSS_HI = 0.5 + math.sqrt(3.0) / 6.0
_MAGNUS_C = math.sqrt(3.0) / 12.0
MAGNUS_STIFFNESS = 0.5
MAX_SUBSTEPS = 256


@njit(cache=True)
def _mm4(A, B, C):
    for i in range(4):
        for j in range(4):
            v = 0.0
            for k in range(4):
                v += A[i, k] * B[k, j]
            C[i, j] = v


@njit(cache=True)
def _solve4(M, R):
    """Solve ``M X = R`` in place (4 x 4, partial pivoting); returns R."""
    n = 4
    for c in range(n):
        p = c
        for r in range(c + 1, n):
            if abs(M[r, c]) > abs(M[p, c]):
                p = r
        if p != c:
            for k in range(n):
                M[c, k], M[p, k] = M[p, k], M[c, k]
                R[c, k], R[p, k] = R[p, k], R[c, k]
        for r in range(c + 1, n):
            f = M[r, c] / M[c, c]
            for k in range(c, n):
                M[r, k] -= f * M[c, k]
            for k in range(n):
                R[r, k] -= f * R[c, k]
    for c in range(n - 1, -1, -1):
        for k in range(n):
            v = R[c, k]
            for j in range(c + 1, n):
                v -= M[c, j] * R[j, k]
            R[c, k] = v / M[c, c]
    return R


@njit(cache=True)
def _expm4(A, W):
    """Matrix exponential by scaling and squaring with a Pade(3, 5 or 7) approximant.

    ``W`` is an (8, 4, 4) workspace; the result is returned in ``W[0]``.
    """
    norm = 0.0
    for j in range(4):
        col = 0.0
        for i in range(4):
            col += abs(A[i, j])
        norm = max(norm, col)
    sq = 0
    if norm <= _THETA3:
        b = _PADE3
    elif norm <= _THETA5:
        b = _PADE5
    else:
        b = _PADE7
        if norm > _THETA7:
            sq = int(math.ceil(math.log2(norm / _THETA7)))
    E, X, X2, X4, X6, U, V, T = W[0], W[1], W[2], W[3], W[4], W[5], W[6], W[7]
    scale = 0.5**sq
    for i in range(4):
        for j in range(4):
            X[i, j] = A[i, j] * scale
    _mm4(X, X, X2)
    order = len(b) - 1
    if order >= 5:
        _mm4(X2, X2, X4)
    if order == 7:
        _mm4(X4, X2, X6)
    for i in range(4):
        for j in range(4):
            odd = b[3] * X2[i, j]
            even = b[2] * X2[i, j]
            if order >= 5:
                odd += b[5] * X4[i, j]
                even += b[4] * X4[i, j]
            if order == 7:
                odd += b[7] * X6[i, j]
                even += b[6] * X6[i, j]
            if i == j:
                odd += b[1]
                even += b[0]
            T[i, j] = odd
            V[i, j] = even
    _mm4(X, T, U)
    for i in range(4):
        for j in range(4):
            T[i, j] = V[i, j] - U[i, j]
            E[i, j] = V[i, j] + U[i, j]
    _solve4(T, E)
    for _ in range(sq):
        _mm4(E, E, T)
        E[:, :] = T
    return E


@njit(cache=True)
def _hermite(x0, y, k0, k1, dt, c):
    """Cubic Hermite interpolant of one step at fraction ``c``."""
    c2 = c * c
    c3 = c2 * c
    return ((2.0 * c3 - 3.0 * c2 + 1.0) * x0 + (c3 - 2.0 * c2 + c) * dt * k0
            + (3.0 * c2 - 2.0 * c3) * y + (c3 - c2) * dt * k1)


@njit(cache=True)
def _generator(x1, x2, w, eta_i, i, B, s):
    """``B = [[-eta s s^T, -eta s r], [0, 0]]`` for player ``i`` at state ``x``."""
    m1, m2 = bm.policies(x1, x2, w)
    c1, c2 = bm.closed_loop(x1, x2, w)
    bm.basis_rate(x1, x2, c1, c2, s)
    r = bm.running_cost(x1, x2, m1, m2, i)
    for a in range(3):
        for b in range(3):
            B[a, b] = -eta_i * s[a] * s[b]
        B[a, 3] = -eta_i * s[a] * r
        B[3, a] = 0.0
    B[3, 3] = 0.0


@njit(cache=True)
def _magnus_step(theta, i, xa1, xa2, xb1, xb2, w, eta_i, dt, W):
    """Advance critic ``i`` by one fourth-order Magnus step.

    ``W`` is a (12, 4, 4) workspace: generators, exponent, then the
    exponential's own scratch.
    """
    B1, B2, Om = W[8], W[9], W[10]
    s = W[11, 0, :3]
    _generator(xa1, xa2, w, eta_i, i, B1, s)
    _generator(xb1, xb2, w, eta_i, i, B2, s)
    if B1[0, 0] == 0.0 and B1[1, 1] == 0.0 and B1[2, 2] == 0.0 \
            and B2[0, 0] == 0.0 and B2[1, 1] == 0.0 and B2[2, 2] == 0.0:
        return
    c = _MAGNUS_C * dt * dt
    for a in range(4):
        for b in range(4):
            v = 0.0
            for k in range(4):
                v += B2[a, k] * B1[k, b] - B1[a, k] * B2[k, b]
            Om[a, b] = 0.5 * dt * (B1[a, b] + B2[a, b]) + c * v
    E = _expm4(Om, W[:8])
    z0, z1, z2 = theta[i, 0], theta[i, 1], theta[i, 2]
    for a in range(3):
        theta[i, a] = E[a, 0] * z0 + E[a, 1] * z1 + E[a, 2] * z2 + E[a, 3]


@njit(cache=True)
def _kernel(
    x0, theta0, theta_star, w0, dt, n_steps, eta, learning, tau_steps, eval_thr, conv_thr,
    stop_on_conv, use_ff, freqs, sins, coss, const, noise, record_every,
    rec_t, rec_x, rec_theta, rec_u, rec_sig, rec_raw, rec_gram, rec_gram_raw, rec_res,
    events, conv_step,
):
    x1 = x0[0]
    x2 = x0[1]
    theta = theta0.copy()
    w = w0.copy()
    n_rec_max = rec_t.shape[0]
    hist = np.empty((tau_steps + 1, 2, 3))
    hist[0] = theta
    phase_start = 0
    n_events = 0
    G = np.zeros(6)
    Graw = np.zeros(6)
    sig = np.zeros(3)
    sig_next = np.zeros(3)
    raw = np.zeros(3)
    raw_next = np.zeros(3)
    smid = np.zeros(3)
    W = np.zeros((12, 4, 4))
    status = 0
    n_rec = 0
    have_noise = noise.shape[0] > 0
    for i in range(2):
        conv_step[i] = -1

    for n in range(n_steps + 1):
        t = n * dt
        nu = noise[n] if (have_noise and n < noise.shape[0]) else 0.0
        u1h = _uhat(use_ff, freqs, sins, coss, const, w, nu, t)
        mu1, mu2 = bm.policies(x1, x2, w)
        c1, c2 = bm.closed_loop(x1, x2, w)
        bm.basis_rate(x1, x2, c1, c2, sig)
        d1, d2 = _rhs(x1, x2, w, u1h)
        bm.basis_rate(x1, x2, d1, d2, raw)

        err0 = 0.0
        err1 = 0.0
        for k in range(3):
            err0 += (theta[0, k] - theta_star[0, k]) ** 2
            err1 += (theta[1, k] - theta_star[1, k]) ** 2
        err0 = math.sqrt(err0)
        err1 = math.sqrt(err1)
        if conv_step[0] < 0 and err0 < conv_thr:
            conv_step[0] = n
        if conv_step[1] < 0 and err1 < conv_thr:
            conv_step[1] = n

        if n % record_every == 0 and n_rec < n_rec_max:
            rec_t[n_rec] = t
            rec_x[n_rec, 0] = x1
            rec_x[n_rec, 1] = x2
            rec_theta[n_rec] = theta
            rec_u[n_rec, 0] = mu1 + u1h
            rec_u[n_rec, 1] = mu2
            rec_u[n_rec, 2] = u1h
            rec_sig[n_rec] = sig
            rec_raw[n_rec] = raw
            rec_gram[n_rec] = G
            rec_gram_raw[n_rec] = Graw
            for i in range(2):
                rec_res[n_rec, i] = (
                    theta[i, 0] * sig[0] + theta[i, 1] * sig[1] + theta[i, 2] * sig[2]
                    + bm.running_cost(x1, x2, mu1, mu2, i)
                )
            n_rec += 1

        if stop_on_conv and conv_step[0] >= 0 and conv_step[1] >= 0:
            status = 1
            break
        if n == n_steps:
            break

        # RK4 on the state, input held over the step for noise, re-evaluated for feed-forward
        th = t + 0.5 * dt
        u_mid = _uhat(use_ff, freqs, sins, coss, const, w, nu, th)
        u_end = _uhat(use_ff, freqs, sins, coss, const, w, nu, t + dt)
        k1a, k1b = d1, d2
        k2a, k2b = _rhs(x1 + 0.5 * dt * k1a, x2 + 0.5 * dt * k1b, w, u_mid)
        k3a, k3b = _rhs(x1 + 0.5 * dt * k2a, x2 + 0.5 * dt * k2b, w, u_mid)
        k4a, k4b = _rhs(x1 + dt * k3a, x2 + dt * k3b, w, u_end)
        y1 = x1 + dt / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
        y2 = x2 + dt / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)

        e1, e2 = _rhs(y1, y2, w, u_end)
        if learning:
            # substeps keep eta |sigma|^2 h below MAGNUS_STIFFNESS, where the series is accurate
            xm1 = _hermite(x1, y1, k1a, e1, dt, 0.5)
            xm2 = _hermite(x2, y2, k1b, e2, dt, 0.5)
            cm1, cm2 = bm.closed_loop(xm1, xm2, w)
            bm.basis_rate(xm1, xm2, cm1, cm2, smid)
            z = max(eta[0], eta[1]) * (smid[0] ** 2 + smid[1] ** 2 + smid[2] ** 2) * dt
            n_sub = min(MAX_SUBSTEPS, max(1, int(math.ceil(z / MAGNUS_STIFFNESS))))
            h = dt / n_sub
            for j in range(n_sub):
                ca = (j + _GAUSS_LO) / n_sub
                cb = (j + _GAUSS_HI) / n_sub
                xa1 = _hermite(x1, y1, k1a, e1, dt, ca)
                xa2 = _hermite(x2, y2, k1b, e2, dt, ca)
                xb1 = _hermite(x1, y1, k1a, e1, dt, cb)
                xb2 = _hermite(x2, y2, k1b, e2, dt, cb)
                for i in range(2):
                    _magnus_step(theta, i, xa1, xa2, xb1, xb2, w, eta[i], h, W)

        # trapezoidal Gram accumulation at full resolution
        cn1, cn2 = bm.closed_loop(y1, y2, w)
        bm.basis_rate(y1, y2, cn1, cn2, sig_next)
        bm.basis_rate(y1, y2, e1, e2, raw_next)
        _gram_acc(G, sig, 0.5 * dt)
        _gram_acc(G, sig_next, 0.5 * dt)
        _gram_acc(Graw, raw, 0.5 * dt)
        _gram_acc(Graw, raw_next, 0.5 * dt)

        x1 = y1
        x2 = y2
        if not (abs(x1) < 1e3 and abs(x2) < 1e3):
            status = 2
            events[n_events, 0] = (n + 1) * dt
            events[n_events, 1] = -1.0
            n_events += 1
            break

        # policy-evaluation stall test and synchronous improvement
        slot = (n + 1) % (tau_steps + 1)
        hist[slot] = theta
        if learning and (n + 1) - phase_start >= tau_steps:
            old = hist[(n + 1 - tau_steps) % (tau_steps + 1)]
            stalled = True
            for i in range(2):
                d = 0.0
                for k in range(3):
                    d += (theta[i, k] - old[i, k]) ** 2
                if math.sqrt(d) >= eval_thr:
                    stalled = False
            if stalled:
                w[:, :] = theta
                phase_start = n + 1
                if n_events < events.shape[0]:
                    events[n_events, 0] = (n + 1) * dt
                    events[n_events, 1] = 1.0
                    n_events += 1
    return status, n_rec, n_events, x1, x2


@dataclass
class WeightTrace:
    """Recorded run: samples every ``record_every`` integrator steps."""

    signal: str
    t: np.ndarray
    x: np.ndarray
    theta: np.ndarray  # (n, 2, 3)
    u: np.ndarray  # (n, 3): u1, u2, uhat1
    sigma_bar: np.ndarray
    sigma_raw: np.ndarray
    gram: np.ndarray  # cumulative trapezoid Gram of sigma_bar, upper triangle (n, 6)
    gram_raw: np.ndarray
    residual: np.ndarray  # (n, 2)
    events: list[tuple[float, str]]
    status: int
    conv_times: tuple[float | None, float | None]
    eta: tuple[float, float]
    sigma_max_sq: float
    noise_amplitude: float | None
    theta_star: np.ndarray = field(repr=False, default=None)

    @property
    def err(self) -> np.ndarray:
        return np.linalg.norm(self.theta - self.theta_star[None], axis=2)

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED

    @property
    def conv_time(self) -> float | None:
        """Convergence time of player 2 (``|theta_2 - theta_2*| < conv_threshold``)."""
        return self.conv_times[1]

    def summary(self) -> dict:
        return {
            "signal": self.signal,
            "conv_time_s": self.conv_time,
            "conv_times_s": list(self.conv_times),
            "converged": self.converged,
            "status": ["horizon", "converged", "diverged"][self.status],
            "eta": list(self.eta),
            "sigma_max_sq": self.sigma_max_sq,
            "noise_amplitude": self.noise_amplitude,
            "events": [{"t": t, "kind": k} for t, k in self.events],
        }


def _feedforward_arrays(plan: ExcitationPlan | None):
    if plan is None or plan.u_hat_kind != "flat_feedforward":
        z = np.zeros((3, 1))
        return False, z, z, z, np.zeros(3)
    ff = FlatFeedforward.from_plan(plan)
    return True, ff.freqs, ff.sins, ff.coss, ff.consts


def noise_samples(cfg: SimConfig, amplitude: float, n: int | None = None) -> np.ndarray:
    """Zero-mean Gaussian sample-and-hold values, one per integrator step."""
    n = cfg.n_steps + 1 if n is None else n
    rng = np.random.default_rng(cfg.noise_seed)
    return amplitude * rng.standard_normal(n)


def probing_noise(cfg: SimConfig, t: float, amplitude: float | None = None) -> float:
    """Noise input held at step ``floor(t / dt)``; deterministic per seed."""
    amp = cfg.noise_amplitude if amplitude is None else amplitude
    if not amp:
        return 0.0
    k = int(math.floor(t / cfg.dt + 1e-9))
    return float(noise_samples(cfg, amp, k + 1)[k])


def _run(
    game: GameSpec,
    plan: ExcitationPlan | None,
    cfg: SimConfig,
    eta: tuple[float, float],
    noise: np.ndarray,
    signal: str,
    sigma_max_sq: float,
    noise_amplitude: float | None,
    x0=None,
    theta0=None,
    policy_weights=None,
) -> WeightTrace:
    use_ff, freqs, sins, coss, const = _feedforward_arrays(plan)
    if x0 is None:
        x0 = cfg.x0
    if x0 is None:
        x0 = plan.xhat_at(0.0) if use_ff else np.zeros(2)
    theta0 = np.array(game.theta0 if theta0 is None else theta0, dtype=float)
    w0 = theta0.copy() if policy_weights is None else np.array(policy_weights, dtype=float)
    theta_star = np.array(game.theta_star, dtype=float)
    n_steps = cfg.n_steps
    n_rec = n_steps // cfg.record_every + 1
    rec = dict(
        rec_t=np.zeros(n_rec),
        rec_x=np.zeros((n_rec, 2)),
        rec_theta=np.zeros((n_rec, 2, 3)),
        rec_u=np.zeros((n_rec, 3)),
        rec_sig=np.zeros((n_rec, 3)),
        rec_raw=np.zeros((n_rec, 3)),
        rec_gram=np.zeros((n_rec, 6)),
        rec_gram_raw=np.zeros((n_rec, 6)),
        rec_res=np.zeros((n_rec, 2)),
    )
    events = np.zeros((10000, 2))
    conv_step = np.zeros(2, dtype=np.int64)
    status, k, n_ev, _, _ = _kernel(
        np.asarray(x0, dtype=float), theta0, theta_star, w0, cfg.dt, n_steps,
        np.asarray(eta, dtype=float), cfg.learning, cfg.tau_steps, cfg.eval_threshold,
        cfg.conv_threshold, cfg.stop_on_convergence, use_ff, freqs, sins, coss, const,
        noise, cfg.record_every, rec["rec_t"], rec["rec_x"], rec["rec_theta"], rec["rec_u"],
        rec["rec_sig"], rec["rec_raw"], rec["rec_gram"], rec["rec_gram_raw"], rec["rec_res"],
        events, conv_step,
    )
    ev = [
        (float(events[j, 0]), "improvement" if events[j, 1] > 0 else "divergence")
        for j in range(n_ev)
    ]
    conv = tuple(float(s * cfg.dt) if s >= 0 else None for s in conv_step)
    if status == STATUS_CONVERGED:
        t_conv = max(c for c in conv if c is not None)
        if not ev or t_conv > ev[-1][0]:
            ev.append((t_conv, "converged"))
    trace = WeightTrace(
        signal=signal,
        t=rec["rec_t"][:k].copy(),
        x=rec["rec_x"][:k].copy(),
        theta=rec["rec_theta"][:k].copy(),
        u=rec["rec_u"][:k].copy(),
        sigma_bar=rec["rec_sig"][:k].copy(),
        sigma_raw=rec["rec_raw"][:k].copy(),
        gram=rec["rec_gram"][:k].copy(),
        gram_raw=rec["rec_gram_raw"][:k].copy(),
        residual=rec["rec_res"][:k].copy(),
        events=ev,
        status=int(status),
        conv_times=conv,
        eta=tuple(float(e) for e in eta),
        sigma_max_sq=float(sigma_max_sq),
        noise_amplitude=noise_amplitude,
        theta_star=theta_star,
    )
    if status == STATUS_DIVERGED:
        raise DivergenceError(f"|x| exceeded {DIVERGENCE_LIMIT} at t = {ev[-1][0]:.3f} s")
    return trace


def calibrate_noise(
    game: GameSpec,
    cfg: SimConfig,
    target: float | None = None,
    probe_horizon: float = 400.0,
    iterations: int = 8,
) -> float:
    """Noise amplitude for which a non-learning pre-run reaches ``max |sigma_bar|^2 = target``."""
    target = cfg.noise_target_sigma_max_sq if target is None else target
    probe = replace(cfg, horizon=min(probe_horizon, cfg.horizon), learning=False,
                    stop_on_convergence=False, record_every=1)
    amp = 1.0
    for _ in range(iterations):
        noise = noise_samples(probe, amp)
        tr = _run(game, None, probe, (0.0, 0.0), noise, "noise", 1.0, amp)
        peak = float(np.max(np.sum(tr.sigma_bar**2, axis=1)))
        if peak <= 0:
            raise SimulationError("noise pre-run produced no excitation")
        # sigma_bar is quadratic in the state and the state is linear in the amplitude
        amp *= (target / peak) ** 0.25
        if abs(peak / target - 1.0) < 1e-3:
            break
    return amp


@njit(cache=True)
def _closed_loop_batch(x1, x2, w):
    c1 = np.empty_like(x1)
    c2 = np.empty_like(x1)
    for k in range(len(x1)):
        c1[k], c2[k] = bm.closed_loop(x1[k], x2[k], w)
    return c1, c2


def measure_sigma_max_sq(game: GameSpec, plan: ExcitationPlan, cfg: SimConfig) -> float:
    """Peak ``|sigma_bar|^2`` along the a-priori trajectory under the initial policies."""
    t = np.arange(0.0, min(cfg.horizon, 200.0) + cfg.dt / 2, cfg.dt)
    xh = plan.xhat_at(t)
    w = np.array(game.theta0, dtype=float)
    c1, c2 = _closed_loop_batch(np.ascontiguousarray(xh[0]), np.ascontiguousarray(xh[1]), w)
    s = np.array([2 * xh[0] * c1, xh[1] * c1 + xh[0] * c2, 2 * xh[1] * c2])
    return float(np.max(np.sum(s**2, axis=0)))


def run_policy_iteration(
    game: GameSpec,
    plan: ExcitationPlan | None,
    cfg: SimConfig,
    signal: str | None = None,
) -> WeightTrace:
    """Simulate the learning loop under the plan's excitation (or probing noise)."""
    if plan is not None and plan.u_hat_kind == "flat_feedforward":
        kind = "flat_feedforward"
    elif plan is None or plan.u_hat_kind == "probing_noise":
        kind = "probing_noise" if (cfg.noise_amplitude is None or cfg.noise_amplitude > 0) else "none"
    else:
        kind = "none"
    name = signal or {"flat_feedforward": "feedforward", "probing_noise": "noise", "none": "none"}[kind]
    amp = None
    noise = np.zeros(0)
    if kind == "probing_noise":
        amp = cfg.noise_amplitude if cfg.noise_amplitude is not None else calibrate_noise(game, cfg)
        noise = noise_samples(cfg, amp)
    smax = cfg.sigma_max_sq
    if smax is None:
        smax = REFERENCE_SIGMA_MAX_SQ.get(name)
    if smax is None:
        if kind == "flat_feedforward":
            smax = measure_sigma_max_sq(game, plan, cfg)
        elif kind == "probing_noise":
            smax = cfg.noise_target_sigma_max_sq
        else:
            smax = 1.0
    eta = (cfg.eta_v / smax, cfg.eta_v / smax)
    log.info("running %s: eta=%.4g, noise amplitude=%s", name, eta[0], amp)
    tr = _run(game, plan if kind == "flat_feedforward" else None, cfg, eta, noise, name, smax, amp)
    return tr


def step(game: GameSpec, plan: ExcitationPlan | None, cfg: SimConfig, x, theta, weights,
         eta: Sequence[float], t0: float = 0.0, n: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Advance ``n`` integrator steps from ``(x, theta)``; policies frozen at ``weights``.

    The run starts at time ``t0`` when the plan carries a feed-forward.
    """
    one = replace(cfg, horizon=n * cfg.dt, record_every=max(1, n), learning=True,
                  stop_on_convergence=False, tau=cfg.dt * max(1, cfg.tau_steps))
    use_ff, freqs, sins, coss, const = _feedforward_arrays(plan)
    if use_ff and t0 != 0.0:
        # shift the reference so the kernel's clock starts at t0
        coss_s = coss * np.cos(freqs * t0) + sins * np.sin(freqs * t0)
        sins_s = sins * np.cos(freqs * t0) - coss * np.sin(freqs * t0)
        sins, coss = sins_s, coss_s
    n_rec = 2
    bufs = [np.zeros(n_rec), np.zeros((n_rec, 2)), np.zeros((n_rec, 2, 3)), np.zeros((n_rec, 3)),
            np.zeros((n_rec, 3)), np.zeros((n_rec, 3)), np.zeros((n_rec, 6)), np.zeros((n_rec, 6)),
            np.zeros((n_rec, 2))]
    events = np.zeros((16, 2))
    conv = np.zeros(2, dtype=np.int64)
    status, k, _, x1, x2 = _kernel(
        np.asarray(x, float), np.array(theta, float), np.array(game.theta_star, float),
        np.array(weights, float), cfg.dt, n, np.asarray(eta, float), True, n + 1,
        cfg.eval_threshold, cfg.conv_threshold, False, use_ff, freqs, sins, coss, const,
        np.zeros(0), max(1, n), *bufs, events, conv,
    )
    if status == STATUS_DIVERGED:
        raise DivergenceError("state left the divergence guard")
    return np.array([x1, x2]), bufs[2][k - 1].copy()


# -- diagnostics -------------------------------------------------------------


def bellman_residual(game: GameSpec, x: np.ndarray, theta: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Residuals ``e_i`` at states ``x`` (shape (n, 2)) for critics ``theta`` and policies ``weights``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.zeros((len(x), game.N))
    w = np.asarray(weights, dtype=float)
    for k, xk in enumerate(x):
        for i in range(game.N):
            out[k, i] = game.residual(i, xk, np.asarray(theta, float)[i], w)
    return out


def theta_mu(game: GameSpec, weights, box: float = 1.0, n: int = 41) -> np.ndarray:
    """Least-squares critic weights of the fixed policies ``weights`` on a state grid.

    Solves ``theta_i . sigma_bar(x) = -(Q_i + sum_j R_ij mu_j^2)`` over
    ``[-box, box]^2``; exact when the policy value lies in the basis span.
    """
    g = np.linspace(-box, box, n)
    X = np.array([(a, b) for a in g for b in g if a or b])
    w = np.asarray(weights, dtype=float)
    S = np.array([game.sigma_bar(x, w) for x in X])
    out = np.zeros((game.N, S.shape[1]))
    for i in range(game.N):
        mu = np.array([[game.policy(j, x, w[j]) for j in range(game.N)] for x in X])
        r = np.array([game.Q(i, x) for x in X]) + (mu**2) @ np.asarray(game.R[i])
        out[i] = np.linalg.lstsq(S, -r, rcond=None)[0]
    return out


@dataclass
class DecayReport:
    rho: float
    T: float
    k: np.ndarray
    norms: np.ndarray
    bound: np.ndarray
    violations: int
    first_violation: int | None

    @property
    def holds(self) -> bool:
        return self.violations == 0

    def to_json(self) -> dict:
        return {
            "rho": self.rho,
            "T_s": self.T,
            "k_max": int(self.k[-1]) if len(self.k) else 0,
            "violations": self.violations,
            "first_violation_k": self.first_violation,
        }


def decay_rho(eta: float, T: float, alphaI: float, sigma_max: float) -> float:
    return 1.0 - 2.0 * T * eta * alphaI**2 / (1.0 + T * eta * sigma_max**2) ** 2


def decay_bound_check(
    t: np.ndarray,
    sigma: np.ndarray,
    eta: float,
    T: float,
    alphaI: float,
    theta0,
    sigma_max: float | None = None,
    rtol: float = 1e-9,
) -> DecayReport:
    """Integrate ``theta~' = -eta sigma sigma^T theta~`` along a sampled ``sigma`` and test
    ``|theta~(kT)| <= rho^(k/2) |theta~(0)|``.

    Each step uses the exact flow for ``sigma`` frozen at the interval midpoint.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    dt = float(t[1] - t[0])
    if sigma_max is None:
        sigma_max = float(np.sqrt(np.max(np.sum(s**2, axis=1))))
    rho = decay_rho(eta, T, alphaI, sigma_max)
    kT = int(round(T / dt))
    if kT < 1:
        raise ValueError("window shorter than the sample step")
    th = np.array(theta0, dtype=float).reshape(-1)
    n0 = float(np.linalg.norm(th))
    norms = [n0]
    mid = 0.5 * (s[1:] + s[:-1])
    nrm2 = np.sum(mid**2, axis=1)
    for j in range(len(mid)):
        if nrm2[j] > 0:
            th -= mid[j] * (mid[j] @ th) * (-math.expm1(-eta * nrm2[j] * dt)) / nrm2[j]
        if (j + 1) % kT == 0:
            norms.append(float(np.linalg.norm(th)))
    k = np.arange(len(norms))
    bound = np.exp(0.5 * k * math.log(rho)) * n0 if rho > 0 else np.where(k == 0, n0, 0.0)
    bad = np.nonzero(np.asarray(norms) > bound * (1 + rtol) + 1e-300)[0]
    return DecayReport(rho, kT * dt, k, np.asarray(norms), bound, len(bad),
                       int(bad[0]) if len(bad) else None)


# -- output ------------------------------------------------------------------

TRACE_COLUMNS = ("t", "x1", "x2", "th1_1", "th1_2", "th1_3", "th2_1", "th2_2", "th2_3",
                 "err1", "err2", "u1", "u2", "uhat1")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trace_csv(trace: WeightTrace, path, stride: int = 1) -> None:
    err = trace.err
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for k in range(0, len(trace.t), stride):
            row = [trace.t[k], *trace.x[k], *trace.theta[k, 0], *trace.theta[k, 1],
                   err[k, 0], err[k, 1], *trace.u[k]]
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_sigma_csv(trace: WeightTrace, path, which: str = "bar") -> None:
    s = trace.sigma_bar if which == "bar" else trace.sigma_raw
    with open(path, "w", newline="") as fh:
        fh.write("t,s1,s2,s3\n")
        for k in range(len(trace.t)):
            fh.write(",".join(_fmt(v) for v in (trace.t[k], *s[k])) + "\n")


def run_recorded(
    game: GameSpec,
    plan: ExcitationPlan | None,
    cfg: SimConfig,
    signal: str | None = None,
    record_every: int = 1,
    margin: float = 1.0,
) -> WeightTrace:
    """Fine-resolution trace up to convergence without buffering the whole horizon.

    A coarse pass locates the stopping time; recording does not influence
    the dynamics, so the second pass reproduces it exactly.
    """
    coarse = run_policy_iteration(game, plan, replace(cfg, record_every=max(cfg.record_every, 1000)), signal)
    end = coarse.t[-1] if coarse.conv_time is None else max(coarse.conv_times) + margin
    fine = replace(cfg, horizon=min(cfg.horizon, math.ceil(end / cfg.dt) * cfg.dt),
                   record_every=record_every)
    if fine.noise_amplitude is None and coarse.noise_amplitude is not None:
        fine = replace(fine, noise_amplitude=coarse.noise_amplitude)
    return run_policy_iteration(game, plan, fine, signal)
