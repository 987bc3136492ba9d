"""Two-player nonzero-sum benchmark game.

    x1' = -2 x1 + x2
    x2' = -x2 - x1/2 + x2/4 ((cos 2x1 + 2)^2 + (sin 4x1^2 + 2)^2)
          + (cos 2x1 + 2) u1 + (sin 4x1^2 + 2) u2

Costs ``Q1 = 2|x|^2, R11 = R12 = 2`` for player 1 and half of that for
player 2; both players use the basis ``[x1^2, x1 x2, x2^2]``.  The optimal
values are ``V1* = x1^2/2 + x2^2`` and ``V2* = V1*/2``.

The scalar kernels are compiled with numba so the simulator loop and the
Python-level API share one definition of the model.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

Q_SCALE = np.array([2.0, 1.0])
R = np.array([[2.0, 2.0], [1.0, 1.0]])
THETA0 = np.array([[1.783, -2.33, 2.215], [0.8916, -1.165, 1.107]])
THETA_STAR = np.array([[0.5, 0.0, 1.0], [0.25, 0.0, 0.5]])
BASIS_EXPONENTS = ((2, 0), (1, 1), (0, 2))


@njit(cache=True)
def g1(x1):
    return math.cos(2.0 * x1) + 2.0


@njit(cache=True)
def g2(x1):
    return math.sin(4.0 * x1 * x1) + 2.0


@njit(cache=True)
def drift(x1, x2):
    c = g1(x1)
    s = g2(x1)
    return -2.0 * x1 + x2, -x2 - 0.5 * x1 + 0.25 * x2 * (c * c + s * s)


@njit(cache=True)
def policy(x1, x2, w0, w1, w2, r_ii, gi):
    """-1/2 R_ii^-1 g_i^T (dphi/dx)^T w; only the x2 row of g_i is nonzero."""
    return -0.5 / r_ii * gi * (w1 * x1 + 2.0 * w2 * x2)


@njit(cache=True)
def policies(x1, x2, w):
    mu1 = policy(x1, x2, w[0, 0], w[0, 1], w[0, 2], 2.0, g1(x1))
    mu2 = policy(x1, x2, w[1, 0], w[1, 1], w[1, 2], 1.0, g2(x1))
    return mu1, mu2


@njit(cache=True)
def closed_loop(x1, x2, w):
    """f(x) + g(x) mu(x) under policy weights ``w`` (2 x 3)."""
    f1, f2 = drift(x1, x2)
    mu1, mu2 = policies(x1, x2, w)
    return f1, f2 + g1(x1) * mu1 + g2(x1) * mu2


@njit(cache=True)
def basis_rate(x1, x2, d1, d2, out):
    """(dphi/dx) d for phi = [x1^2, x1 x2, x2^2]."""
    out[0] = 2.0 * x1 * d1
    out[1] = x2 * d1 + x1 * d2
    out[2] = 2.0 * x2 * d2


@njit(cache=True)
def running_cost(x1, x2, mu1, mu2, i):
    """Q_i(x) + sum_j R_ij mu_j^2."""
    q = 2.0 if i == 0 else 1.0
    r = 2.0 if i == 0 else 1.0
    return q * (x1 * x1 + x2 * x2) + r * (mu1 * mu1 + mu2 * mu2)


@njit(cache=True)
def feedforward(x1h, x2h, x2h_dot, w):
    """Flat inversion of the x2 row: u1 that makes x follow (x1h, x2h); u2 = 0."""
    f1, f2 = drift(x1h, x2h)
    mu1, mu2 = policies(x1h, x2h, w)
    c = g1(x1h)
    return (x2h_dot - f2 - c * mu1 - g2(x1h) * mu2) / c
