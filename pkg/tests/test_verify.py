import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from pexcite import verify
from pexcite.verify import (
    NotReachedError,
    PEVerifyError,
    SignalTrace,
    cumulative_gram,
    estimate_alphaI,
    find_T1,
    gram_at,
    gram_from_upper,
    jacobi_eigvals,
    lambda1_trace,
    lambda2_trace,
    min_window,
    unit_directions,
)


def circle(t_end=10.0, dt=1e-3):
    return SignalTrace.from_function(lambda t: np.stack([np.cos(t), np.sin(t)]), t_end, dt)


def tri(t_end=40.0, dt=1e-3):
    return SignalTrace.from_function(
        lambda t: np.stack([np.cos(t), np.sin(2 * t), np.cos(3 * t) + 0.2]), t_end, dt
    )


# -- trace type ---------------------------------------------------------------


def test_trace_validation():
    with pytest.raises(PEVerifyError):
        SignalTrace(np.array([0.0, 1.0, 3.0]), np.zeros((3, 2)))
    with pytest.raises(PEVerifyError):
        SignalTrace(np.array([0.0, 1.0]), np.array([[0.0], [np.nan]]))
    with pytest.raises(PEVerifyError):
        SignalTrace(np.array([]), np.zeros((0, 2)))
    tr = SignalTrace(np.arange(5.0), np.arange(5.0))
    assert tr.h == 1 and tr.dt == 1.0


# -- eigenvalues --------------------------------------------------------------


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_jacobi_matches_reference(h, seed, log_scale):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(20, h, h)) * 10**log_scale
    A = A + np.swapaxes(A, 1, 2)
    ref = np.linalg.eigvalsh(A)
    got = jacobi_eigvals(A)
    scale = np.max(np.abs(ref), axis=1, keepdims=True)
    assert np.all(np.abs(got - ref) <= 1e-12 * scale + 1e-300)


def test_jacobi_edge_cases():
    assert np.allclose(jacobi_eigvals(np.zeros((3, 3))), 0.0)
    D = np.diag([3.0, -1.0, 2.0])
    assert np.array_equal(jacobi_eigvals(D), [-1.0, 2.0, 3.0])
    big = np.array([[1e150, 1e150], [1e150, 1e150]])
    assert np.allclose(jacobi_eigvals(big), [0.0, 2e150], atol=1e138)


# -- cumulative eigenvalue ----------------------------------------------------


def test_constant_vector_has_no_excitation():
    tr = SignalTrace.from_function(lambda t: np.stack([np.ones_like(t), np.zeros_like(t)]) / 1.0, 5, 1e-3)
    assert np.max(np.abs(lambda2_trace(tr))) <= 1e-12
    with pytest.raises(NotReachedError):
        find_T1(tr.t, lambda2_trace(tr))


def test_circle_lambda2_at_two_pi():
    tr = circle()
    G = gram_at(tr, 2 * np.pi)
    assert jacobi_eigvals(G)[0] == pytest.approx(np.pi, abs=1e-4)
    # away from a multiple of 2 pi the closed form is (t - |sin t|) / 2
    lam2 = lambda2_trace(tr)
    expect = 0.5 * (tr.t - np.abs(np.sin(tr.t)))
    assert np.max(np.abs(lam2 - expect)) < 1e-6


def test_T1_against_closed_form():
    tr = circle(2.0)
    T1 = find_T1(tr.t, lambda2_trace(tr), 1e-4)
    root = brentq(lambda t: 0.5 * (t - math.sin(t)) - 1e-4, 1e-3, 1.0)
    assert abs(T1 - root) <= 2 * tr.dt
    assert T1 < 1.0


def test_circle_lambda1_full_period():
    tr = circle(20.0)
    T = round(2 * np.pi / tr.dt) * tr.dt
    _, lam1 = lambda1_trace(tr, T)
    assert np.max(np.abs(lam1 - np.pi)) < 1e-3


def test_zero_component_gives_zero_lambda1():
    tr = SignalTrace.from_function(lambda t: np.stack([np.cos(t), 0 * t, np.sin(3 * t)]), 20, 1e-3)
    _, lam1 = lambda1_trace(tr, 2.0)
    assert np.max(np.abs(lam1)) <= 1e-12
    rep = verify.verify(tr)
    assert not rep.verdict and rep.T1 is None


def test_zero_signal():
    tr = SignalTrace(np.arange(0, 10, 0.01), np.zeros((1000, 3)))
    with pytest.raises(NotReachedError):
        find_T1(tr.t, lambda2_trace(tr))
    assert estimate_alphaI(tr, 1.0) == 0.0
    assert not verify.verify(tr).verdict


def test_lambda1_window_errors():
    tr = circle(2.0)
    with pytest.raises(PEVerifyError):
        lambda1_trace(tr, 3.0)
    with pytest.raises(PEVerifyError):
        lambda1_trace(tr, 0.0)
    with pytest.raises(PEVerifyError):
        lambda1_trace(tr, 0.0015)


# -- degree of PE -------------------------------------------------------------


def test_alphaI_of_cosine():
    tr = SignalTrace.from_function(np.cos, 20.0, 1e-3)
    T = round(2 * np.pi / tr.dt) * tr.dt
    assert estimate_alphaI(tr, T) == pytest.approx(2 / np.pi, abs=1e-3)


def test_unit_directions():
    for h, n in ((2, 100), (3, 1000), (5, 200)):
        d = unit_directions(h, n)
        assert d.shape == (n, h)
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    assert np.array_equal(unit_directions(3), unit_directions(3))


def test_alphaI_bounds_for_circle():
    tr = circle(20.0)
    T = round(2 * np.pi / tr.dt) * tr.dt
    # |cos(t - a)| has mean 2/pi for every direction
    assert estimate_alphaI(tr, T) == pytest.approx(2 / np.pi, abs=1e-3)


# -- properties ---------------------------------------------------------------


def random_trace(seed, h=3, t_end=30.0, dt=2e-3):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.2, 4.0, size=(h, 3))
    a = rng.normal(size=(h, 3))
    p = rng.uniform(0, 2 * np.pi, size=(h, 3))
    fn = lambda t: np.stack([(a[i, :, None] * np.sin(w[i, :, None] * t + p[i, :, None])).sum(0) for i in range(h)])
    return SignalTrace.from_function(fn, t_end, dt)


@settings(max_examples=20)
@given(st.integers(0, 10**6))
def test_lambda2_monotone(seed):
    lam2 = lambda2_trace(random_trace(seed))
    assert np.all(np.diff(lam2) >= -1e-9 * max(1.0, lam2[-1]))


@settings(max_examples=20)
@given(st.integers(0, 10**6))
def test_staircase_bound_and_window_consistency(seed):
    tr = random_trace(seed)
    G = cumulative_gram(tr)
    rep = verify.verify(tr, 1e-4, gram=G)
    if rep.verdict:
        T = rep.window
        k_T = int(round(T / tr.dt))
        lam2 = rep.lambda2
        for k in range(1, (len(tr.t) - 1) // k_T + 1):
            assert lam2[k * k_T] >= k * 1e-4 * (1 - 1e-9)
    T = 2.0
    t1, l1 = lambda1_trace(tr, T, G)
    t2, l2 = lambda1_trace(tr, 2 * T, G)
    assert np.all(l2 >= l1[: len(l2)] - 1e-9 * max(1.0, np.max(l1)))


def test_staircase_on_simulated_trace(u11_trace):
    tr = SignalTrace(u11_trace.t, u11_trace.sigma_bar)
    G = gram_from_upper(u11_trace.gram, 3)
    rep = verify.verify(tr, 1e-4, gram=G)
    assert rep.verdict
    lam2 = rep.lambda2
    assert np.all(np.diff(lam2) >= -1e-9 * lam2[-1])
    k_T = int(round(rep.window / tr.dt))
    ks = np.arange(1, (len(tr.t) - 1) // k_T + 1)
    assert np.all(lam2[ks * k_T] >= ks * 1e-4)


def test_recorded_gram_matches_samples(u11_trace):
    tr = SignalTrace(u11_trace.t[:20001], u11_trace.sigma_bar[:20001])
    G = gram_from_upper(u11_trace.gram[:20001], 3)
    ref = cumulative_gram(tr)
    # the simulator integrates every step, the samples are every step too
    assert np.max(np.abs(G - ref)) <= 1e-9 * np.max(np.abs(ref))


def test_dt_halving_stability():
    coarse, fine = tri(dt=2e-3), tri(dt=1e-3)
    ra, rb = verify.verify(coarse, 1e-4), verify.verify(fine, 1e-4)
    assert abs(ra.T1 - rb.T1) < 2 * coarse.dt
    T = 4.0
    la = np.min(lambda1_trace(coarse, T)[1])
    lb = np.min(lambda1_trace(fine, T)[1])
    assert abs(la - lb) < 0.01 * lb


# -- minimal window and report ------------------------------------------------


def test_min_window_is_minimal():
    tr = tri(30.0, 2e-3)
    G = cumulative_gram(tr)
    w = min_window(tr, 1e-2, G)
    k = int(round(w / tr.dt))
    _, ok = lambda1_trace(tr, w, G)
    _, short = lambda1_trace(tr, (k - 1) * tr.dt, G)
    assert np.min(ok) >= 1e-2 > np.min(short)


def test_verify_report_fields():
    tr = tri()
    rep = verify.verify(tr, 1e-4, alphaI=True)
    assert rep.verdict == (rep.min_lambda1 >= 1e-4)
    assert rep.window_source in ("T1", "search")
    assert rep.alphaI_estimate > 0
    data = json.loads(json.dumps(rep.to_json()))
    assert data["pe"] is True and data["verdict"] == "PE"
    assert data["verified_horizon_s"] == pytest.approx(40.0 - rep.window)
    given_T = verify.verify(tr, 1e-4, T=5.0)
    assert given_T.window == 5.0 and given_T.window_source == "given"


def test_csv_round_trip(tmp_path):
    tr = tri(5.0)
    path = tmp_path / "sigma.csv"
    verify.write_series_csv(path, tr.t, {"s1": tr.samples[:, 0], "s2": tr.samples[:, 1], "s3": tr.samples[:, 2]})
    back = verify.read_signal_csv(path)
    assert np.array_equal(back.t, tr.t) and np.array_equal(back.samples, tr.samples)
    sub = verify.read_signal_csv(path, ["s2"])
    assert sub.h == 1
    with pytest.raises(PEVerifyError):
        verify.read_signal_csv(path, ["s9"])
