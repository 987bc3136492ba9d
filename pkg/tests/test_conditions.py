import itertools
from fractions import Fraction

import numpy as np
import pytest

from pexcite.conditions import (
    ConditionError,
    ConditionMatrix,
    ConditionSet,
    OmegaSamplingError,
    build_omega1,
    build_omega2,
    build_tuple_table,
    conditions_from_expansion,
    intersect,
    intersect_all,
    membership,
    np1_exactness_flag,
    sample_omega,
    violated,
)
from pexcite.design import BENCHMARK_BASIS, BENCHMARK_TEMPLATE
from pexcite.trig import BasisSpec, DesiredStateSpec, SinusoidSum, expand_basis

F = Fraction


def cset(m, *mats):
    return ConditionSet(m, tuple(ConditionMatrix.from_rows(r) for r in mats))


# -- Omega1 -----------------------------------------------------------------


def test_omega1_benchmark_rows(bench):
    rows = {c.rows[0] for c in bench.omega1.conditions}
    assert (F(1), F(-1), F(0)) in rows
    assert (F(1), F(1), F(0)) in rows
    assert all(len(c.rows) == 1 for c in bench.omega1.conditions)


def test_omega1_single_pair_free_cases():
    half = SinusoidSum.build(1, F(1, 2), [((2,), 0, F(-1, 2))])
    assert build_omega1([half]).count == 0
    s = SinusoidSum.cos((1, 0)) + SinusoidSum.cos((0, 1))
    rows = {c.rows for c in build_omega1([s]).conditions}
    assert rows == {((F(1), F(-1)),), ((F(1), F(1)),)}


# -- tuple table --------------------------------------------------------------


def test_benchmark_tuple_table(bench):
    table = bench.table
    assert table.n_columns == 16
    assert set(table.W(0)) == {(2, 0, 0), (0, 2, 0), (1, -1, 0), (1, 1, 0)}
    assert set(table.W(1)) == {(1, 0, -1), (1, 0, 1), (0, 1, -1), (0, 1, 1)}
    assert set(table.W(2)) == {(0, 0, 2)}
    assert table.T.shape == (3, 16)
    assert not np1_exactness_flag(table)
    # every column picks one term of each element
    for n in range(table.n_columns):
        for hb, term in enumerate(table.column_terms(n)):
            assert term in table.elements[hb]


def test_tuple_table_sizes():
    one = build_tuple_table([SinusoidSum.sin((1,))])
    assert one.n_columns == 1 and len(one.P) == 1 and len(one.P[0]) == 1
    a = SinusoidSum.sin((1, 0)) + SinusoidSum.cos((0, 1))
    b = SinusoidSum.sin((1, 1)) + SinusoidSum.cos((1, -1)) + SinusoidSum.cos((2, 0))
    assert build_tuple_table([a, b]).n_columns == 6
    two = build_tuple_table([SinusoidSum.sin((1, 0)), SinusoidSum.cos((0, 1))])
    assert np1_exactness_flag(two)


def test_tuple_table_rejects_constant_element():
    with pytest.raises(ConditionError):
        build_tuple_table([SinusoidSum.sin((1,)), SinusoidSum.const(1, 3)])


def test_np1_flag_and_exact_set_for_squared_sine():
    spec = DesiredStateSpec.create(1, [[1]])
    rep = conditions_from_expansion(expand_basis(BasisSpec.monomials([(2,)]), spec))
    assert rep.exact
    assert rep.omega.count == 1
    assert rep.omega.conditions[0].rows == ((F(1),),)


# -- Omega2 -------------------------------------------------------------------


def test_single_column_gives_nonzero_condition():
    o2 = build_omega2(build_tuple_table([SinusoidSum.cos((2,))]))
    assert o2.conditions == (ConditionMatrix(((F(1),),)),)
    assert not o2.is_empty_omega


def test_omega2_empty_case():
    e1 = SinusoidSum.cos((1, 0))
    e2 = SinusoidSum.cos((1, 0)) + SinusoidSum.sin((0, 1))
    table = build_tuple_table([e1, e2])
    assert table.n_columns == 2
    o2 = build_omega2(table)
    assert o2.is_empty_omega
    assert not membership((1, 2), o2)
    full = conditions_from_expansion([e1, e2]).omega
    assert full.is_empty_omega


def test_benchmark_contains_zero_frequency_condition(omega):
    assert ConditionMatrix(((F(1), F(0), F(0)),)) in omega.conditions


# -- intersect ----------------------------------------------------------------


def test_intersect_idempotent_and_subset_pruning():
    a = cset(3, [[1, 0, 0]])
    assert intersect(a, a).conditions == a.conditions
    b = cset(3, [[1, 0, 0], [0, 1, 0]])
    assert intersect(a, b).conditions == a.conditions
    assert intersect(b, a).conditions == a.conditions
    with pytest.raises(ConditionError):
        intersect(a, cset(2, [[1, 0]]))
    empty = ConditionSet(3, (), True)
    assert intersect(a, empty).is_empty_omega


def test_condition_set_invariants(omega):
    rows = [set(c.rows) for c in omega.conditions]
    assert len(set(omega.conditions)) == omega.count
    for i, ri in enumerate(rows):
        for j, rj in enumerate(rows):
            if i != j:
                assert not rj < ri


def test_benchmark_count(bench):
    assert bench.omega1.count == 13
    assert bench.omega2.count == 123
    assert bench.omega.count == 49


# -- membership ---------------------------------------------------------------


def test_membership_facts(omega):
    assert membership((1, 2, 3), omega)
    assert membership((F(1, 2), 1, 2), omega)
    assert (1, 2, 3) in omega
    assert not membership((0, 2, 3), omega)
    assert not membership((1, 1, 3), omega)
    viol = violated((1, 1, 3), omega)
    assert ConditionMatrix(((F(1), F(-1), F(0)),)) in viol
    with pytest.raises(ConditionError):
        membership((1, 2), omega)


def test_non_member_can_still_be_pe():
    # the conditions are only sufficient: at (1, 1, 3) the Gram matrix of
    # d/dt phi(x_d) over one period is still regular
    t = np.linspace(0, 2 * np.pi, 20001)
    x1 = 2 * np.sin(t)
    x2 = np.sin(3 * t)
    d1, d2 = 2 * np.cos(t), 3 * np.cos(3 * t)
    sig = np.array([2 * x1 * d1, d1 * x2 + x1 * d2, 2 * x2 * d2])
    gram = np.trapezoid(sig[:, None, :] * sig[None, :, :], t, axis=-1)
    assert np.linalg.eigvalsh(gram)[0] > 1.0


# -- sampling -----------------------------------------------------------------


def test_sample_omega_box(omega):
    rejected = 0
    for seed in range(10_000):
        s = sample_omega(omega, [(1, 10)] * 3, seed=seed)
        assert membership(s.omega, omega)
        assert all(1 <= v <= 10 for v in s.omega)
        rejected += s.attempts - 1
    assert rejected / 10_000 < 1e-2


def test_sample_omega_degenerate_box(omega):
    with pytest.raises(OmegaSamplingError):
        sample_omega(omega, [(0, 0)] * 3, seed=0, max_attempts=20)


def test_sample_omega_single_condition():
    s = sample_omega(cset(3, [[1, 0, 0]]), [(-1, 1)] * 3, seed=3)
    assert s.attempts == 1


def test_sample_omega_deterministic(omega):
    assert sample_omega(omega, [(1, 10)] * 3, seed=7) == sample_omega(omega, [(1, 10)] * 3, seed=7)


# -- independent oracle on random small tables --------------------------------


def _dot(f, w):
    return sum(F(a) * b for a, b in zip(f, w))


def _terms(s):
    return [(f, 0) for f in s.sine_freqs] + [(f, 1) for f in s.cosine_freqs]


def oracle_member(expanded, w) -> bool:
    """Direct evaluation of the within-element and tuple conditions at ``w``."""
    elems = [_terms(s) for s in expanded]
    # distinct same-type frequencies within an element stay distinct up to sign
    for terms in elems:
        for (f1, k1), (f2, k2) in itertools.combinations(terms, 2):
            if k1 == k2 and abs(_dot(f1, w)) == abs(_dot(f2, w)):
                return False
    for col in itertools.product(*(range(len(t)) for t in elems)):
        chosen = [elems[hb][i] for hb, i in enumerate(col)]
        ok = all(_dot(f, w) != 0 for f, _ in chosen)
        for h1, (f1, k1) in enumerate(chosen):
            for h2, (f2, k2) in enumerate(chosen):
                if h2 > h1 and k1 == k2 and abs(_dot(f1, w)) == abs(_dot(f2, w)):
                    ok = False
            for h2, terms in enumerate(elems):
                if h2 == h1:
                    continue
                for i, (f2, k2) in enumerate(terms):
                    if i != col[h2] and k2 == k1 and abs(_dot(f1, w)) == abs(_dot(f2, w)):
                        ok = False
        if ok:
            return True
    return False


def random_table(rng, m):
    while True:
        h = int(rng.integers(1, 3))
        sizes = [int(rng.integers(1, 3)) for _ in range(h)]
        if np.prod(sizes) > 4:
            continue
        elems = []
        for n in sizes:
            s = SinusoidSum.const(m, 0)
            for _ in range(n):
                b = [int(v) for v in rng.integers(-2, 3, size=m)]
                if not any(b):
                    b[0] = 1
                amp = int(rng.integers(1, 3))
                s = s + (SinusoidSum.sin(b, amp) if rng.random() < 0.5 else SinusoidSum.cos(b, amp))
            if not s.is_zero():
                elems.append(s)
        if elems and all(len(_terms(s)) for s in elems):
            return elems


def test_algorithm_matches_direct_formula():
    rng = np.random.default_rng(2024)
    values = [F(v) for v in (-2, -1, 0, 1, 2, 3)] + [F(1, 2), F(-3, 2), F(5, 3)]
    checks = agree = 0
    for k in range(40):
        m = 1 + k % 2
        elems = random_table(rng, m)
        rep = conditions_from_expansion(elems)
        if rep.table.n_columns > 4:
            continue
        variants = [rep.omega, conditions_from_expansion(elems, prune="span", absorb=True).omega]
        for _ in range(25):
            w = tuple(values[int(i)] for i in rng.integers(0, len(values), size=m))
            expect = oracle_member(elems, w)
            for v in variants:
                assert membership(w, v) == expect, (elems, w)
            checks += 1
            agree += membership(w, rep.omega) == expect
    assert checks >= 1000 * 0.9 and agree == checks


def test_benchmark_matches_direct_formula(bench):
    expanded = expand_basis(BENCHMARK_BASIS, BENCHMARK_TEMPLATE)
    rng = np.random.default_rng(5)
    for _ in range(1000):
        w = tuple(F(int(v)) for v in rng.integers(-3, 4, size=3))
        assert membership(w, bench.omega) == oracle_member(expanded, w), w


# -- scaling, multi-player, serialization -----------------------------------


@pytest.mark.parametrize("nu", [(F(1, 4), F(1, 4)), (F(1, 2), F(1, 2)), (F(-3), F(7, 5))])
def test_scaling_leaves_conditions_unchanged(bench, nu):
    scaled = conditions_from_expansion(expand_basis(BENCHMARK_BASIS, BENCHMARK_TEMPLATE.scaled(nu)))
    assert scaled.omega == bench.omega


def test_intersection_associative_and_order_free():
    rng = np.random.default_rng(9)
    sets = [conditions_from_expansion(random_table(rng, 2)).omega for _ in range(3)]
    a, b, c = sets
    left = intersect(intersect(a, b), c)
    right = intersect(a, intersect(b, c))
    assert left == right
    assert intersect_all([c, a, b]) == left
    assert intersect(a, b) == intersect(b, a)


def test_json_round_trip(omega):
    data = omega.to_json()
    assert data["count"] == 49 and data["m"] == 3
    assert ConditionSet.from_json(data) == omega
    assert omega.describe()[0].endswith("!= 0")
