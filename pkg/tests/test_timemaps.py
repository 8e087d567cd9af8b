import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopman_minset.dynamics import get_system, integrate_orbit
from koopman_minset.errors import (
    ConservationDirectionError,
    ContractViolation,
    DomainError,
    EmptyReportError,
    IllegalActionError,
)
from koopman_minset.linear_analysis import analytic_charts, eigendecompose
from koopman_minset.timemaps import (
    KoopmanEigenfunction,
    arccos_timemap,
    arcsin_timemap,
    combine_geometric,
    combine_mean,
    independence_test,
    kef_constant,
    kef_from_timemap,
    kef_pde_residual,
    kef_power,
    kef_product,
    relative_gram_determinant,
    split_kefs,
    timemap_from_kef,
    timemaps_from_chart,
    unit_derivative_residual,
)

X0 = np.array([2.0, 1.0])


@pytest.fixture
def real_kefs():
    return split_kefs(eigendecompose(get_system("linear_real")))


@pytest.fixture
def real_maps():
    return timemaps_from_chart(analytic_charts("linear_real")["canonical"], X0)


def grid(lo=1.0, hi=3.0, n=20):
    a = np.linspace(lo, hi, n)
    return np.stack(np.meshgrid(a, a, indexing="ij"), -1).reshape(-1, 2)


def test_split_kef_is_exact(real_kefs):
    f = get_system("linear_real")
    assert kef_pde_residual(real_kefs[0], f, grid()).max() <= 1e-12
    assert real_kefs[0].lam == 3.0


def test_wrong_eigenvalue_leaves_residual(real_kefs):
    f = get_system("linear_real")
    y1 = real_kefs[0]
    wrong = KoopmanEigenfunction(4.0, y1.eval, y1.gradient)
    pts = grid()
    assert np.allclose(kef_pde_residual(wrong, f, pts), np.abs(y1.eval(pts)))


def test_constant_kef():
    one = kef_constant(2)
    assert kef_pde_residual(one, get_system("limit_cycle"), grid()).max() == 0.0


def test_timemap_of_split_coordinate(real_kefs):
    y1 = real_kefs[0]
    # x0 with y1(x0) = 1
    x0 = np.array([1 / math.sqrt(2), 1 / math.sqrt(2)])
    g = timemap_from_kef(y1, x0)
    pts = grid()
    assert np.allclose(g.eval(pts), np.log(np.abs(y1.eval(pts))) / 3)
    assert g.eval(x0) == 0.0


def test_timemap_on_same_level_set_is_zero(real_kefs):
    y1 = real_kefs[0]
    g = timemap_from_kef(y1, X0)
    # moving along the y2 direction keeps y1 fixed
    assert abs(g.eval(X0 + 0.3 * np.array([1.0, -1.0]))) < 1e-15


def test_timemap_along_orbit(real_kefs):
    g = timemap_from_kef(real_kefs[0], X0)
    orbit = integrate_orbit(get_system("linear_real"), X0, 0.1, 200)
    assert abs(g.eval(orbit.states[-1]) - 0.1) <= 1e-6


def test_zero_eigenvalue_rejected():
    with pytest.raises(ConservationDirectionError):
        timemap_from_kef(kef_constant(2), X0)


def test_reference_on_zero_set_rejected(real_kefs):
    with pytest.raises(DomainError):
        timemap_from_kef(real_kefs[1], np.array([1.0, 1.0]))


def test_kef_from_timemap(real_kefs):
    y1 = real_kefs[0]
    g = timemap_from_kef(y1, X0)
    phi = kef_from_timemap(g, 3.0)
    pts = np.random.default_rng(0).uniform(1, 3, size=(20, 2))
    assert np.allclose(phi.eval(pts), np.abs(y1.eval(pts)) / abs(y1.eval(X0)), rtol=1e-9)
    assert kef_pde_residual(phi, get_system("linear_real"), pts).max() < 1e-9


def test_kef_from_timemap_rejects_zero(real_maps):
    with pytest.raises(ContractViolation):
        kef_from_timemap(real_maps[0], 0)


@pytest.mark.parametrize("name", ["linear_complex", "linear_imaginary"])
def test_complex_round_trip(name):
    kefs = split_kefs(eigendecompose(get_system(name)))
    phi = kefs[0]
    g = timemap_from_kef(phi, X0)
    back = kef_from_timemap(g, phi.lam)
    pts = np.random.default_rng(1).uniform(1, 3, size=(20, 2))
    # Log then exp loses nothing: exp(Log z) = z on every branch
    assert np.allclose(back.eval(pts), phi.eval(pts) / phi.eval(X0), rtol=1e-9)
    assert unit_derivative_residual(g, get_system(name), pts).max() < 1e-12


def test_group_operations(real_kefs):
    f = get_system("linear_real")
    pts = grid(2.0, 3.0) + np.array([1.5, 0.0])  # x1 > x2 so y2 > 0
    prod = kef_product(*real_kefs)
    assert prod.lam == 11.0
    assert kef_pde_residual(prod, f, pts).max() <= 1e-8
    for beta in (2, -1, 0.5):
        for phi in real_kefs:
            p = kef_power(phi, beta)
            assert p.lam == beta * phi.lam
            assert kef_pde_residual(p, f, pts).max() <= 1e-8


def test_mean_with_equal_maps_is_same(real_maps):
    g = real_maps[0]
    m = combine_mean([g, g], [0.5, 0.5])
    pts = grid()
    assert np.allclose(m.eval(pts), g.eval(pts), equal_nan=True)


def test_one_hot_mean_returns_map(real_maps):
    assert combine_mean(real_maps, [1.0, 0.0]) is real_maps[0]


def test_illegal_weights(real_maps):
    with pytest.raises(IllegalActionError):
        combine_mean(real_maps, [0.5, 0.6])


def test_mean_needs_shared_origin(real_maps):
    other = timemaps_from_chart(analytic_charts("linear_real")["canonical"], np.array([2.5, 1.0]))
    with pytest.raises(ContractViolation):
        combine_mean([real_maps[0], other[1]], [0.5, 0.5])


def test_mean_along_orbit(real_maps):
    orbit = integrate_orbit(get_system("linear_real"), X0, 0.2, 400)
    m = combine_mean(real_maps, [0.5, 0.5])
    assert abs(m.eval(orbit.states[-1]) - 0.2) <= 1e-6


@given(st.floats(-3, 3), st.tuples(st.floats(1, 3), st.floats(1, 3)))
def test_affine_mean_keeps_unit_derivative(w, p):
    maps = timemaps_from_chart(analytic_charts("linear_real")["canonical"], X0)
    m = combine_mean(maps, [w, 1.0 - w])
    x = np.array(p)
    if abs(x[0] - x[1]) < 1e-3:
        return
    assert unit_derivative_residual(m, get_system("linear_real"), x) <= 1e-9 * (1 + abs(w))


def test_geometric_same_map(real_maps):
    assert combine_geometric(real_maps[0], real_maps[0]) is real_maps[0]


@pytest.mark.parametrize("name", ["linear_real", "limit_cycle"])
def test_geometric_on_orbit(name):
    f = get_system(name)
    maps = timemaps_from_chart(analytic_charts(name)["canonical"], X0)
    g = combine_geometric(*maps)
    orbit = integrate_orbit(f, X0, 0.3, 300)
    vals = g.eval(orbit.states[1:])
    assert np.allclose(vals, orbit.times[1:], atol=1e-6)
    # unit derivative holds on the orbit itself
    assert unit_derivative_residual(g, f, orbit.states[1:]).max() < 1e-6


def test_geometric_negative_product(real_maps):
    g1 = real_maps[0]
    neg = combine_mean([g1, real_maps[1]], [2.0, -1.0])
    g = combine_geometric(g1, neg)
    pts = grid()
    pts = pts[np.abs(pts[:, 0] - pts[:, 1]) > 1e-3]
    x = pts[np.argmin(g1.eval(pts) * neg.eval(pts))]
    assert g1.eval(x) * neg.eval(x) < 0
    with pytest.raises(DomainError):
        g.eval(x)


def test_arccos_arcsin_gradients():
    x = np.array([1.0, 1.0])
    assert np.allclose(arccos_timemap(x).gradient(x), [-0.5, 0.5])
    assert np.allclose(arcsin_timemap(x).gradient(x), [-0.5, 0.5])
    rep = independence_test([arccos_timemap(x), arcsin_timemap(x)], x)
    assert rep.verdict == "dependent" and rep.gradient_matrix_rank[0] == 1


def test_arccos_advances_with_rotation():
    f = get_system("limit_cycle")  # pure rotation theta' = 1 on the unit circle
    x0 = np.array([math.cos(0.3), math.sin(0.3)])
    orbit = integrate_orbit(f, x0, 0.3, 300)
    g = arccos_timemap(x0)
    assert np.allclose(g.eval(orbit.states), orbit.times, atol=1e-8)


def test_canonical_pair_is_independent(real_maps):
    pts = np.random.default_rng(2).uniform(1, 3, size=(50, 2))
    pts = pts[np.abs(pts[:, 0] - pts[:, 1]) > 1e-3]
    rep = independence_test(real_maps, pts)
    assert rep.verdict == "independent"
    assert np.all(rep.gradient_matrix_rank == 2)
    assert json.loads(rep.to_json())["verdict"] == "independent"


def test_triples_are_dependent(real_maps):
    third = combine_mean(real_maps, [0.3, 0.7])
    pts = np.random.default_rng(3).uniform(1, 3, size=(30, 2))
    rep = independence_test(real_maps + [third], pts)
    assert rep.verdict == "dependent" and rep.gradient_matrix_rank.max() <= 2


def test_skipped_points_warn(real_maps):
    pts = np.array([[2.0, 1.0], [1.5, 1.5]])  # second lies on y2 = 0
    with pytest.warns(RuntimeWarning):
        rep = independence_test(real_maps, pts)
    assert rep.skipped == 1 and len(rep.sample_points) == 1


def test_all_points_skipped(real_maps):
    with pytest.raises(EmptyReportError), pytest.warns(RuntimeWarning):
        independence_test(real_maps, np.array([[1.5, 1.5], [2.0, 2.0]]))


def test_needs_two_maps(real_maps):
    with pytest.raises(ContractViolation):
        independence_test(real_maps[:1], X0)


def test_gram_determinant():
    x0 = np.array([1.0, 1.0])
    pts = np.random.default_rng(4).uniform(0.5, 2.0, size=(50, 2))
    det = relative_gram_determinant([arccos_timemap(x0), arcsin_timemap(x0)], pts)
    assert det.max() <= 1e-8
    maps = timemaps_from_chart(analytic_charts("linear_real")["canonical"], X0)
    assert relative_gram_determinant(maps, np.array([[2.0, 1.0]]))[0] == pytest.approx(1.0)


@settings(max_examples=30)
@given(st.floats(1.0, 3.0), st.floats(1.0, 3.0))
def test_complex_pair_independent(a, b):
    maps = timemaps_from_chart(analytic_charts("linear_complex")["canonical"], X0)
    rep = independence_test(maps, np.array([a, b]))
    assert rep.gradient_matrix_rank[0] == 2
