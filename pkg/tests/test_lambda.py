import numpy as np
import pytest

from fvlimit.flow import find_equilibrium, integrate_flow, interaction_matrix
from fvlimit.lambda_series import (
    LambdaError, extend_lambda, gamma_map, lambda_function, multi_indices, pde_residual, residual_profile,
    solve_series, transport_matrix,
)
from fvlimit.model import PopulationState

from conftest import finite_raw, spec_from


@pytest.fixture(scope="module")
def logistic(shipped):
    _, spec = shipped("logistic")
    eq = find_equilibrium(spec)
    return spec, eq, solve_series(spec, eq, k_max=8)


@pytest.fixture(scope="module")
def symmetric(shipped):
    _, spec = shipped("symmetric")
    eq = find_equilibrium(spec)
    return spec, eq, solve_series(spec, eq, k_max=8)


def test_multi_indices_graded():
    idx = multi_indices(2, 2)
    assert len(idx) == 3 and all(sum(a) == 2 for a in idx)
    assert len(set(idx)) == 3


def test_logistic_coefficients(logistic):
    _, _, s = logistic
    for k in range(9):
        assert s.coefficient((k,))[0] == pytest.approx((-1) ** k * 2.0 ** -(k + 1), abs=1e-10)


def test_symmetric_series_value(symmetric):
    spec, eq, s = symmetric
    h = eq.h_eq + np.array([0.05, -0.02])
    assert np.allclose(s(h), 1 / h.sum(), atol=1e-9)


def test_symmetric_at_equilibrium_is_one_third(symmetric):
    spec, eq, s = symmetric
    assert np.allclose(extend_lambda(spec, s, [1.5, 1.5]), 1 / 3, atol=1e-12)


def test_extension_matches_closed_form_on_grid(symmetric):
    spec, _, s = symmetric
    g = np.linspace(0.8, 2.5, 10)
    err = max(np.abs(extend_lambda(spec, s, [a, b]) - 1 / (a + b)).max() for a in g for b in g)
    assert err < 1e-7


def test_extension_logistic_far_from_equilibrium(logistic):
    spec, _, s = logistic
    for h in (0.05, 0.5, 3.5, 6.0):
        assert extend_lambda(spec, s, [h])[0] == pytest.approx(1 / h, rel=1e-8)


def test_normalisation_and_positivity(symmetric):
    spec, _, s = symmetric
    rng = np.random.default_rng(3)
    for h in rng.uniform(0.3, 3.0, size=(20, 2)):
        lam = extend_lambda(spec, s, h)
        assert (lam > 0).all()
        assert lam @ h == pytest.approx(1.0, abs=1e-8)


def test_membership_undetermined_outside_attraction_region(logistic):
    spec, _, s = logistic
    with pytest.raises(LambdaError, match="undetermined"):
        extend_lambda(spec, s, [0.0])


@pytest.mark.parametrize("name", ["logistic", "symmetric"])
@pytest.mark.parametrize("k", [2, 3, 5, 8])
def test_residual_decay_slope(shipped, name, k):
    _, spec = shipped(name)
    eq = find_equilibrium(spec)
    radii, worst, slope = residual_profile(spec, solve_series(spec, eq, k_max=k))
    assert slope >= k + 0.5
    above = worst[worst > 1e-13]
    assert (np.diff(above) < 0).all()


def test_residual_profile_refuses_pure_roundoff(logistic):
    spec, _, s = logistic
    with pytest.raises(LambdaError, match="roundoff"):
        residual_profile(spec, s, radii=(1e-3, 1e-4, 1e-5))


def test_degree_diagnostics_present(symmetric):
    _, _, s = symmetric
    assert [d.k for d in s.diagnostics] == list(range(1, 9))
    assert all(d.condition < 1e12 for d in s.diagnostics)
    assert s.growth_ok()
    assert s.r_trust > 0


def test_transport_chapman_kolmogorov(shipped):
    _, spec = shipped("symmetric")
    h = np.array([0.7, 2.2])
    t0, s_ = 2.0, 0.8
    full = transport_matrix(spec, h, t0)
    split = transport_matrix(spec, h, s_) @ transport_matrix(spec, h, t0, s_)
    assert np.abs(full - split).max() < 1e-7


def test_transport_positivity_and_identity(shipped):
    _, spec = shipped("symmetric")
    h = np.array([0.4, 2.6])
    assert np.array_equal(transport_matrix(spec, h, 1.0, 1.0), np.eye(2))
    for t0 in (0.1, 1.0, 5.0):
        assert transport_matrix(spec, h, t0).min() > -1e-7


def test_constancy_along_flow(shipped, symmetric):
    spec, _, s = symmetric
    h = np.array([0.6, 2.0])
    fl = integrate_flow(spec, h, 0.5, tol=1e-12)
    ts = np.linspace(0.05, 0.45, 5)
    dt = 1e-4
    for t in ts:
        hp, hm, h0 = fl.solution(t + dt), fl.solution(t - dt), fl.solution(t)
        lp, lm = extend_lambda(spec, s, hp), extend_lambda(spec, s, hm)
        lam = extend_lambda(spec, s, h0)
        d = (lp - lm) / (2 * dt)
        assert np.abs(d + interaction_matrix(spec, h0).T @ lam).max() < 1e-6


def test_pde_residual_of_extension_small(symmetric):
    spec, _, s = symmetric
    f = lambda_function(spec, s)
    res, norm = pde_residual(spec, f, np.array([1.0, 2.2]), richardson=True)
    assert np.abs(res).max() < 1e-6 and abs(norm) < 1e-8


def test_gamma_map_weights(symmetric):
    spec, _, s = symmetric
    N = 100
    pop = PopulationState(N, [np.zeros((150, 1)), np.ones((150, 1))])
    m = gamma_map(lambda_function(spec, s), pop)
    assert np.allclose(m.weights, (1 / 3) / N)
    assert m.total_mass == pytest.approx(1.0, abs=1e-12)


def test_complex_spectrum_is_handled():
    raw = finite_raw([["0.5", "1.3"], ["0.7", "0.9"]], ["2.3*h2 + 0.1*h1", "0.9*h1 + 1.5*h2"])
    spec = spec_from(raw)
    eq = find_equilibrium(spec)
    assert np.abs(eq.eig_J.imag).max() > 0.2
    s = solve_series(spec, eq, k_max=6)
    assert np.isrealobj(s.gammas)
    for h in (eq.h_eq * 1.03, eq.h_eq * np.array([0.98, 1.02])):
        lam = s(h)
        assert lam @ h == pytest.approx(1.0, abs=1e-7)
        res, _ = pde_residual(spec, s, h, jac=s.jacobian)
        assert np.abs(res).max() < 1e-6
    far = np.array([0.2, 1.6])
    lam = extend_lambda(spec, s, far)
    assert (lam > 0).all() and lam @ far == pytest.approx(1.0, abs=1e-8)
