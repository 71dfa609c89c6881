import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvlimit.flow import (
    BoxExitError, EquilibriumError, FlowError, averaged_coefficients, find_equilibrium, gronwall_constant,
    integrate_flow, interaction_matrix, jacobian, jacobian_fd, theta,
)

from conftest import finite_raw, spec_from


def test_interaction_matrix_symmetric(shipped):
    _, spec = shipped("symmetric")
    assert np.allclose(interaction_matrix(spec, [1.5, 1.5]), [[-1, 1], [1, -1]], atol=1e-14)


def test_interaction_matrix_logistic_at_equilibrium(shipped):
    _, spec = shipped("logistic")
    assert np.allclose(interaction_matrix(spec, [2.0]), [[0.0]], atol=1e-14)


def test_interaction_matrix_diagonal_without_cross_births(shipped):
    _, spec = shipped("decoupled")
    A = interaction_matrix(spec, [0.7, 1.3])
    assert A[0, 1] == 0 and A[1, 0] == 0


def test_interaction_matrix_outside_box(shipped):
    _, spec = shipped("logistic")
    with pytest.raises(FlowError):
        interaction_matrix(spec, [9.0])


def test_theta_examples(shipped):
    _, log = shipped("logistic")
    assert theta(log, [2.0])[0] == pytest.approx(0.0, abs=1e-14)
    assert theta(log, [0.5])[0] == pytest.approx(2 * 0.5 - 0.25)
    assert np.all(theta(log, [0.0]) == 0)
    _, sym = shipped("symmetric")
    assert np.allclose(theta(sym, [1.0, 1.0]), [1.0, 1.0])


def test_logistic_flow_closed_form(shipped):
    _, spec = shipped("logistic")
    h0 = 0.1
    exact = 2 * h0 * np.exp(2) / (2 + h0 * (np.exp(2) - 1))
    assert integrate_flow(spec, [h0], 1.0, tol=1e-12).final[0] == pytest.approx(exact, abs=1e-9)
    assert exact == pytest.approx(0.5600091243301478, rel=1e-12)


def test_flow_at_equilibrium_is_constant(shipped):
    _, spec = shipped("logistic")
    fl = integrate_flow(spec, [2.0], 3.0)
    assert np.allclose(fl.h, 2.0, atol=1e-12)


def test_symmetric_flow_total_goes_to_three(shipped):
    _, spec = shipped("symmetric")
    assert integrate_flow(spec, [0.5, 2.5], 30.0).final.sum() == pytest.approx(3.0, abs=1e-8)


def test_semigroup_property(shipped):
    _, spec = shipped("symmetric")
    tol = 1e-10
    h0 = np.array([0.3, 1.9])
    direct = integrate_flow(spec, h0, 1.7, tol).final
    mid = integrate_flow(spec, h0, 0.6, tol).final
    split = integrate_flow(spec, mid, 1.1, tol).final
    assert np.abs(direct - split).max() < 10 * tol * 10


def test_flow_leaving_box_reports_exit_time():
    spec = spec_from(finite_raw([["2"]], ["0.1*h1"], H_max=3))
    with pytest.raises(BoxExitError) as exc:
        integrate_flow(spec, [1.0], 50.0)
    assert exc.value.t_exit > 0


def test_logistic_equilibrium():
    from fvlimit import config
    _, spec = config.load("logistic")
    eq = find_equilibrium(spec, [1.0])
    assert eq.h_eq[0] == pytest.approx(2.0, abs=1e-10)
    assert eq.v_eq[0] == pytest.approx(0.5, abs=1e-12)
    assert eq.gamma_smpl == pytest.approx(1.0, abs=1e-12)


def test_symmetric_equilibrium(shipped):
    _, spec = shipped("symmetric")
    eq = find_equilibrium(spec)
    assert np.allclose(eq.h_eq, 1.5, atol=1e-10)
    assert np.allclose(eq.v_eq, 1 / 3, atol=1e-12)
    assert np.allclose(np.sort(eq.eig_A.real), [-2, 0], atol=1e-8)
    assert np.allclose(np.sort(eq.eig_J.real), [-3, -2], atol=1e-8)
    assert eq.gamma_smpl == pytest.approx(1.0, abs=1e-12)
    # dense eigensolver cross-check
    assert np.allclose(np.sort(np.linalg.eigvals(eq.A).real), [-2, 0], atol=1e-8)


def test_equilibrium_invariants(shipped):
    for name in ("logistic", "symmetric", "immigration", "genetics", "polarity"):
        _, spec = shipped(name)
        eq = find_equilibrium(spec)
        assert np.abs(theta(spec, eq.h_eq)).max() < 1e-10
        assert np.abs(eq.v_eq @ interaction_matrix(spec, eq.h_eq)).max() < 1e-10
        assert eq.v_eq @ eq.h_eq == pytest.approx(1.0, abs=1e-12)
        assert (eq.h_eq > 0).all() and (eq.v_eq > 0).all()


def test_polarity_equilibrium(shipped):
    _, spec = shipped("polarity")
    eq = find_equilibrium(spec)
    assert eq.h_eq[0] == pytest.approx(0.5, abs=1e-10)
    avg = averaged_coefficients(spec, eq)
    assert avg.gamma_smpl == pytest.approx(1.0 / 0.5, abs=1e-10)


def test_g_bar_spectrum_is_a_without_zero(shipped):
    _, spec = shipped("symmetric")
    eq = find_equilibrium(spec)
    nonzero = np.sort_complex(eq.eig_A[np.abs(eq.eig_A) > 1e-8])
    assert np.allclose(np.sort_complex(eq.eig_G_bar), nonzero, atol=1e-10)


def test_jacobian_matches_finite_differences(shipped):
    _, spec = shipped("symmetric")
    for h in ([0.4, 2.0], [1.5, 1.5], [3.0, 0.2]):
        assert np.allclose(jacobian(spec, h), jacobian_fd(spec, h), atol=1e-7)


def test_no_isolated_equilibrium_is_an_error():
    spec = spec_from(finite_raw([["1"]], ["1"]))
    with pytest.raises(EquilibriumError):
        find_equilibrium(spec)


def test_averaged_weights(shipped):
    _, log = shipped("logistic")
    avg = averaged_coefficients(log, find_equilibrium(log))
    assert np.allclose(avg.migration_weights, [1.0])
    _, sym = shipped("symmetric")
    avg = averaged_coefficients(sym, find_equilibrium(sym))
    assert np.allclose(avg.migration_weights, [0.5, 0.5])
    assert avg.migration_weights.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 4.0), st.floats(0.0, 4.0))
def test_orthant_is_forward_invariant(a, b):
    from fvlimit import config
    _, spec = config.load("symmetric")
    for h in ([0.0, b], [a, 0.0]):
        th = theta(spec, h)
        assert th[0] >= 0 if h[0] == 0 else True
        assert th[1] >= 0 if h[1] == 0 else True


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.floats(0.1, 1.5))
def test_gronwall_bound(a, b, t):
    from fvlimit import config
    _, spec = config.load("symmetric")
    h0 = np.array([a, b])
    C = gronwall_constant(spec)
    assert integrate_flow(spec, h0, t).final.sum() <= h0.sum() * np.exp(C * t) + 1e-9
