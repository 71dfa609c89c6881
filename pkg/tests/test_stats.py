import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fvlimit import io
from fvlimit.engine import SimConfig, TrajectoryRecord, simulate_replicates
from fvlimit.model import FiniteSet, ModelError, PopulationState, Sphere
from fvlimit.stats import (DiagnosticError, centroid, clan_statistics, compare_samples, density_deviation,
                           fixation_estimate, inseparability, strictly_decreasing, yn_paths)


FINITE = FiniteSet(2, (((0.0, 0.0), (0.0, 0.0)),))
SPHERE = Sphere(1.0, (1.0,))


def record(counts, obs, N=100, t_N=0.1, T=1.0, times=None):
    counts = np.asarray(counts, dtype=np.int64)
    G = counts.shape[0]
    times = np.linspace(t_N, t_N + T, G) if times is None else np.asarray(times)
    return TrajectoryRecord(N=N, q=counts.shape[1], times=times, counts=counts,
                            observables={"f": np.asarray(obs, dtype=float)}, counters={}, status="ok",
                            status_time=None, t_N=t_N, T_end=T)


# ------------------------------------------------------------------ two-sample comparison

def test_identical_samples_have_zero_statistic():
    x = np.random.default_rng(0).normal(size=300)
    res = compare_samples(x, x.copy())
    assert res.statistic == 0.0 and res.pvalue == 1.0
    assert not res.degenerate


def test_ks_false_rejection_rate():
    rng = np.random.default_rng(1)
    rejections = sum(compare_samples(rng.uniform(size=500), rng.uniform(size=500)).pvalue < 0.01
                     for _ in range(100))
    assert rejections <= 3


def test_ks_detects_a_shift():
    rng = np.random.default_rng(2)
    assert compare_samples(rng.normal(size=500), rng.normal(0.3, size=500)).pvalue < 0.01


def test_ks_flags_degenerate_and_rejects_empty():
    assert compare_samples(np.ones(10), np.arange(10.0)).degenerate
    with pytest.raises(DiagnosticError):
        compare_samples([], [1.0])


# ------------------------------------------------------------------ proportions

def test_wilson_interval():
    p = fixation_estimate([True] * 300 + [False] * 700)
    assert p.estimate == 0.3
    z = 1.959963984540054
    n, ph = 1000, 0.3
    centre = (ph + z * z / (2 * n)) / (1 + z * z / n)
    half = z / (1 + z * z / n) * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n))
    assert p.low == pytest.approx(centre - half, abs=1e-12)
    assert p.high == pytest.approx(centre + half, abs=1e-12)


def test_wilson_at_the_edges():
    p = fixation_estimate([False] * 50)
    assert p.low == 0.0 and 0 < p.high < 0.1
    with pytest.raises(DiagnosticError):
        fixation_estimate([])


# ------------------------------------------------------------------ trajectory diagnostics

def test_constant_at_equilibrium_gives_zero():
    rec = record(np.tile([50, 30], (11, 1)), np.tile([0.2, 0.12], (11, 1)))
    assert density_deviation(rec, [0.5, 0.3]) == 0.0


def test_offset_gives_its_l1_size():
    rec = record(np.tile([60, 30], (11, 1)), np.zeros((11, 2)))
    assert density_deviation(rec, [0.5, 0.3]) == pytest.approx(0.1, abs=1e-15)


def test_single_type_is_inseparable():
    rec = record(np.arange(40, 51)[:, None], np.linspace(0.1, 0.3, 11)[:, None])
    assert inseparability(rec, "f") == 0.0
    np.testing.assert_array_equal(yn_paths(rec, "f"), 0.0)


def test_proportional_measures_are_inseparable():
    h = np.array([[50, 30]] * 11)
    rec = record(h, 0.4 * h / 100)
    assert inseparability(rec, "f") == pytest.approx(0.0, abs=1e-15)


def test_inseparability_hand_value():
    rec = record(np.array([[50, 50]] * 3), np.array([[0.1, 0.3]] * 3), T=1.0)
    # |h_2 <f,mu_1> - h_1 <f,mu_2>| = 0.5 * |0.1 - 0.3|
    assert inseparability(rec, "f") == pytest.approx(0.1, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_yn_sums_to_zero(q, G, seed):
    rng = np.random.default_rng(seed)
    rec = record(rng.integers(0, 200, size=(G, q)), rng.normal(size=(G, q)))
    y = yn_paths(rec, "f")
    assert y.shape == (G, q)
    assert np.abs(y.sum(axis=1)).max() <= 1e-12


def test_window_must_be_covered():
    rec = record(np.tile([50], (5, 1)), np.zeros((5, 1)), times=[0.1, 0.3, 0.5, 0.7, 0.9])
    with pytest.raises(DiagnosticError):
        density_deviation(rec, [0.5])
    with pytest.raises(DiagnosticError):
        inseparability(record(np.tile([50], (3, 1)), np.zeros((3, 1))), "g")


def test_strictly_decreasing():
    assert strictly_decreasing([3, 2, 1])
    assert not strictly_decreasing([3, 3, 1])
    assert strictly_decreasing([1.0])


def test_csv_round_trip_reproduces_diagnostics(tmp_path):
    from fvlimit import config

    raw, spec = config.load("symmetric")
    recs = simulate_replicates(spec, SimConfig(N=100, T_end=0.5, seed=3, record_points=11), 3)
    run = io.RunDir(tmp_path, raw, ["test"], 3)
    header, rows = io.trajectory_rows(recs)
    run.write_csv("trajectories.csv", header, rows)
    run.write_json("meta.json", io.trajectory_meta(recs))
    back = io.read_trajectories(run.path / "trajectories.csv", run.path / "meta.json")
    h_eq = [0.5, 0.5]
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.counts, b.counts)
        assert density_deviation(a, h_eq) == density_deviation(b, h_eq)
        for f in a.observables:
            assert inseparability(a, f) == inseparability(b, f)
            np.testing.assert_array_equal(yn_paths(a, f), yn_paths(b, f))


# ------------------------------------------------------------------ clans

def test_single_clan_on_one_site():
    pop = PopulationState(10, [np.zeros((10, 1))], [np.full(10, 0.3)])
    cs = clan_statistics(pop, FINITE)
    assert cs.largest_share == 1.0
    np.testing.assert_array_equal(cs.weights, [1.0])
    assert cs.dispersion[0] == 0.0 and cs.n_dominant == 1


def test_clan_weights_sorted_and_normalised():
    clans = np.array([1.0] * 5 + [2.0] * 3 + [3.0] * 2)
    pop = PopulationState(10, [np.zeros((10, 1))], [clans])
    cs = clan_statistics(pop, FINITE, dominant_share=0.25)
    np.testing.assert_allclose(cs.weights, [0.5, 0.3, 0.2])
    assert cs.n_dominant == 2


def test_sphere_clan_dispersion_hand_value():
    # two points a quarter circle apart: centroid on the bisector, geodesic distances
    a = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    pop = PopulationState(2, [a], [np.array([0.5, 0.5])])
    cs = clan_statistics(pop, SPHERE)
    c = centroid(SPHERE, a)
    np.testing.assert_allclose(c, [2 ** -0.5, 2 ** -0.5, 0.0])
    assert cs.dispersion[0] == pytest.approx((math.pi / 4) ** 2, rel=1e-12)
    assert cs.pair_dispersion[0] == pytest.approx((math.pi / 2) ** 2, rel=1e-12)


def test_clan_statistics_need_clans():
    with pytest.raises(ModelError):
        clan_statistics(PopulationState(2, [np.zeros((2, 1))]), FINITE)
