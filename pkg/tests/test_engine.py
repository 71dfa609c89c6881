import numpy as np
import pytest
from scipy import stats

from conftest import finite_raw, spec_from
from fvlimit.demos import with_infinite_alleles
from fvlimit.engine import InitialLaw, SimConfig, Simulator, simulate, simulate_replicates
from fvlimit.engine.generator import (TestFunction, final_site_counts, generator_apply,
                                      generator_consistency_test, linear, transitions)
from fvlimit.engine.kernel import DEATH, DISPERSED_BIRTH, IMMIGRATION, LOCAL_BIRTH, MIGRATION
from fvlimit.model import PopulationState


def sites_pop(N, per_type_sites):
    return PopulationState(N, [np.asarray(s, float)[:, None] for s in per_type_sites])


def test_zero_rates_leave_population_unchanged():
    spec = spec_from(finite_raw([["0"]], ["0"]))
    pop = sites_pop(10, [[0, 0, 1, 1, 1]])
    sim = Simulator(spec, pop, seed=3)
    assert sim.advance_to(1.0) == "ok"
    np.testing.assert_array_equal(sim.count, [5])
    np.testing.assert_array_equal(sim.sites, [[2, 3]])
    assert sum(sim.counter_dict().values()) - sim.counter_dict()["iterations"] == 0


def test_logistic_mean_after_warmup(shipped):
    spec = shipped("logistic")[1]
    cfg = SimConfig(N=400, T_end=1.0, seed=21, record_points=2, initial=InitialLaw((0.5,)))
    recs = simulate_replicates(spec, cfg, 200)
    final = np.array([r.h[-1, 0] for r in recs])
    # the density drift is N * theta, so h settles at 2 well before t_N
    assert abs(final.mean() - 2.0) < 0.05
    assert final.std() > 0


def test_logistic_mean_from_equilibrium(shipped):
    spec = shipped("logistic")[1]
    cfg = SimConfig(N=400, T_end=1.0, seed=4, record_points=2, initial=InitialLaw((2.0,)))
    recs = simulate_replicates(spec, cfg, 200)
    assert abs(np.mean([r.h[-1, 0] for r in recs]) - 2.0) < 0.05


def test_same_seed_same_trajectory(shipped):
    spec = shipped("symmetric")[1]
    cfg = SimConfig(N=200, T_end=0.5, seed=9, record_points=11)
    a, pa = simulate(spec, cfg, replicate=2)
    b, pb = simulate(spec, cfg, replicate=2)
    np.testing.assert_array_equal(a.counts, b.counts)
    for n in a.observables:
        np.testing.assert_array_equal(a.observables[n], b.observables[n])
    for x, y in zip(pa.locations, pb.locations):
        np.testing.assert_array_equal(x, y)
    c, _ = simulate(spec, cfg, replicate=3)
    assert not np.array_equal(a.counts, c.counts)


def test_parallel_workers_match_serial(shipped):
    spec = shipped("logistic")[1]
    cfg = SimConfig(N=100, T_end=0.3, seed=2, record_points=4, initial=InitialLaw((1.0,)))
    serial = simulate_replicates(spec, cfg, 3)
    par = simulate_replicates(spec, cfg, 3, workers=2)
    for a, b in zip(serial, par):
        np.testing.assert_array_equal(a.counts, b.counts)


def test_trace_replay_reproduces_site_counts(shipped):
    spec = shipped("immigration")[1]
    pop = InitialLaw((2.0,)).sample(spec, 60, np.random.default_rng(0))
    sim = Simulator(spec, pop, seed=5, trace_capacity=200_000)
    start = sim.sites.copy()
    sim.advance_to(0.5)
    t, v = sim.trace()
    assert len(t) == int(sim.ntrace[0]) > 100
    assert (np.diff(t) >= 0).all()
    sites = start.copy()
    for kind, i, j, a, b in v:
        if kind in (LOCAL_BIRTH, DISPERSED_BIRTH):
            if kind == LOCAL_BIRTH:
                assert a == b
            sites[j, b] += 1
        elif kind == DEATH:
            sites[i, a] -= 1
        elif kind == IMMIGRATION:
            sites[i, a] += 1
        elif kind == MIGRATION:
            assert a != b
            sites[i, a] -= 1
            sites[i, b] += 1
        assert (sites >= 0).all()
    np.testing.assert_array_equal(sites, sim.sites)
    np.testing.assert_array_equal(sites.sum(axis=1), sim.count)
    counts = sim.counter_dict()
    kinds = np.bincount(v[:, 0], minlength=5)
    assert kinds[IMMIGRATION] == counts["immigrations"] > 0
    assert kinds[MIGRATION] == counts["migrations"] > 0


def test_clans_never_appear_without_mutation(shipped):
    raw = shipped("genetics")[0]
    raw = {**raw, "clans": {"track": True}}
    spec = spec_from(raw)
    pop = InitialLaw((0.5,)).sample(spec, 200, np.random.default_rng(1))
    before = set(np.concatenate(pop.clans).tolist())
    sim = Simulator(spec, pop, seed=8)
    sim.advance_to(2.0)
    after = set(np.concatenate(sim.population().clans).tolist())
    assert after <= before
    assert len(after) < len(before)


def test_new_clans_come_only_from_mutations(shipped):
    spec = spec_from(with_infinite_alleles(shipped("genetics")[0], 1.0))
    pop = InitialLaw((0.5,), clans="single").sample(spec, 200, np.random.default_rng(1))
    sim = Simulator(spec, pop, seed=8, trace_capacity=500_000)
    sim.advance_to(3.0)
    _, v = sim.trace()
    mutations = int((v[:, 0] == DISPERSED_BIRTH).sum())
    assert mutations > 0
    labels = set(np.concatenate(sim.population().clans).tolist())
    assert len(labels - {0.5}) <= mutations


def test_thinned_constant_rate_matches_folded_rate():
    # a constant slow birth rate b per particle is the same process as beta + b/N
    N, b = 50, 1.0
    thin = finite_raw([["2"]], ["h1"], position=[
        {"target": "b_s", "i": 1, "j": 1, "bound": b, "terms": [{"basis": "const", "coef": str(b)}]}])
    folded = finite_raw([[str(2 + b / N)]], ["h1"])
    pop = sites_pop(N, [[0] * 50 + [1] * 50])
    a = final_site_counts(spec_from(thin), pop, 0.05, 2000, seed=1).sum(axis=(1, 2))
    c = final_site_counts(spec_from(folded), pop, 0.05, 2000, seed=2).sum(axis=(1, 2))
    assert stats.ks_2samp(a, c).pvalue > 0.01
    sim = Simulator(spec_from(thin), pop, seed=4)
    sim.advance_to(0.2)
    assert sim.counter_dict()["rejected"] == 0


def test_thinning_rejects_when_bound_is_loose():
    thin = finite_raw([["2"]], ["h1"], position=[
        {"target": "b_s", "i": 1, "j": 1, "bound": 4.0, "terms": [{"basis": "site:1", "coef": "1"}]}])
    sim = Simulator(spec_from(thin), sites_pop(50, [[0] * 50 + [1] * 50]), seed=4)
    sim.advance_to(0.2)
    assert sim.counter_dict()["rejected"] > 0


def test_generator_of_constant_is_zero(shipped):
    spec = shipped("symmetric")[1]
    pop = InitialLaw((0.3, 0.6)).sample(spec, 40, np.random.default_rng(0))
    ones = np.ones(spec.domain.K)
    F = TestFunction(((ones, lambda h: np.full(2, 1.0 / h.sum())),), "one")
    assert F(pop.site_counts(spec.domain.K), 40) == pytest.approx(1.0)
    assert generator_apply(spec, F, pop) == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("h0", [0.5, 2.0, 3.25])
def test_generator_of_density_is_theta(shipped, h0):
    spec = shipped("logistic")[1]
    N = 40
    pop = InitialLaw((h0,)).sample(spec, N, np.random.default_rng(0))
    F = TestFunction(((np.ones(2), [1.0]),), "h")
    assert generator_apply(spec, F, pop) == pytest.approx(N * (2 * h0 - h0 ** 2), rel=1e-12)


def test_single_particle_migration_matches_master_equation():
    m01, m10 = 0.7, 1.9
    spec = spec_from(finite_raw([["0"]], ["0"], migration=[[[-m01, m01], [m10, -m10]]]))
    N = 5
    pop = sites_pop(N, [[0]])
    F = linear([0.0, 1.0], 0, 1)
    # two-state chain from site 0: d/dt P(site 1) at t = 0 is m01
    assert generator_apply(spec, F, pop) == pytest.approx(m01 / N, rel=1e-12)
    assert sum(r for r, _ in transitions(spec, pop.site_counts(2), N)) == pytest.approx(m01)
    t = 0.3
    p1 = m01 / (m01 + m10) * (1 - np.exp(-(m01 + m10) * t))
    finals = final_site_counts(spec, pop, t, 20000, seed=3)
    est = finals[:, 0, 1].mean()
    assert abs(est - p1) < 4 * np.sqrt(p1 * (1 - p1) / 20000)


def test_consistency_zero_rates_gives_zero():
    spec = spec_from(finite_raw([["0"]], ["0"]))
    pop = sites_pop(20, [[0] * 12 + [1] * 8])
    res = generator_consistency_test(spec, linear([1.0, -1.0], 0, 1), pop, 1e-3, 200, seed=1)
    assert res.z == 0.0
    assert res.estimate == res.exact == 0.0


def test_immigration_only_drift_equals_kappa():
    raw = finite_raw([["0"]], ["0"], migration=None)
    raw["rates"]["kappa"] = ["1.5"]
    spec = spec_from(raw)
    N = 30
    pop = sites_pop(N, [[0] * 6])
    F = TestFunction(((np.ones(2), [1.0]),), "h")
    assert generator_apply(spec, F, pop) == pytest.approx(1.5, rel=1e-12)
    res = generator_consistency_test(spec, F, pop, 1e-2, 20000, seed=2)
    assert abs(res.z) < 4


def test_logistic_consistency_small_batch(shipped):
    spec = shipped("logistic")[1]
    N = 50
    pop = InitialLaw((1.0,)).sample(spec, N, np.random.default_rng(0))
    F = TestFunction(((np.ones(2), [1.0]),), "h")
    res = generator_consistency_test(spec, F, pop, 1e-4 / N, 20000, seed=6)
    assert abs(res.z) < 4
    assert res.exact == pytest.approx(N * (2 - 1), rel=1e-12)
