import numpy as np
import pytest
from scipy import stats

from tradecost.data_ingest import DualReport, marginals_from_plan
from tradecost.errors import InsufficientSamples
from tradecost.inverse_model import NetworkConfig, forward, init_params
from tradecost.ot_core import TransportPlan
from tradecost.uncertainty import (
    CostEnsemble,
    build_ensemble,
    read_ensemble_csv,
    sample_plan,
    sample_rng,
    selection_pattern,
    summarize,
    write_ensemble_csv,
)


def net(k, seed=0, scale=100.0):
    p = init_params(NetworkConfig(k * k, k * k, layers=3, width=8, seed=seed), input_scale=scale)
    rng = np.random.default_rng(seed)
    return p.with_arrays([*p.weights, *(rng.normal(0, 0.3, b.shape) for b in p.biases)])


def random_report(k=4, seed=0, year=2000):
    rng = np.random.default_rng(seed)
    e = rng.uniform(1, 100, (k, k))
    i = e * rng.uniform(0.7, 1.3, (k, k))
    return DualReport(TransportPlan(e), TransportPlan(i), year)


# --- sampling --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_equal_reports_give_exact_sample(seed):
    e = TransportPlan(np.random.default_rng(seed).uniform(0, 9, (3, 3)))
    s = sample_plan(DualReport(e, TransportPlan(e.values.copy()), 2000), sample_rng(seed, 2000, 0))
    assert np.array_equal(s.values, e.values) and s.mask.all()


def test_two_entry_report_is_uniform_over_four_outcomes():
    rep = DualReport(TransportPlan([[1.0, 2.0]]), TransportPlan([[3.0, 4.0]]), 2000)
    rng = np.random.default_rng(0)
    counts = {}
    for _ in range(10_000):
        key = tuple(sample_plan(rep, rng).values.ravel())
        counts[key] = counts.get(key, 0) + 1
    assert set(counts) == {(1.0, 2.0), (1.0, 4.0), (3.0, 2.0), (3.0, 4.0)}
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_single_reporter_rule():
    e = TransportPlan([[5.0, 6.0], [7.0, 8.0]], [[True, True], [True, False]])
    i = TransportPlan([[1.0, 2.0], [3.0, 4.0]], [[False, True], [True, True]])
    rep = DualReport(e, i, 2000)
    for k in range(50):
        s = sample_plan(rep, sample_rng(1, 2000, k))
        assert s.values[0, 0] == 5.0 and s.values[1, 1] == 4.0
        assert s.values[0, 1] in (6.0, 2.0) and s.values[1, 0] in (7.0, 3.0)
        assert s.mask.all()


def test_double_masked_stays_masked():
    m = np.array([[True, False], [True, True]])
    rep = DualReport(TransportPlan(np.ones((2, 2)), m), TransportPlan(np.full((2, 2), 2.0), m), 2000)
    assert not sample_plan(rep, sample_rng(0, 2000, 0)).mask[0, 1]


def exporter_counts(rep, seed, n=1000):
    return np.stack([selection_pattern(rep, sample_rng(seed, rep.year, k)) for k in range(n)]).sum(axis=0)


def test_selection_frequency_in_binomial_band():
    lo, hi = stats.binom.ppf([0.005, 0.995], 1000, 0.5)
    freq = exporter_counts(random_report(k=3, seed=0), seed=0)
    assert np.all((freq >= lo) & (freq <= hi))


def test_out_of_band_rate_matches_binomial():
    # over many entries the misses should look like draws at the band's exact tail mass
    lo, hi = stats.binom.ppf([0.005, 0.995], 1000, 0.5)
    tail = stats.binom.cdf(lo - 1, 1000, 0.5) + stats.binom.sf(hi, 1000, 0.5)
    freq = exporter_counts(random_report(k=20, seed=1), seed=1)
    misses = int(np.sum((freq < lo) | (freq > hi)))
    assert stats.binomtest(misses, freq.size, tail).pvalue > 0.001


def test_sample_rng_streams_are_distinct_and_reproducible():
    a = sample_rng(5, 2001, 3).random(4)
    assert np.array_equal(a, sample_rng(5, 2001, 3).random(4))
    assert not np.array_equal(a, sample_rng(5, 2001, 4).random(4))
    assert not np.array_equal(a, sample_rng(5, 2002, 3).random(4))


# --- ensembles -------------------------------------------------------------

def test_zero_discrepancy_gives_zero_width():
    e = TransportPlan(np.random.default_rng(0).uniform(1, 50, (3, 3)))
    ens = build_ensemble(net(3), DualReport(e, TransportPlan(e.values.copy()), 2000), n=50)
    s = summarize(ens)
    assert np.all(ens.costs == ens.costs[0])
    assert np.all(s["std_cost"] == 0) and np.all(s["std_flow"] == 0)
    assert np.array_equal(s["mean_cost"], ens.costs[0])
    assert all(np.array_equal(q, ens.costs[0]) for q in s["q_cost"])


def test_single_member_is_one_inference():
    rep = random_report(k=3, seed=1)
    params = net(3, seed=2)
    ens = build_ensemble(params, rep, n=1, seed=9)
    expected = forward(params, sample_plan(rep, sample_rng(9, rep.year, 0))).values
    assert np.array_equal(ens.costs[0], expected)


def test_mean_between_single_report_inferences():
    e = TransportPlan([[10.0, 4.0], [3.0, 8.0]])
    i = TransportPlan([[10.0, 6.0], [3.0, 8.0]])
    params = net(2, seed=5, scale=10.0)
    ens = build_ensemble(params, DualReport(e, i, 2000), n=200)
    ce, ci = forward(params, e).values, forward(params, i).values
    mean = ens.costs.mean(axis=0)
    assert np.all(mean >= np.minimum(ce, ci)) and np.all(mean <= np.maximum(ce, ci))
    assert not np.array_equal(ce, ci)


def test_ensemble_is_deterministic():
    rep = random_report(k=4, seed=2)
    a = build_ensemble(net(4), rep, n=40, seed=3)
    b = build_ensemble(net(4), rep, n=40, seed=3)
    assert np.array_equal(a.costs, b.costs) and np.array_equal(a.plans, b.plans)


def test_plan_samples_match_their_own_marginals():
    rep = random_report(k=4, seed=4)
    params = net(4, seed=1)
    ens = build_ensemble(params, rep, n=20, seed=0, epsilon=0.2)
    assert ens.failed == []
    for k in range(ens.n):
        m = marginals_from_plan(sample_plan(rep, sample_rng(0, rep.year, k)))
        p = ens.plans[k]
        scale = m.mu.sum()
        assert np.abs(p.sum(axis=1) - m.mu).sum() / scale <= 1e-8
        assert np.abs(p.sum(axis=0) - m.nu).sum() / scale <= 1e-8


def test_fixed_marginals_option():
    rep = random_report(k=3, seed=6)
    ens = build_ensemble(net(3), rep, n=10, fix_marginals=True, epsilon=0.2)
    avg = rep.averaged().filled(0.0)
    for p in ens.plans:
        np.testing.assert_allclose(p.sum(axis=1), avg.sum(axis=1), rtol=1e-8)


def test_each_sampled_entry_is_one_of_the_reports():
    rep = random_report(k=5, seed=8)
    for k in range(30):
        s = sample_plan(rep, sample_rng(2, 2000, k)).values
        assert np.all((s == rep.exporter_plan.values) | (s == rep.importer_plan.values))


# --- summaries -------------------------------------------------------------

def ensemble_of(costs, observed=None):
    costs = np.asarray(costs, dtype=float)
    observed = np.ones(costs.shape[1:], dtype=bool) if observed is None else observed
    return CostEnsemble(2000, costs, costs.copy(), observed, 0, 0.1)


def test_two_sample_summary():
    s = summarize(ensemble_of([[[0.2]], [[0.4]]]))
    assert s["mean_cost"][0, 0] == pytest.approx(0.3)
    assert s["std_cost"][0, 0] == pytest.approx(0.141421, abs=1e-6)


def test_quantiles_interpolate_linearly():
    s = summarize(ensemble_of(np.arange(11.0).reshape(11, 1, 1)), quantiles=(0.05, 0.95))
    assert s["q_cost"][0][0, 0] == pytest.approx(0.5) and s["q_cost"][1][0, 0] == pytest.approx(9.5)


def test_failed_samples_dropped_and_counted():
    ens = ensemble_of([[[0.2]], [[0.4]], [[9.0]]])
    ens.failed = [2]
    s = summarize(ens)
    assert s["n_used"] == 2 and s["n_failed"] == 1 and s["mean_cost"][0, 0] == pytest.approx(0.3)


def test_insufficient_samples():
    with pytest.raises(InsufficientSamples):
        summarize(ensemble_of([[[0.2]]]))


def test_unobserved_entries_hidden():
    s = summarize(ensemble_of([[[0.2, 0.1]], [[0.4, 0.3]]], np.array([[True, False]])))
    assert np.isnan(s["mean_cost"][0, 1]) and np.isnan(s["std_flow"][0, 1])


def test_csv_round_trip(tmp_path):
    rep = random_report(k=3, seed=5)
    s = summarize(build_ensemble(net(3), rep, n=30))
    write_ensemble_csv(tmp_path / "e.csv", {2000: s}, ["a", "b", "Other"])
    back = read_ensemble_csv(tmp_path / "e.csv")[2000]
    assert len(back) == 9
    assert back[("a", "b")]["mean_cost"] == s["mean_cost"][0, 1]
    assert back[("b", "a")]["std_flow"] == s["std_flow"][1, 0]
    assert back[("Other", "a")]["q95"] == s["q_cost"][1][2, 0]


@pytest.mark.slow
def test_one_std_band_covers_true_cost():
    from tradecost.inverse_model import TrainingConfig, train
    from tradecost.ot_core import gauge_normalize
    from tradecost.synthetic import GeneratorConfig, generate

    data = generate(GeneratorConfig(n_countries=5, years=3, seed=0, noise=0.1))
    tc = TrainingConfig(learning_rate=3e-3, final_learning_rate=1e-5, epochs=5000, batch_size=1, patience=10**9)
    params, _ = train(data.panel, NetworkConfig(36, 36, seed=0), tc)
    inside = []
    for rep in data.panel.reports:
        g = gauge_normalize(build_ensemble(params, rep, n=1000, epsilon=0.1).costs)
        band = g.std(axis=0, ddof=1)
        inside.append(np.abs(gauge_normalize(data.true_costs[rep.year]) - g.mean(axis=0)) <= band)
    assert np.mean(inside) >= 0.6
