import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from catemeta.base_learners import ClassifierSpec, RegressorSpec, fit_classifier
from catemeta.data import ObservationalDataset, ScenarioSpec
from catemeta.evaluation import (
    benchmark,
    cate_metrics,
    efficiency_bound,
    efficiency_bound_terms,
    histogram,
)
from catemeta.metalearners import LearnerConfig, RLearnerConfig, default_learners, fit_t

OLS = RegressorSpec("ols")


def test_metrics_zero_error():
    tau = np.array([0.5, 1.0, 2.5])
    m = cate_metrics(tau, tau)
    assert (m.rmse, m.mae, m.bias) == (0.0, 0.0, 0.0)
    assert m.variance == pytest.approx(np.var(tau))


def test_metrics_constant_shift():
    tau = np.linspace(0, 1, 7)
    m = cate_metrics(tau + 0.1, tau)
    assert m.bias == pytest.approx(0.1) and m.mae == pytest.approx(0.1) and m.rmse == pytest.approx(0.1)
    assert m.variance == pytest.approx(np.var(tau))


def test_metrics_two_points():
    m = cate_metrics([1.0, 3.0], [2.0, 2.0])
    assert (m.rmse, m.mae, m.bias, m.variance) == (1.0, 1.0, 0.0, 1.0)


def test_metrics_errors():
    with pytest.raises(ValueError):
        cate_metrics([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        cate_metrics([], [])


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 40).flatmap(
        lambda n: st.tuples(
            arrays(float, n, elements=st.floats(-1e3, 1e3)),
            arrays(float, n, elements=st.floats(-1e3, 1e3)),
        )
    )
)
def test_metric_identities(pair):
    a, b = pair
    m = cate_metrics(a, b)
    scale = max(1.0, m.rmse**2)
    assert m.rmse**2 == pytest.approx(m.bias**2 + m.error_variance, abs=1e-10 * scale)
    assert m.rmse >= m.mae * (1 - 1e-12) and m.mae >= m.abs_bias * (1 - 1e-12)


def symmetric_arm(x_levels, mean, sd, reps=2):
    """Rows at each x with outcomes mean(x) +/- sd(x), so per-x residuals are exact."""
    xs, ys = [], []
    for x in x_levels:
        for sign in [1.0, -1.0] * reps:
            xs.append(x)
            ys.append(mean(x) + sign * sd(x))
    return np.array(xs), np.array(ys)


def bound_dataset(sd1, sd0, levels=(0.25, 0.75)):
    x1, y1 = symmetric_arm(levels, lambda x: 1.0 + 2.0 * x + 0.8, sd1)
    x0, y0 = symmetric_arm(levels, lambda x: 1.0 + 2.0 * x, sd0)
    X = np.concatenate([x1, x0])[:, None]
    w = np.concatenate([np.ones(len(x1)), np.zeros(len(x0))])
    return ObservationalDataset(X, w, np.concatenate([y1, y0]))


def half():
    return fit_classifier(ClassifierSpec("constant", constant=0.5), np.zeros((2, 1)), [0, 1])


def test_efficiency_bound_homoscedastic():
    data = bound_dataset(lambda x: 1.0, lambda x: 1.0)
    rep = efficiency_bound(data, fit_t(data, OLS), half(), OLS)
    assert rep.v_pate == pytest.approx(4.0, abs=1e-9)


def test_efficiency_bound_noiseless():
    data = bound_dataset(lambda x: 0.0, lambda x: 0.0)
    rep = efficiency_bound(data, fit_t(data, OLS), half(), OLS)
    assert rep.v_pate == pytest.approx(0.0, abs=1e-9)


def test_efficiency_bound_heteroscedastic():
    data = bound_dataset(lambda x: np.sqrt(x), lambda x: 0.0)
    rep = efficiency_bound(data, fit_t(data, OLS), half(), OLS)
    # mean over x in {0.25, 0.75} of x / 0.5
    assert rep.v_pate == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.isfinite(rep.contributions))


def test_efficiency_bound_effect_dispersion_term():
    rng = np.random.default_rng(0)
    tau = rng.normal(size=50)
    terms = efficiency_bound_terms(np.zeros(50), np.zeros(50), np.full(50, 0.3), tau)
    assert terms.mean() == pytest.approx(np.var(tau))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_efficiency_bound_monotone_in_noise(seed):
    rng = np.random.default_rng(seed)
    s1, s0 = rng.uniform(0, 3, 20), rng.uniform(0, 3, 20)
    e = rng.uniform(0.01, 0.99, 20)
    tau = rng.normal(size=20)
    base = efficiency_bound_terms(s1, s0, e, tau) - efficiency_bound_terms(0 * s1, 0 * s0, e, tau)
    doubled = efficiency_bound_terms(2 * s1, 2 * s0, e, tau) - efficiency_bound_terms(0 * s1, 0 * s0, e, tau)
    assert np.all(doubled >= 2 * base - 1e-12)


def test_histogram_examples():
    edges, counts = histogram([1.0, 1.0, 1.0], bins=1)
    assert counts.tolist() == [3]
    edges, counts = histogram([0, 1, 2, 3], bins=2, range=(0, 4))
    assert counts.tolist() == [2, 2]
    edges, counts = histogram([0.0, 1.0, 2.0], bins=4)
    assert counts.sum() == 3 and counts[-1] == 1
    with pytest.raises(ValueError):
        histogram([], bins=3)
    assert histogram([], bins=3, range=(0, 1))[1].sum() == 0


def test_histogram_near_constant_values():
    edges, counts = histogram(1.3 + np.array([0.0, 2e-16, -2e-16]), bins=4)
    assert counts.sum() == 3 and edges[-1] - edges[0] == pytest.approx(1.0)


def test_benchmark_exact_constant_effect():
    scen = ScenarioSpec("linear", 1000, 0.0, 0, {"theta": [0.0, 0.0, 0.0], "c": 0.7})
    configs = default_learners(OLS, r_config=RLearnerConfig(tau_lambda=0.0))
    rep = benchmark(scen, configs, replications=3, seed=11)
    assert rep.learners == ["S", "T", "X", "R"]
    for name in rep.learners:
        assert rep.mean_metrics(name).rmse < 1e-6
    assert rep.seeds == [11, 12, 13] and not rep.failures


def test_benchmark_records_failures():
    scen = ScenarioSpec("linear", 30, 1.0, 0)
    configs = [LearnerConfig("T"), LearnerConfig("T", base=RegressorSpec("knn", k=25), name="T_knn")]
    rep = benchmark(scen, configs, replications=2, seed=0)
    assert [f[0] for f in rep.failures] == ["T_knn", "T_knn"]
    assert rep.metrics["T_knn"] == [None, None]
    assert rep.mean_metrics("T") is not None
    assert "failures" in rep.to_text() and "T_knn,1" in rep.to_csv()


def test_benchmark_deterministic_and_thread_independent():
    scen = ScenarioSpec("electricity", 400, 1.0, 0)
    a = benchmark(scen, default_learners(), 4, seed=5)
    b = benchmark(scen, default_learners(), 4, seed=5, n_jobs=3)
    assert a.to_text() == b.to_text() and a.to_csv() == b.to_csv()
    assert len(a.to_csv().splitlines()) == 1 + 4 * 4
