"""Exit criteria for the package, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary lists a
PASS/FAIL line for every criterion.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from catemeta.base_learners import ClassifierSpec, RegressorSpec, fit_classifier
from catemeta.cli import main
from catemeta.data import ObservationalDataset, ScenarioSpec, generate
from catemeta.evaluation import cate_metrics, efficiency_bound
from catemeta.metalearners import (
    RLearnerConfig,
    default_learners,
    estimate_ate,
    fit_learner,
    fit_nuisance,
    fit_r,
    fit_t,
    fit_x,
    naive_ate,
    r_loss,
)

OLS = RegressorSpec("ols")
README = Path(__file__).resolve().parents[1] / "README.md"


def exact_learners():
    r = RLearnerConfig(tau_lambda=0.0, propensity=ClassifierSpec("constant", constant=0.3))
    return default_learners(OLS, r_config=r)


def test_c1_reference_results_documented_not_asserted(gate):
    text = README.read_text(encoding="utf-8")
    values = ["1.92", "1.3", "1.03", "0.22", "0.18", "0.15", "0.25", "0.12", "0.015", "0.04"]
    missing = [v for v in values if v not in text]
    gate("C1 reference results", not missing and "not reproduced" in text,
         "README records the original study's figures as context only" if not missing else f"missing {missing}")


def test_c2_oracle_exactness(gate):
    t0 = time.perf_counter()
    const = generate(ScenarioSpec("linear", 2000, 0.0, 0, {"d": 3, "theta": [0.0, 0.0, 0.0], "c": 0.7}))
    errs = {}
    for cfg in exact_learners():
        tau = fit_learner(cfg, const.dataset).predict_cate(const.dataset.features)
        errs[cfg.name] = float(np.max(np.abs(tau - const.true_cate)))
    # heterogeneous effect: an additive S design cannot represent it, so only T, X, R are held to it
    het = generate(ScenarioSpec("linear", 2000, 0.0, 0, {"d": 3}))
    het_errs = {}
    for cfg in exact_learners():
        tau = fit_learner(cfg, het.dataset).predict_cate(het.dataset.features)
        het_errs[cfg.name] = float(np.max(np.abs(tau - het.true_cate)))
    elapsed = time.perf_counter() - t0
    ok = (
        max(errs.values()) < 1e-6
        and max(het_errs[k] for k in "TXR") < 1e-6
        and elapsed < 10
    )
    gate("C2 oracle exactness", ok,
         f"constant effect max err {max(errs.values()):.2e} (S,T,X,R); heterogeneous T/X/R "
         f"{max(het_errs[k] for k in 'TXR'):.2e} (S {het_errs['S']:.2f}); {elapsed:.2f}s")


def test_c3_null_effect_calibration(gate):
    t0 = time.perf_counter()
    configs = default_learners()
    ates = {c.name: [] for c in configs}
    for seed in range(20):
        s = generate(ScenarioSpec("null_effect", 10000, 1.0, seed))
        for cfg in configs:
            ates[cfg.name].append(estimate_ate(fit_learner(cfg, s.dataset), s.dataset.features))
    means = {k: float(np.mean(v)) for k, v in ates.items()}
    elapsed = time.perf_counter() - t0
    ok = all(abs(m) < 0.05 for m in means.values()) and elapsed < 120
    gate("C3 null-effect calibration", ok,
         ", ".join(f"{k} {m:+.4f}" for k, m in means.items()) + f"; {elapsed:.1f}s")


def test_c4_confounding_bias_reduction(gate):
    wins = 0
    naive_min = np.inf
    for seed in range(20):
        s = generate(ScenarioSpec("confounded", 10000, 1.0, seed))
        naive = naive_ate(s.dataset)
        r = estimate_ate(fit_r(s.dataset), s.dataset.features)
        naive_min = min(naive_min, abs(naive))
        wins += abs(naive) > 0.1 and abs(r) < 0.5 * abs(naive)
    gate("C4 confounding bias reduction", wins >= 18, f"{wins}/20 seeds; min |naive| {naive_min:.3f}")


def test_c5_r_loss_optimality(gate):
    worst = np.inf
    for seed in range(5):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 5))
        spec = ScenarioSpec("confounded", int(rng.integers(300, 1500)), float(rng.uniform(0.5, 2)), seed,
                            {"d": d, "theta": rng.normal(size=d).tolist(), "c": float(rng.normal())})
        s = generate(spec)
        m = fit_r(s.dataset, RLearnerConfig(tau_lambda=float(rng.choice([0.0, 1e-3, 1e-1]))))
        best = r_loss(m, s.dataset)
        for j in range(len(m.theta)):
            for h in (1e-3, -1e-3):
                theta = m.theta.copy()
                theta[j] += h
                worst = min(worst, r_loss(m, s.dataset, theta) - best)
    gate("C5 R-loss optimality", worst >= 0, f"smallest loss increase under perturbation {worst:.3e}")


@pytest.mark.parametrize("n_folds", [2, 5, 10])
def test_c6_cross_fitting_no_leakage(gate, n_folds):
    s = generate(ScenarioSpec("confounded", 600, 1.0, n_folds))
    cfg = RLearnerConfig(n_folds=n_folds, seed=1)
    base = fit_nuisance(s.dataset, cfg)
    ok = True
    for q in range(n_folds):
        rows = base.folds.test_rows(q)
        y = s.dataset.outcome.copy()
        y[rows] = -1e5
        poisoned = fit_nuisance(ObservationalDataset(s.dataset.features, s.dataset.treatment, y), cfg)
        others = base.folds.train_rows(q)
        unchanged = poisoned.m_hat[rows].tobytes() == base.m_hat[rows].tobytes()
        changed = not np.allclose(poisoned.m_hat[others], base.m_hat[others])
        ok &= unchanged and changed
    gate(f"C6 no leakage (Q={n_folds})", ok, "poisoned fold's own predictions unchanged, other folds' changed")


def test_c7_efficiency_bound_analytic(gate):
    xs, ys, ws = [], [], []
    for x in (0.0, 0.5, 1.0):
        for sign in (1.0, -1.0, 1.0, -1.0):
            xs += [x, x]
            ys += [2.0 + x + 1.5 + sign, 2.0 + x + sign]
            ws += [1.0, 0.0]
    data = ObservationalDataset(np.array(xs)[:, None], ws, ys)
    e = fit_classifier(ClassifierSpec("constant", constant=0.5), data.features, data.treatment)
    v = efficiency_bound(data, fit_t(data, OLS), e, OLS).v_pate
    gate("C7 efficiency bound", abs(v - 4.0) < 1e-9, f"v_pate = {v!r}")


def test_c8_metric_identities(gate):
    rng = np.random.default_rng(0)
    worst_id, ordered = 0.0, True
    for _ in range(100):
        n = int(rng.integers(1, 200))
        m = cate_metrics(rng.normal(size=n) * rng.uniform(0.1, 10), rng.normal(size=n))
        worst_id = max(worst_id, abs(m.rmse**2 - (m.bias**2 + m.error_variance)))
        ordered &= m.rmse >= m.mae >= m.abs_bias
    gate("C8 metric identities", worst_id < 1e-10 and ordered,
         f"max |rmse^2 - bias^2 - var| {worst_id:.1e}; ordering held: {ordered}")


def test_c9_x_learner_boundaries(gate):
    s = generate(ScenarioSpec("electricity", 2000, 1.0, 9))
    X = s.dataset.features
    ok = True
    for base in (OLS, RegressorSpec("boosted_stumps", n_rounds=50), RegressorSpec("knn", k=7)):
        m1 = fit_x(s.dataset, base, g_mode=1.0)
        m0 = fit_x(s.dataset, base, g_mode=0.0)
        ok &= m1.predict_cate(X).tobytes() == m1.tau0.predict(X).tobytes()
        ok &= m0.predict_cate(X).tobytes() == m0.tau1.predict(X).tobytes()
    gate("C9 X-learner boundary identities", ok, "g=1 -> tau0 and g=0 -> tau1 bit-exact for ols, stumps, knn")


def test_c10_benchmark_determinism(gate, tmp_path, capsys):
    outputs = []
    for i, (threads, blas) in enumerate([(1, None), (1, None), (4, None), (2, 1)]):
        report = tmp_path / f"r{i}.txt"
        argv = ["benchmark", "--seed", "5", "--report", str(report), "--threads", str(threads)]
        if blas is None:
            code = main(argv)
        else:
            with threadpool_limits(limits=blas):
                code = main(argv)
        out = capsys.readouterr().out
        outputs.append((code, out, report.read_bytes()))
    same = all(o == outputs[0] for o in outputs)
    gate("C10 determinism", same and outputs[0][0] == 0,
         "benchmark --seed 5 identical across repeats, worker threads and BLAS thread limits")


def test_c11_end_to_end_cli(gate, tmp_path, capsys):
    t0 = time.perf_counter()
    data, truth = tmp_path / "wv.csv", tmp_path / "wv_truth.csv"
    code1 = main(["simulate", "--scenario", "electricity", "--n", "37868", "--seed", "7", "--output", str(data)])
    capsys.readouterr()
    code2 = main(["estimate", "--input", str(data), "--truth", str(truth), "--output", str(tmp_path / "tau.csv")])
    out = capsys.readouterr().out
    elapsed = time.perf_counter() - t0
    lines = out.splitlines()
    header = lines[0].split()
    rows = [dict(zip(header, l.split())) for l in lines[1:5]]
    well_formed = (
        header[:2] == ["learner", "ate"]
        and {"rmse", "mae", "variance", "bias"} <= set(header)
        and [r["learner"] for r in rows] == ["S", "T", "X", "R"]
        and all(np.isfinite(float(r[k])) for r in rows for k in ("rmse", "mae", "variance", "bias"))
    )
    with open(tmp_path / "tau.csv", newline="") as fh:
        n_rows = sum(1 for _ in csv.reader(fh)) - 1
    ok = code1 == 0 and code2 == 0 and well_formed and n_rows == 37868 and elapsed < 300
    gate("C11 end-to-end CLI", ok, f"37868 rows, four learners, metric table well-formed; {elapsed:.1f}s")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
