"""Scoring CATE estimates against ground truth and the multi-learner benchmark."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .base_learners import ClassifierSpec, FittedClassifier, FittedRegressor, RegressorSpec, fit_classifier, fit_regressor
from .data import ObservationalDataset, ScenarioSpec, generate
from .metalearners import FittedCateModel, LearnerConfig, fit_learner

METRIC_NAMES = ("rmse", "mae", "bias", "abs_bias", "variance", "error_variance")


@dataclass(frozen=True)
class CateMetrics:
    """Error summary of an effect estimate.

    ``variance`` is the spread of the estimates themselves; the variance of
    the error is kept separately as ``error_variance`` so that
    ``rmse**2 == bias**2 + error_variance``.
    """

    rmse: float
    mae: float
    bias: float
    abs_bias: float
    variance: float
    error_variance: float

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def cate_metrics(tau_hat, tau_true) -> CateMetrics:
    tau_hat = np.asarray(tau_hat, dtype=float).ravel()
    tau_true = np.asarray(tau_true, dtype=float).ravel()
    if tau_hat.shape != tau_true.shape:
        raise ValueError(f"length mismatch: {tau_hat.size} estimates vs {tau_true.size} truths")
    if tau_hat.size == 0:
        raise ValueError("cate_metrics needs at least one unit")
    if not (np.all(np.isfinite(tau_hat)) and np.all(np.isfinite(tau_true))):
        raise ValueError("non-finite values in effect vectors")
    err = tau_hat - tau_true
    bias = float(np.mean(err))
    return CateMetrics(
        rmse=float(np.sqrt(np.mean(err**2))),
        mae=float(np.mean(np.abs(err))),
        bias=bias,
        abs_bias=abs(bias),
        variance=float(np.var(tau_hat)),
        error_variance=float(np.var(err)),
    )


# -- efficiency bound ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EfficiencyBoundReport:
    v_pate: float
    contributions: np.ndarray
    sigma0_model: FittedRegressor
    sigma1_model: FittedRegressor


def efficiency_bound_terms(sigma1_sq, sigma0_sq, e, tau_hat) -> np.ndarray:
    """Per-unit ``sigma1^2/e + sigma0^2/(1-e) + (tau(x) - mean tau)^2``."""
    tau_hat = np.asarray(tau_hat, dtype=float)
    e = np.asarray(e, dtype=float)
    return (
        np.asarray(sigma1_sq, dtype=float) / e
        + np.asarray(sigma0_sq, dtype=float) / (1.0 - e)
        + (tau_hat - tau_hat.mean()) ** 2
    )


def _conditional_variance(data: ObservationalDataset, arm: int, base: RegressorSpec) -> FittedRegressor:
    rows = np.flatnonzero(data.treatment == arm)
    if len(rows) < base.min_rows:
        raise ValueError(f"arm {arm} has {len(rows)} rows; {base.kind} needs {base.min_rows}")
    X, y = data.features[rows], data.outcome[rows]
    mu = fit_regressor(base, X, y)
    return fit_regressor(base, X, (y - mu.predict(X)) ** 2)


def efficiency_bound(
    data: ObservationalDataset,
    cate_model: FittedCateModel,
    propensity: FittedClassifier | ClassifierSpec,
    variance_base: RegressorSpec = RegressorSpec("ols"),
) -> EfficiencyBoundReport:
    """Plug-in estimate of the semiparametric variance bound for the average effect.

    Conditional outcome variances are fitted per arm by regressing squared
    residuals on X and floored at zero. ``propensity`` may be a fitted model
    or a recipe to fit on ``data``.
    """
    if isinstance(propensity, ClassifierSpec):
        propensity = fit_classifier(propensity, data.features, data.treatment)
    s0 = _conditional_variance(data, 0, variance_base)
    s1 = _conditional_variance(data, 1, variance_base)
    X = data.features
    terms = efficiency_bound_terms(
        np.maximum(s1.predict(X), 0.0),
        np.maximum(s0.predict(X), 0.0),
        propensity.predict_proba(X),
        cate_model.predict_cate(X),
    )
    return EfficiencyBoundReport(float(np.mean(terms)), terms, s0, s1)


# -- histogram ----------------------------------------------------------------


def histogram(tau_hat, bins: int = 30, range: tuple[float, float] | None = None):
    """Bin edges and counts; the upper edge is inclusive."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    tau_hat = np.asarray(tau_hat, dtype=float).ravel()
    if tau_hat.size == 0 and range is None:
        raise ValueError("cannot infer a histogram range from empty input")
    if range is None:
        lo, hi = float(tau_hat.min()), float(tau_hat.max())
        # estimates equal up to rounding are binned as a constant
        if hi - lo <= 1e-9 * max(1.0, abs(lo), abs(hi)):
            mid = 0.5 * (lo + hi)
            lo, hi = mid - 0.5, mid + 0.5
        range = (lo, hi)
    counts, edges = np.histogram(tau_hat, bins=bins, range=range)
    return edges, counts


# -- benchmark ----------------------------------------------------------------


@dataclass(eq=False)
class BenchmarkReport:
    scenario: ScenarioSpec
    learners: list[str]
    replications: int
    seeds: list[int]
    metrics: dict[str, list[CateMetrics | None]]
    ates: dict[str, list[float | None]]
    true_ates: list[float]
    histograms: dict[str, tuple[np.ndarray, np.ndarray]]
    failures: list[tuple[str, int, str]] = field(default_factory=list)

    def mean_metrics(self, name: str) -> CateMetrics | None:
        ok = [m for m in self.metrics[name] if m is not None]
        if not ok:
            return None
        return CateMetrics(**{k: float(np.mean([getattr(m, k) for m in ok])) for k in METRIC_NAMES})

    def mean_ate(self, name: str) -> float | None:
        ok = [a for a in self.ates[name] if a is not None]
        return float(np.mean(ok)) if ok else None

    def to_text(self) -> str:
        """Key-value rendering with one nested table per learner."""
        s = self.scenario
        lines = [
            f"scenario.kind = {s.kind}",
            f"scenario.n = {s.n}",
            f"scenario.noise_sd = {s.noise_sd!r}",
            f"scenario.parameters = {_fmt_params(s.parameters)}",
            f"replications = {self.replications}",
            f"seeds = {','.join(str(x) for x in self.seeds)}",
            f"true_ate.mean = {float(np.mean(self.true_ates))!r}",
        ]
        for name in self.learners:
            lines.append("")
            lines.append(f"[learner.{name}]")
            mean = self.mean_metrics(name)
            lines.append(f"ate.mean = {self.mean_ate(name)!r}")
            if mean is not None:
                for k in METRIC_NAMES:
                    lines.append(f"{k}.mean = {getattr(mean, k)!r}")
            lines.append("replication,ate," + ",".join(METRIC_NAMES))
            for r, (m, a) in enumerate(zip(self.metrics[name], self.ates[name])):
                vals = ["failed"] * len(METRIC_NAMES) if m is None else [repr(getattr(m, k)) for k in METRIC_NAMES]
                lines.append(",".join([str(r), repr(a)] + vals))
            if name in self.histograms:
                edges, counts = self.histograms[name]
                lines.append("histogram.edges = " + ",".join(repr(float(e)) for e in edges))
                lines.append("histogram.counts = " + ",".join(str(int(c)) for c in counts))
        if self.failures:
            lines.append("")
            lines.append("[failures]")
            for name, r, msg in self.failures:
                lines.append(f"{name}.{r} = {msg}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        """One row per learner and replication."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["learner", "replication", "seed", "ate", "true_ate", *METRIC_NAMES, "error"])
        failed = {(n, r): msg for n, r, msg in self.failures}
        for name in self.learners:
            for r in range(self.replications):
                m = self.metrics[name][r]
                vals = [""] * len(METRIC_NAMES) if m is None else [repr(getattr(m, k)) for k in METRIC_NAMES]
                a = self.ates[name][r]
                writer.writerow(
                    [name, r, self.seeds[r], "" if a is None else repr(a), repr(self.true_ates[r]), *vals,
                     failed.get((name, r), "")]
                )
        return buf.getvalue()


def _fmt_params(params) -> str:
    parts = []
    for k in sorted(params):
        v = params[k]
        if isinstance(v, (list, tuple, np.ndarray)):
            v = "[" + ",".join(repr(float(x)) for x in v) + "]"
        else:
            v = repr(v)
        parts.append(f"{k}={v}")
    return "{" + ";".join(parts) + "}"


def _run_replication(scenario: ScenarioSpec, configs: Sequence[LearnerConfig], seed: int, keep_tau: bool):
    sample = generate(scenario.with_seed(seed))
    X = sample.dataset.features
    out = []
    for cfg in configs:
        try:
            model = fit_learner(cfg, sample.dataset)
            tau = model.predict_cate(X)
            out.append((cate_metrics(tau, sample.true_cate), float(np.mean(tau)), tau if keep_tau else None, None))
        except Exception as exc:  # recorded per learner, never dropped
            out.append((None, None, None, f"{type(exc).__name__}: {exc}"))
    return sample.true_ate, out


def benchmark(
    scenario: ScenarioSpec,
    learner_configs: Sequence[LearnerConfig],
    replications: int = 1,
    seed: int = 42,
    bins: int = 30,
    n_jobs: int = 1,
) -> BenchmarkReport:
    """Fit every learner on ``replications`` fresh samples (seeds ``seed + r``).

    Replications may run on ``n_jobs`` threads; results are collected in
    replication order, so the report does not depend on scheduling.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    names = [c.name for c in learner_configs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate learner names: {names}")
    seeds = [seed + r for r in range(replications)]
    last = replications - 1

    def job(r: int):
        return _run_replication(scenario, learner_configs, seeds[r], r == last)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(job, range(replications)))
    else:
        results = [job(r) for r in range(replications)]

    metrics = {n: [] for n in names}
    ates = {n: [] for n in names}
    histograms = {}
    failures = []
    true_ates = []
    for r, (true_ate, per_learner) in enumerate(results):
        true_ates.append(true_ate)
        for name, (m, a, tau, err) in zip(names, per_learner):
            metrics[name].append(m)
            ates[name].append(a)
            if err is not None:
                failures.append((name, r, err))
            if tau is not None:
                histograms[name] = histogram(tau, bins)
    return BenchmarkReport(scenario, names, replications, seeds, metrics, ates, true_ates, histograms, failures)
