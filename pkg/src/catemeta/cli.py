"""Command-line front end: ``simulate``, ``estimate`` and ``benchmark``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 estimation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .base_learners import REGRESSOR_KINDS, ClassifierSpec, RegressorSpec
from .data import SCENARIO_KINDS, DataError, ScenarioSpec, generate, load_csv, load_sidecar, save_sample, write_csv
from .evaluation import benchmark, cate_metrics, histogram
from .metalearners import LEARNER_KINDS, LearnerConfig, RLearnerConfig, fit_learner

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_scenario_args(p: argparse.ArgumentParser, n_default: int) -> None:
    g = p.add_argument_group("scenario")
    g.add_argument("--scenario", choices=SCENARIO_KINDS, default="electricity",
                   help="data-generating process (default: electricity)")
    g.add_argument("--n", type=int, default=n_default, help=f"units per sample (default: {n_default})")
    g.add_argument("--noise-sd", type=float, default=1.0, help="outcome noise sd (default: 1.0)")
    g.add_argument("--d", type=int, default=None, help="covariates for linear scenarios (default: 3)")
    g.add_argument("--beta", type=_floats, default=None, help="baseline coefficients (default: scenario's)")
    g.add_argument("--theta", type=_floats, default=None, help="effect slopes (default: scenario's)")
    g.add_argument("--c", type=float, default=None, help="effect intercept (default: scenario's)")
    g.add_argument("--gamma", type=_floats, default=None, help="confounded assignment slopes (default: 3 each)")
    g.add_argument("--treated-fraction", type=float, default=None, help="target treated share (default: 0.3)")


def _add_learner_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("learners")
    g.add_argument("--learners", default="s,t,x,r", help="comma-separated subset of s,t,x,r (default: all)")
    g.add_argument("--base", choices=REGRESSOR_KINDS, default="ols", help="base regressor (default: ols)")
    g.add_argument("--ridge-lambda", type=float, default=1.0, help="ridge penalty (default: 1.0)")
    g.add_argument("--k", type=int, default=5, help="knn neighbours (default: 5)")
    g.add_argument("--rounds", type=int, default=200, help="boosting rounds (default: 200)")
    g.add_argument("--learning-rate", type=float, default=0.1, help="boosting shrinkage (default: 0.1)")
    g.add_argument("--w-scale", type=float, default=1.0, help="S-learner treatment column scale (default: 1.0)")
    g.add_argument("--g-mode", default="propensity",
                   help="X-learner weight: 'propensity' or a fixed number in [0,1] (default: propensity)")
    g.add_argument("--folds", type=int, default=5, help="R-learner cross-fitting folds (default: 5)")
    g.add_argument("--r-lambda", type=float, default=1e-3, help="R-learner ridge penalty (default: 1e-3)")
    g.add_argument("--r-tau-model", choices=("linear_wls", "pseudo_outcome"), default="linear_wls",
                   help="R-learner effect model (default: linear_wls)")
    g.add_argument("--outcome-mode", choices=("composite", "marginal"), default="composite",
                   help="R-learner outcome nuisance (default: composite)")
    g.add_argument("--propensity", type=float, default=None,
                   help="known constant propensity instead of a fitted logistic model (default: fitted)")
    g.add_argument("--clip", type=float, default=0.01, help="propensity clip bound (default: 0.01)")
    g.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default: {DEFAULT_SEED})")


def _add_format_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("table", "csv", "json-lines"), default="table",
                   help="stdout format (default: table)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="catemeta", description="CATE metalearners (S, T, X, R) with synthetic benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic dataset and its ground-truth sidecar")
    _add_scenario_args(p, 1000)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default: {DEFAULT_SEED})")
    p.add_argument("--output", type=Path, default=Path("data.csv"), help="dataset CSV (default: data.csv)")
    p.add_argument("--truth", type=Path, default=None,
                   help="ground-truth sidecar CSV (default: <output>_truth.csv)")
    p.add_argument("--treatment-col", default="treatment", help="treatment column name (default: treatment)")
    p.add_argument("--outcome-col", default="outcome", help="outcome column name (default: outcome)")

    p = sub.add_parser("estimate", help="fit learners on a CSV and write per-row CATE estimates")
    p.add_argument("--input", type=Path, required=True, help="dataset CSV (required)")
    p.add_argument("--treatment-col", default="treatment", help="treatment column name (default: treatment)")
    p.add_argument("--outcome-col", default="outcome", help="outcome column name (default: outcome)")
    p.add_argument("--output", type=Path, default=None, help="per-row estimates CSV (default: not written)")
    p.add_argument("--truth", type=Path, default=None,
                   help="ground-truth sidecar; enables the metric table (default: none)")
    p.add_argument("--bins", type=int, default=30, help="histogram bins (default: 30)")
    _add_learner_args(p)
    _add_format_arg(p)

    p = sub.add_parser("benchmark", help="compare learners over replicated synthetic samples")
    _add_scenario_args(p, 2000)
    p.add_argument("--replications", type=int, default=10, help="samples to draw (default: 10)")
    p.add_argument("--threads", type=int, default=1, help="replication worker threads (default: 1)")
    p.add_argument("--bins", type=int, default=30, help="histogram bins (default: 30)")
    p.add_argument("--report", type=Path, default=None, help="full key-value report file (default: none)")
    p.add_argument("--csv", type=Path, default=None, help="per-replication CSV file (default: none)")
    p.add_argument("--hist-out", type=Path, default=None, help="histogram CSV file (default: none)")
    _add_learner_args(p)
    _add_format_arg(p)
    return parser


# -- config assembly ---------------------------------------------------------


def _scenario(args, seed: int) -> ScenarioSpec:
    params = {}
    for key in ("d", "beta", "theta", "c", "gamma", "treated_fraction"):
        v = getattr(args, key)
        if v is not None:
            params[key] = v
    try:
        return ScenarioSpec(args.scenario, args.n, args.noise_sd, seed, params)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _learner_configs(args) -> list[LearnerConfig]:
    kinds = [k.strip().upper() for k in args.learners.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in LEARNER_KINDS]
    if unknown or not kinds:
        raise UsageError(f"unknown learner name(s) {unknown or args.learners!r}; choose from s,t,x,r")
    try:
        base = RegressorSpec(args.base, ridge_lambda=args.ridge_lambda, k=args.k, n_rounds=args.rounds,
                             learning_rate=args.learning_rate, seed=args.seed)
        if args.propensity is None:
            prop = ClassifierSpec("logistic", clip=args.clip)
        else:
            prop = ClassifierSpec("constant", clip=args.clip, constant=args.propensity)
        if args.g_mode == "propensity":
            g_mode = prop
        else:
            try:
                g_mode = float(args.g_mode)
            except ValueError:
                raise UsageError(f"--g-mode must be 'propensity' or a number, got {args.g_mode!r}") from None
            if not 0.0 <= g_mode <= 1.0:
                raise UsageError("--g-mode fixed weight must lie in [0, 1]")
        r_config = RLearnerConfig(n_folds=args.folds, tau_lambda=args.r_lambda, tau_model=args.r_tau_model,
                                  tau_base=base, outcome=base, propensity=prop,
                                  outcome_mode=args.outcome_mode, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return [
        LearnerConfig(kind=k, base=base, g_mode=g_mode, w_scale=args.w_scale,
                      r_config=r_config if k == "R" else None)
        for k in dict.fromkeys(kinds)
    ]


# -- rendering ---------------------------------------------------------------


def _render(rows: list[dict], fmt: str, out) -> None:
    if not rows:
        return
    cols = list(rows[0])
    if fmt == "json-lines":
        for row in rows:
            out.write(json.dumps(row) + "\n")
        return
    cells = [[_cell(row[c]) for c in cols] for row in rows]
    if fmt == "csv":
        out.write(",".join(cols) + "\n")
        for r in cells:
            out.write(",".join(r) + "\n")
        return
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(cols)]
    out.write("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip() + "\n")
    for r in cells:
        out.write("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() + "\n")


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _hist_rows(name: str, edges, counts) -> list[dict]:
    return [
        {"learner": name, "bin_left": float(edges[i]), "bin_right": float(edges[i + 1]), "count": int(counts[i])}
        for i in range(len(counts))
    ]


def _write_hist_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write("learner,bin_left,bin_right,count\n")
        for r in rows:
            fh.write(f"{r['learner']},{r['bin_left']!r},{r['bin_right']!r},{r['count']}\n")


# -- subcommands -------------------------------------------------------------


def run_simulate(args, out=None) -> int:
    out = out or sys.stdout
    spec = _scenario(args, args.seed)
    sample = generate(spec)
    truth = args.truth or args.output.with_name(args.output.stem + "_truth.csv")
    save_sample(sample, args.output, truth, args.treatment_col, args.outcome_col)
    d = sample.dataset
    out.write(
        f"n = {d.n}\nd = {d.d}\ntreated_fraction = {d.treatment.mean():.6g}\n"
        f"true_ate = {sample.true_ate:.6g}\ndataset = {args.output}\ntruth = {truth}\n"
    )
    return EXIT_OK


def run_estimate(args, out=None) -> int:
    out = out or sys.stdout
    configs = _learner_configs(args)
    data = load_csv(args.input, args.treatment_col, args.outcome_col)
    truth = load_sidecar(args.truth) if args.truth else None
    if truth is not None and len(truth["true_cate"]) != data.n:
        raise DataError(f"sidecar has {len(truth['true_cate'])} rows, dataset has {data.n}")
    taus = {}
    for cfg in configs:
        model = fit_learner(cfg, data)
        taus[cfg.name] = model.predict_cate(data.features)
    if args.output:
        write_csv(args.output, [f"tau_{k.lower()}" for k in taus], list(taus.values()))
    rows = []
    for name, tau in taus.items():
        row = {"learner": name, "ate": float(np.mean(tau))}
        if truth is not None:
            m = cate_metrics(tau, truth["true_cate"])
            row.update({k: getattr(m, k) for k in ("rmse", "mae", "variance", "bias", "abs_bias")})
        rows.append(row)
    _render(rows, args.format, out)
    if truth is not None:
        hist = [r for name, tau in taus.items() for r in _hist_rows(name, *histogram(tau, args.bins))]
        if args.format == "table":
            out.write("\n# histogram\n")
        _render(hist, "csv" if args.format == "table" else args.format, out)
    return EXIT_OK


def run_benchmark(args, out=None) -> int:
    out = out or sys.stdout
    configs = _learner_configs(args)
    if args.replications < 1:
        raise UsageError("--replications must be >= 1")
    scenario = _scenario(args, args.seed)
    report = benchmark(scenario, configs, args.replications, args.seed, args.bins, max(1, args.threads))
    rows = []
    for name in report.learners:
        m = report.mean_metrics(name)
        row = {"learner": name, "ate": report.mean_ate(name)}
        for k in ("rmse", "mae", "variance", "bias", "abs_bias"):
            row[k] = None if m is None else getattr(m, k)
        row["failures"] = sum(1 for f in report.failures if f[0] == name)
        rows.append(row)
    if args.format == "table":
        out.write(f"scenario = {scenario.kind}  n = {scenario.n}  replications = {report.replications}  "
                  f"true_ate = {np.mean(report.true_ates):.6g}\n")
    _render(rows, args.format, out)
    hist = [r for name in report.learners if name in report.histograms
            for r in _hist_rows(name, *report.histograms[name])]
    if args.format == "table":
        out.write("\n# histogram (final replication)\n")
        _render(hist, "csv", out)
        for name, r, msg in report.failures:
            out.write(f"# failure {name} replication {r}: {msg}\n")
    if args.report:
        args.report.write_text(report.to_text(), encoding="utf-8")
    if args.csv:
        args.csv.write_text(report.to_csv(), encoding="utf-8")
    if args.hist_out:
        _write_hist_csv(args.hist_out, hist)
    return EXIT_ESTIMATION if report.failures else EXIT_OK


COMMANDS = {"simulate": run_simulate, "estimate": run_estimate, "benchmark": run_benchmark}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"catemeta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"catemeta: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, RuntimeError) as exc:
        print(f"catemeta: estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
