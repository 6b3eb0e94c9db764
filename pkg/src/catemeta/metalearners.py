"""S-, T-, X- and R-learners for the conditional average treatment effect."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np

from .base_learners import (
    ClassifierSpec,
    FittedClassifier,
    FittedRegressor,
    RegressorSpec,
    _as_matrix,
    _solve_spd,
    fit_classifier,
    fit_regressor,
)
from .data import FoldAssignment, ObservationalDataset, assign_folds

LearnerKind = Literal["S", "T", "X", "R"]
LEARNER_KINDS: tuple[str, ...] = ("S", "T", "X", "R")

# X-learner weight rule: a propensity model recipe, or a fixed weight in [0, 1]
GMode = Union[ClassifierSpec, float]

_DEGENERATE_RESIDUAL = 1e-6


class EstimationError(RuntimeError):
    """A metalearner could not be fitted on the given data."""


class FittedCateModel:
    kind: str
    n_features: int

    def predict_cate(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise ValueError(
                f"dimension mismatch: model trained on {self.n_features} features, got {X.shape[1]}"
            )
        if X.shape[0] == 0:
            return np.zeros(0)
        return self._predict(X)

    def _predict(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def predict_cate(model: FittedCateModel, X) -> np.ndarray:
    return model.predict_cate(X)


def estimate_ate(model: FittedCateModel, X) -> float:
    """Plug-in average effect: the mean of the predicted CATE over ``X``."""
    tau = model.predict_cate(X)
    if tau.size == 0:
        raise ValueError("estimate_ate needs at least one row")
    return float(np.mean(tau))


def naive_ate(data: ObservationalDataset) -> float:
    """Difference in arm means; biased whenever assignment depends on X."""
    t = data.treated_mask
    return float(data.outcome[t].mean() - data.outcome[~t].mean())


def _arm_rows(data: ObservationalDataset, arm: int, spec: RegressorSpec) -> np.ndarray:
    rows = np.flatnonzero(data.treatment == arm)
    if len(rows) < spec.min_rows:
        label = "treated" if arm else "control"
        raise EstimationError(
            f"{label} arm has {len(rows)} rows; {spec.kind} needs at least {spec.min_rows}"
        )
    return rows


# -- S ------------------------------------------------------------------------


class SLearnerModel(FittedCateModel):
    kind = "S"

    def __init__(self, model: FittedRegressor, w_scale: float, n_features: int):
        self.model = model
        self.w_scale = w_scale
        self.n_features = n_features

    def _predict(self, X):
        m = X.shape[0]
        hi = self.model.predict(np.column_stack([X, np.full(m, self.w_scale)]))
        lo = self.model.predict(np.column_stack([X, np.zeros(m)]))
        return hi - lo


def fit_s(data: ObservationalDataset, base: RegressorSpec, w_scale: float = 1.0) -> SLearnerModel:
    """One regressor on ``[X | w_scale * W]``; the CATE is the W=1 minus W=0 prediction.

    ``w_scale`` only matters for distance-based bases such as knn.
    """
    design = np.column_stack([data.features, w_scale * data.treatment])
    return SLearnerModel(fit_regressor(base, design, data.outcome), w_scale, data.d)


# -- T ------------------------------------------------------------------------


class TLearnerModel(FittedCateModel):
    kind = "T"

    def __init__(self, mu0: FittedRegressor, mu1: FittedRegressor, n_features: int):
        self.mu0 = mu0
        self.mu1 = mu1
        self.n_features = n_features

    def _predict(self, X):
        return self.mu1.predict(X) - self.mu0.predict(X)


def _fit_arms(data, base0, base1):
    c = _arm_rows(data, 0, base0)
    t = _arm_rows(data, 1, base1)
    mu0 = fit_regressor(base0, data.features[c], data.outcome[c])
    mu1 = fit_regressor(base1, data.features[t], data.outcome[t])
    return mu0, mu1


def fit_t(
    data: ObservationalDataset, base0: RegressorSpec, base1: RegressorSpec | None = None
) -> TLearnerModel:
    mu0, mu1 = _fit_arms(data, base0, base1 or base0)
    return TLearnerModel(mu0, mu1, data.d)


# -- X ------------------------------------------------------------------------


class XLearnerModel(FittedCateModel):
    kind = "X"

    def __init__(self, mu0, mu1, tau0, tau1, g_mode, propensity, imputed_treated, imputed_control, n_features):
        self.mu0 = mu0
        self.mu1 = mu1
        self.tau0 = tau0
        self.tau1 = tau1
        self.g_mode = g_mode
        self.propensity = propensity
        self.imputed_treated = imputed_treated
        self.imputed_control = imputed_control
        self.n_features = n_features

    def weights(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if self.propensity is not None:
            return self.propensity.predict_proba(X)
        return np.full(X.shape[0], float(self.g_mode))

    def _predict(self, X):
        g = self.weights(X)
        return g * self.tau0.predict(X) + (1.0 - g) * self.tau1.predict(X)


def fit_x(
    data: ObservationalDataset,
    base0: RegressorSpec,
    base1: RegressorSpec | None = None,
    tau_base0: RegressorSpec | None = None,
    tau_base1: RegressorSpec | None = None,
    g_mode: GMode = ClassifierSpec(),
) -> XLearnerModel:
    """Cross-imputation learner.

    Imputed effects ``D1 = Y1 - mu0(X1)`` on treated rows and
    ``D0 = mu1(X0) - Y0`` on control rows are each regressed on X; the two
    effect models are blended as ``g * tau0 + (1 - g) * tau1`` where ``g``
    is the fitted propensity or a fixed weight.
    """
    base1 = base1 or base0
    tau_base0 = tau_base0 or base0
    tau_base1 = tau_base1 or tau_base0
    mu0, mu1 = _fit_arms(data, base0, base1)
    c = _arm_rows(data, 0, tau_base0)
    t = _arm_rows(data, 1, tau_base1)
    X0, X1 = data.features[c], data.features[t]
    d1 = data.outcome[t] - mu0.predict(X1)
    d0 = mu1.predict(X0) - data.outcome[c]
    tau0 = fit_regressor(tau_base0, X0, d0)
    tau1 = fit_regressor(tau_base1, X1, d1)
    if isinstance(g_mode, ClassifierSpec):
        propensity = fit_classifier(g_mode, data.features, data.treatment)
    else:
        g = float(g_mode)
        if not 0.0 <= g <= 1.0:
            raise ValueError(f"fixed X-learner weight must lie in [0, 1], got {g}")
        propensity = None
    return XLearnerModel(mu0, mu1, tau0, tau1, g_mode, propensity, d1, d0, data.d)


# -- R ------------------------------------------------------------------------

OutcomeMode = Literal["composite", "marginal"]
TauModel = Literal["linear_wls", "pseudo_outcome"]


@dataclass(frozen=True)
class RLearnerConfig:
    """Settings for the cross-fitted R-learner.

    ``outcome_mode="composite"`` builds the outcome nuisance from per-arm
    response surfaces as ``mu0 + e * (mu1 - mu0)``; ``"marginal"`` regresses
    Y on X directly. ``tau_lambda`` penalises every coefficient of the
    linear effect model, intercept included; it is unused by the
    pseudo-outcome route, whose regulariser is ``tau_base``'s own.
    """

    n_folds: int = 5
    tau_lambda: float = 1e-3
    tau_model: TauModel = "linear_wls"
    tau_base: RegressorSpec = field(default_factory=lambda: RegressorSpec("ols"))
    outcome: RegressorSpec = field(default_factory=lambda: RegressorSpec("ols"))
    propensity: ClassifierSpec = field(default_factory=ClassifierSpec)
    outcome_mode: OutcomeMode = "composite"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if not self.tau_lambda >= 0:
            raise ValueError("tau_lambda must be >= 0")
        if self.tau_model not in ("linear_wls", "pseudo_outcome"):
            raise ValueError(f"unknown tau_model {self.tau_model!r}")
        if self.outcome_mode not in ("composite", "marginal"):
            raise ValueError(f"unknown outcome_mode {self.outcome_mode!r}")


@dataclass(frozen=True, eq=False)
class NuisanceEstimates:
    folds: FoldAssignment
    outcome_models: tuple  # per fold: regressor, or (mu0, mu1) when composite
    propensity_models: tuple[FittedClassifier, ...]
    m_hat: np.ndarray
    e_hat: np.ndarray


def _outcome_predict(model, e: np.ndarray, X: np.ndarray) -> np.ndarray:
    if isinstance(model, tuple):
        mu0, mu1 = model
        a = mu0.predict(X)
        return a + e * (mu1.predict(X) - a)
    return model.predict(X)


def _cross_fit(data: ObservationalDataset, config: RLearnerConfig, folds: FoldAssignment):
    outcome_models, propensity_models = [], []
    m_hat = np.empty(data.n)
    e_hat = np.empty(data.n)
    for q in range(folds.n_folds):
        train = data.subset(folds.train_rows(q))
        test = folds.test_rows(q)
        e_model = fit_classifier(config.propensity, train.features, train.treatment)
        if config.outcome_mode == "composite":
            o_model = _fit_arms(train, config.outcome, config.outcome)
        else:
            o_model = fit_regressor(config.outcome, train.features, train.outcome)
        Xq = data.features[test]
        e_hat[test] = e_model.predict_proba(Xq)
        m_hat[test] = _outcome_predict(o_model, e_hat[test], Xq)
        outcome_models.append(o_model)
        propensity_models.append(e_model)
    m_hat.setflags(write=False)
    e_hat.setflags(write=False)
    return NuisanceEstimates(folds, tuple(outcome_models), tuple(propensity_models), m_hat, e_hat)


def fit_nuisance(data: ObservationalDataset, config: RLearnerConfig) -> NuisanceEstimates:
    """Cross-fit outcome and propensity models; each unit is predicted out of fold.

    A fold assignment whose training complement misses a treatment arm is
    redrawn once with the next seed before giving up.
    """
    if config.n_folds > data.n:
        raise ValueError(f"Q > n is invalid: {config.n_folds} folds for {data.n} rows")
    last_error: Exception | None = None
    for seed in (config.seed, config.seed + 1):
        folds = assign_folds(data.n, config.n_folds, seed)
        try:
            _check_fold_arms(data, folds)
            return _cross_fit(data, config, folds)
        except (ValueError, EstimationError) as exc:
            last_error = exc
    raise EstimationError(f"cross-fitting failed after re-seeding folds: {last_error}")


def _check_fold_arms(data: ObservationalDataset, folds: FoldAssignment) -> None:
    for q in range(folds.n_folds):
        w = data.treatment[folds.train_rows(q)]
        if w.all() or not w.any():
            raise EstimationError(f"training rows for fold {q} contain a single treatment arm")


class RLearnerModel(FittedCateModel):
    kind = "R"

    def __init__(self, config: RLearnerConfig, nuisance: NuisanceEstimates, n_features: int,
                 theta: np.ndarray | None = None, tau_model: FittedRegressor | None = None):
        self.config = config
        self.nuisance = nuisance
        self.n_features = n_features
        self.theta = theta
        self.tau_model = tau_model

    def _predict(self, X):
        if self.theta is not None:
            return self.theta[0] + X @ self.theta[1:]
        return self.tau_model.predict(X)


def _robinson_residuals(data: ObservationalDataset, nuisance: NuisanceEstimates):
    return data.outcome - nuisance.m_hat, data.treatment - nuisance.e_hat


def solve_linear_r(X, y_res, w_res, tau_lambda: float) -> np.ndarray:
    """Closed-form minimiser of mean((y_res - w_res * [1, X] @ theta)**2) + lambda * |theta|^2."""
    X = _as_matrix(X)
    n = X.shape[0]
    Z = w_res[:, None] * np.column_stack([np.ones(n), X])
    G = Z.T @ Z / n + tau_lambda * np.eye(Z.shape[1])
    return _solve_spd(G, Z.T @ y_res / n)


def fit_r(
    data: ObservationalDataset,
    config: RLearnerConfig = RLearnerConfig(),
    nuisance: NuisanceEstimates | None = None,
) -> RLearnerModel:
    """Robinson-residual learner with cross-fitted nuisances.

    ``nuisance`` may be passed to reuse (or inject) out-of-fold estimates.
    """
    if nuisance is None:
        nuisance = fit_nuisance(data, config)
    y_res, w_res = _robinson_residuals(data, nuisance)
    if np.any(np.abs(w_res) < _DEGENERATE_RESIDUAL):
        raise EstimationError("treatment residual |W - e| below 1e-6; pseudo-outcome undefined")
    if config.tau_model == "linear_wls":
        theta = solve_linear_r(data.features, y_res, w_res, config.tau_lambda)
        return RLearnerModel(config, nuisance, data.d, theta=theta)
    pseudo = y_res / w_res
    tau_model = fit_regressor(config.tau_base, data.features, pseudo, sample_weight=w_res**2)
    return RLearnerModel(config, nuisance, data.d, tau_model=tau_model)


def r_loss(model: RLearnerModel, data: ObservationalDataset, theta: np.ndarray | None = None) -> float:
    """Empirical R-loss on cached out-of-fold nuisances, plus the ridge term.

    With ``theta`` given, the linear effect ``theta[0] + X @ theta[1:]`` is
    scored instead of the model's own.
    """
    y_res, w_res = _robinson_residuals(data, model.nuisance)
    if theta is None and model.theta is not None:
        theta = model.theta
    if theta is not None:
        theta = np.asarray(theta, dtype=float)
        tau = theta[0] + data.features @ theta[1:]
        penalty = model.config.tau_lambda * float(theta @ theta)
    else:
        tau = model.predict_cate(data.features)
        penalty = 0.0
    return float(np.mean((y_res - w_res * tau) ** 2)) + penalty


# -- configuration-driven fitting --------------------------------------------


@dataclass(frozen=True)
class LearnerConfig:
    """Everything needed to fit one metalearner; ``name`` labels report rows."""

    kind: LearnerKind
    base: RegressorSpec = field(default_factory=RegressorSpec)
    base1: RegressorSpec | None = None
    tau_base: RegressorSpec | None = None
    g_mode: GMode = field(default_factory=ClassifierSpec)
    w_scale: float = 1.0
    r_config: RLearnerConfig | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner {self.kind!r}; expected one of {LEARNER_KINDS}")
        if not self.name:
            object.__setattr__(self, "name", self.kind)


def fit_learner(config: LearnerConfig, data: ObservationalDataset) -> FittedCateModel:
    if config.kind == "S":
        return fit_s(data, config.base, config.w_scale)
    if config.kind == "T":
        return fit_t(data, config.base, config.base1)
    if config.kind == "X":
        return fit_x(data, config.base, config.base1, config.tau_base, config.tau_base, config.g_mode)
    r_config = config.r_config or RLearnerConfig(outcome=config.base)
    return fit_r(data, r_config)


def default_learners(
    base: RegressorSpec = RegressorSpec(),
    kinds: Sequence[str] = LEARNER_KINDS,
    r_config: RLearnerConfig | None = None,
    g_mode: GMode = ClassifierSpec(),
) -> list[LearnerConfig]:
    r_config = r_config or RLearnerConfig(outcome=base)
    return [
        LearnerConfig(kind=k, base=base, g_mode=g_mode, r_config=r_config if k == "R" else None)
        for k in kinds
    ]
