"""Regression and propensity primitives that the metalearners compose.

All regressors accept optional nonnegative sample weights; the R-learner's
pseudo-outcome route needs them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

RegressorKind = Literal["ols", "ridge", "knn", "boosted_stumps"]
REGRESSOR_KINDS: tuple[str, ...] = ("ols", "ridge", "knn", "boosted_stumps")

_SINGULAR_JITTER = 1e-10
_MAX_COND = 1e12


class ConvergenceError(RuntimeError):
    """The iterative classifier fit did not reach its tolerance."""


def _as_matrix(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix")
    return X


def _check_xy(X, y, sample_weight=None):
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] == 0:
        raise ValueError("empty input: at least one row is required")
    if len(y) != X.shape[0]:
        raise ValueError(f"dimension mismatch: X has {X.shape[0]} rows, y has {len(y)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in training data")
    if sample_weight is None:
        w = np.ones(len(y))
    else:
        w = np.asarray(sample_weight, dtype=float).ravel()
        if len(w) != len(y):
            raise ValueError("sample_weight length does not match y")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("sample weights must be finite, nonnegative and not all zero")
    return X, y, w


def _solve_spd(G: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a symmetric PSD system, jittering the diagonal if near-singular."""
    if np.linalg.cond(G) > _MAX_COND:
        G = G + _SINGULAR_JITTER * max(1.0, float(np.trace(G)) / len(G)) * np.eye(len(G))
    return np.linalg.solve(G, b)


@dataclass(frozen=True)
class RegressorSpec:
    kind: RegressorKind = "ols"
    ridge_lambda: float = 1.0
    k: int = 5
    n_rounds: int = 200
    learning_rate: float = 0.1
    min_samples_leaf: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in REGRESSOR_KINDS:
            raise ValueError(f"unknown regressor kind {self.kind!r}")
        if not self.ridge_lambda >= 0:
            raise ValueError("ridge_lambda must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")

    @property
    def min_rows(self) -> int:
        return self.k if self.kind == "knn" else 1


class FittedRegressor:
    kind: str
    n_features: int

    def predict(self, X) -> np.ndarray:
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


class LinearModel(FittedRegressor):
    def __init__(self, kind: str, intercept: float, coef: np.ndarray):
        self.kind = kind
        self.intercept = float(intercept)
        self.coef = np.asarray(coef, dtype=float)
        self.coef.setflags(write=False)
        self.n_features = len(self.coef)

    def _predict(self, X):
        return self.intercept + X @ self.coef


def _fit_ols(X, y, w) -> LinearModel:
    A = np.column_stack([np.ones(len(y)), X])
    Aw = A * w[:, None]
    b = _solve_spd(Aw.T @ A, Aw.T @ y)
    return LinearModel("ols", b[0], b[1:])


def _fit_ridge(X, y, w, lam: float) -> LinearModel:
    # centring leaves the intercept out of the penalty
    sw = w.sum()
    x_mean = (w @ X) / sw
    y_mean = (w @ y) / sw
    Xc = X - x_mean
    yc = y - y_mean
    Xw = Xc * w[:, None]
    G = Xw.T @ Xc + lam * np.eye(X.shape[1])
    coef = _solve_spd(G, Xw.T @ yc)
    return LinearModel("ridge", y_mean - x_mean @ coef, coef)


class KNNRegressor(FittedRegressor):
    """Weighted mean of the k nearest training rows (Euclidean); ties go to lower index."""

    kind = "knn"

    def __init__(self, X, y, w, k: int):
        self.X = X.copy()
        self.y = y.copy()
        self.w = w.copy()
        self.k = k
        self.n_features = X.shape[1]
        self._tree = cKDTree(self.X)

    def _average(self, idx: np.ndarray) -> np.ndarray:
        w = self.w[idx]
        denom = w.sum(axis=-1)
        num = (w * self.y[idx]).sum(axis=-1)
        # all-zero-weight neighbourhoods fall back to the plain mean
        flat = denom <= 0
        if np.any(flat):
            num[flat] = self.y[idx[flat]].sum(axis=-1)
            denom[flat] = self.k
        return num / denom

    def _brute_neighbours(self, x: np.ndarray) -> np.ndarray:
        d = np.sum((self.X - x) ** 2, axis=1)
        return np.lexsort((np.arange(len(d)), d))[: self.k]

    def _predict(self, X):
        k, n = self.k, len(self.y)
        if k == n:
            return np.full(X.shape[0], self._average(np.arange(n)[None, :])[0])
        dist, idx = self._tree.query(X, k=k + 1)
        idx = idx[:, :k].copy()
        # a tie across the k-th boundary makes the tree's choice arbitrary
        tied = np.flatnonzero(dist[:, k] <= dist[:, k - 1])
        for i in tied:
            idx[i] = self._brute_neighbours(X[i])
        return self._average(idx)


class BoostedStumps(FittedRegressor):
    """Gradient boosting with depth-1 trees on weighted squared loss."""

    kind = "boosted_stumps"

    def __init__(self, init: float, stumps: list, learning_rate: float, n_features: int, train_loss):
        self.init = init
        # each stump: (feature, threshold, left_value, right_value); feature -1 = constant
        self.stumps = stumps
        self.learning_rate = learning_rate
        self.n_features = n_features
        self.train_loss = tuple(train_loss)

    def _predict(self, X):
        F = np.full(X.shape[0], self.init)
        for j, thr, left, right in self.stumps:
            if j < 0:
                F += self.learning_rate * left
            else:
                F += self.learning_rate * np.where(X[:, j] <= thr, left, right)
        return F


def _best_stump(X, orders, r, w, min_leaf: int):
    best = (-np.inf, -1, 0.0, 0.0, 0.0)
    sw_total = w.sum()
    swr_total = w @ r
    n = len(r)
    if n < 2 * min_leaf:
        return best
    for j in range(X.shape[1]):
        o = orders[j]
        xs = X[o, j]
        cw = np.cumsum(w[o])[:-1]
        cwr = np.cumsum(w[o] * r[o])[:-1]
        valid = xs[:-1] < xs[1:]
        pos = np.arange(1, n)
        valid &= (pos >= min_leaf) & (n - pos >= min_leaf)
        rw = sw_total - cw
        valid &= (cw > 0) & (rw > 0)
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = cwr**2 / cw + (swr_total - cwr) ** 2 / rw
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            thr = 0.5 * (xs[i] + xs[i + 1])
            best = (gain[i], j, thr, cwr[i] / cw[i], (swr_total - cwr[i]) / rw[i])
    return best


def _fit_boosted(X, y, w, spec: RegressorSpec) -> BoostedStumps:
    orders = [np.argsort(X[:, j], kind="stable") for j in range(X.shape[1])]
    sw = w.sum()
    init = float(w @ y / sw)
    F = np.full(len(y), init)
    stumps = []
    losses = [float(w @ (y - F) ** 2 / sw)]
    lr = spec.learning_rate
    for _ in range(spec.n_rounds):
        r = y - F
        gain, j, thr, left, right = _best_stump(X, orders, r, w, spec.min_samples_leaf)
        if j < 0:
            step = float(w @ r / sw)
            stumps.append((-1, 0.0, step, step))
            F = F + lr * step
        else:
            stumps.append((j, float(thr), float(left), float(right)))
            F = F + lr * np.where(X[:, j] <= thr, left, right)
        losses.append(float(w @ (y - F) ** 2 / sw))
    return BoostedStumps(init, stumps, lr, X.shape[1], losses)


def fit_regressor(spec: RegressorSpec, X, y, sample_weight=None) -> FittedRegressor:
    """Fit the regressor described by ``spec`` on ``(X, y)``.

    Raises
    ------
    ValueError
        On empty input, mismatched lengths, non-finite values, or fewer rows
        than the learner needs (``k`` for knn).
    """
    X, y, w = _check_xy(X, y, sample_weight)
    if X.shape[0] < spec.min_rows:
        raise ValueError(
            f"{spec.kind} needs at least {spec.min_rows} rows, got {X.shape[0]}"
        )
    if spec.kind == "ols":
        return _fit_ols(X, y, w)
    if spec.kind == "ridge":
        return _fit_ridge(X, y, w, spec.ridge_lambda)
    if spec.kind == "knn":
        return KNNRegressor(X, y, w, spec.k)
    return _fit_boosted(X, y, w, spec)


def predict(model: FittedRegressor, X) -> np.ndarray:
    return model.predict(X)


# -- propensity --------------------------------------------------------------

ClassifierKind = Literal["logistic", "constant"]


@dataclass(frozen=True)
class ClassifierSpec:
    """Propensity model recipe.

    ``kind="constant"`` skips fitting and predicts ``constant`` everywhere;
    it is how a known design propensity (randomised data) is supplied.
    """

    kind: ClassifierKind = "logistic"
    regularization: float = 1e-4
    max_iter: int = 100
    tol: float = 1e-8
    clip: float = 0.01
    constant: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("logistic", "constant"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if not self.regularization >= 0:
            raise ValueError("regularization must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.clip < 0.5:
            raise ValueError("clip must lie in (0, 0.5)")
        if not 0 < self.constant < 1:
            raise ValueError("constant propensity must lie in (0, 1)")


class FittedClassifier:
    n_features: int
    clip: float

    def predict_proba(self, X) -> np.ndarray:
        """P(W=1 | X), clipped to ``[clip, 1 - clip]``."""
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise ValueError(
                f"dimension mismatch: model trained on {self.n_features} features, got {X.shape[1]}"
            )
        return np.clip(self._raw_proba(X), self.clip, 1.0 - self.clip)

    def _raw_proba(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ConstantPropensity(FittedClassifier):
    def __init__(self, value: float, n_features: int, clip: float = 0.01):
        self.value = float(value)
        self.n_features = n_features
        self.clip = clip

    def _raw_proba(self, X):
        return np.full(X.shape[0], self.value)


class LogisticModel(FittedClassifier):
    def __init__(self, x_mean, x_scale, coef, clip: float, n_iter: int):
        self.x_mean = x_mean
        self.x_scale = x_scale
        self.coef = coef
        self.clip = clip
        self.n_iter = n_iter
        self.n_features = len(x_mean)

    def _raw_proba(self, X):
        z = self.coef[0] + ((X - self.x_mean) / self.x_scale) @ self.coef[1:]
        return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logistic_objective(A, t, b, penalty):
    z = A @ b
    # mean negative log-likelihood, numerically stable
    nll = np.mean(np.logaddexp(0.0, z) - t * z)
    return nll + penalty @ (b * b)


def _fit_logistic(spec: ClassifierSpec, X, t) -> LogisticModel:
    n, d = X.shape
    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    A = np.column_stack([np.ones(n), (X - x_mean) / x_scale])
    penalty = np.full(d + 1, spec.regularization)
    penalty[0] = 0.0
    rate = t.mean()
    b = np.zeros(d + 1)
    b[0] = np.log(rate / (1 - rate))
    f = _logistic_objective(A, t, b, penalty)
    for it in range(1, spec.max_iter + 1):
        p = 0.5 * (1.0 + np.tanh(0.5 * (A @ b)))
        grad = A.T @ (p - t) / n + 2.0 * penalty * b
        if np.max(np.abs(grad)) < spec.tol:
            return LogisticModel(x_mean, x_scale, b, spec.clip, it - 1)
        H = (A * (p * (1 - p))[:, None]).T @ A / n + np.diag(2.0 * penalty)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        # backtracking keeps the Newton iteration monotone
        s = 1.0
        while s > 1e-12:
            cand = b - s * step
            fc = _logistic_objective(A, t, cand, penalty)
            if fc <= f:
                break
            s *= 0.5
        else:
            break
        b, f = cand, fc
    p = 0.5 * (1.0 + np.tanh(0.5 * (A @ b)))
    grad = A.T @ (p - t) / n + 2.0 * penalty * b
    if np.max(np.abs(grad)) < spec.tol:
        return LogisticModel(x_mean, x_scale, b, spec.clip, spec.max_iter)
    raise ConvergenceError(
        f"logistic regression did not converge in {spec.max_iter} iterations "
        f"(max |gradient| = {np.max(np.abs(grad)):.3g}, tol = {spec.tol:g})"
    )


def fit_classifier(spec: ClassifierSpec, X, w) -> FittedClassifier:
    X, t, _ = _check_xy(X, w)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("classifier labels must be 0/1")
    if spec.kind == "constant":
        return ConstantPropensity(spec.constant, X.shape[1], spec.clip)
    if t.all() or not t.any():
        raise ValueError("single-class input: both treatment values must be present")
    return _fit_logistic(spec, X, t)
