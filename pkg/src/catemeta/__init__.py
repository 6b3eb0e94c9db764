"""CATE metalearners (S, T, X, R) over pluggable base learners."""

from .base_learners import ClassifierSpec, RegressorSpec, fit_classifier, fit_regressor, predict
from .data import (
    FoldAssignment,
    ObservationalDataset,
    ScenarioSpec,
    SyntheticSample,
    assign_folds,
    generate,
    load_csv,
)
from .evaluation import BenchmarkReport, CateMetrics, benchmark, cate_metrics, efficiency_bound, histogram
from .metalearners import (
    LearnerConfig,
    RLearnerConfig,
    estimate_ate,
    fit_learner,
    fit_r,
    fit_s,
    fit_t,
    fit_x,
    naive_ate,
    predict_cate,
)

__version__ = "0.1.0"
