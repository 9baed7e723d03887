"""Pseudo mixed model prediction for regression with many categorical predictors.

Collapses categorical combinations into group-level working random effects,
fits the working linear mixed model by regularized maximum likelihood, and
produces shrinkage predictions of the regression means with analytic MSE
estimates.  Ships lasso / elastic-net baselines and a Monte-Carlo harness.
"""

from .data import (
    CategoricalSchema,
    CategoricalVariable,
    Dataset,
    IngestSpec,
    TrueModel,
    apply_transform,
    export_csv,
    ingest_csv,
    transform,
    true_theta,
)
from .design import ExpandedDesign, expand, term_slots
from .enet import ElasticNetFit, cv_select, enet_path, predict_enet
from .errors import (
    AssumptionWarning,
    ConfigError,
    GroupKeyError,
    InternalError,
    PmmpError,
    RankDeficiencyError,
    SchemaError,
)
from .estimator import (
    FitConfig,
    FittedPmmp,
    GlsSolution,
    gls_solve,
    fit,
    objective,
    ratio_score,
    solve_profile_ratio,
    solve_ratio,
)
from .grouping import GroupPartition, GroupStats, build_partition, compute_stats
from .mse import (
    MseEstimate,
    MseWeights,
    margins,
    mse_batch,
    mse_for,
    mse_for_row,
    mse_weights,
    weights_for,
)
from .predict import PredictionResult, group_effects, predict_all, predict_mean, shrinkage_factors
from .simulate import (
    RunSummary,
    ScenarioConfig,
    ase,
    gen_dense,
    gen_sparse,
    generate,
    run_comparison,
    run_rb_study,
)

__version__ = "0.1.0"
