"""Point prediction of regression means from a fitted working model.

The estimated group effect shrinks the group-mean residual by
h n_k / (1 + h n_k); a key never seen during fitting gets a zero effect and
is flagged so callers can tell the difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GroupKeyError, InternalError
from .estimator import FittedPmmp


@dataclass(frozen=True)
class PredictionResult:
    mean: float              # estimated regression mean
    effect: float            # estimated group effect (0 when unseen)
    shrinkage: float         # h n_k / (1 + h n_k); 0 when unseen
    group: int | None        # fitted group index, None when unseen
    unseen: bool


def shrinkage_factors(fit: FittedPmmp) -> np.ndarray:
    n = fit.stats.size
    return fit.variance_ratio * n / (1.0 + fit.variance_ratio * n)


def group_effects(fit: FittedPmmp) -> np.ndarray:
    """Estimated effect per group: shrunken group-mean residual."""
    resid = fit.stats.mean_y - fit.intercept - fit.stats.mean_x @ fit.slopes
    return shrinkage_factors(fit) * resid


def _validate_key(fit: FittedPmmp, key) -> tuple[int, ...]:
    key = tuple(int(v) for v in key)
    if len(key) != fit.schema.n_variables:
        raise GroupKeyError(
            f"key has {len(key)} categories, schema declares {fit.schema.n_variables}"
        )
    for j, v in enumerate(fit.schema.variables):
        if not 0 <= key[j] < v.n_categories:
            raise GroupKeyError(
                f"category code {key[j]} out of range for variable {v.name!r}"
            )
    return key


def predict_mean(fit: FittedPmmp, x, key) -> PredictionResult:
    """Predict the regression mean for one covariate vector and category tuple."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if len(x) != len(fit.slopes):
        raise GroupKeyError(
            f"covariate vector has length {len(x)}, model has {len(fit.slopes)} slopes"
        )
    key = _validate_key(fit, key)
    base = fit.intercept + float(x @ fit.slopes)
    g = fit.partition.index_of(key)
    if g is None:
        return PredictionResult(mean=base, effect=0.0, shrinkage=0.0,
                                group=None, unseen=True)
    gamma = float(shrinkage_factors(fit)[g])
    effect = float(group_effects(fit)[g])
    return PredictionResult(mean=base + effect, effect=effect, shrinkage=gamma,
                            group=g, unseen=False)


def predict_all(fit: FittedPmmp) -> np.ndarray:
    """Estimated regression means for every fitted row."""
    if fit.dataset is None:
        raise InternalError("fit was deserialized without its dataset; "
                            "predict on explicit rows instead")
    effects = group_effects(fit)
    return fit.intercept + fit.dataset.x @ fit.slopes + effects[fit.partition.group_of]
