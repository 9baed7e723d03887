"""Analytic mean-squared-error estimates for the predicted regression means.

The prediction error of a fitted mean splits into a squared bias bracket
driven by the spread of the (estimated) group effects and a noise bracket
proportional to the noise variance.  Both brackets are inner products of
N-vectors that are affine within groups, so everything below is evaluated
from group sufficient statistics; cost per row is O(K p + p^2) and no N-by-N
product is ever formed.  The reported margin of error is twice the square
root of the estimated MSE.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GroupKeyError, InternalError, RankDeficiencyError
from .estimator import FittedPmmp
from .grouping import GroupStats
from .predict import group_effects, predict_all


@dataclass(frozen=True)
class MseWeights:
    """Group-blocked decomposition of the estimator's error weights.

    Stored per group: sizes, shrinkage factors and damping factors; globally:
    the weighted slope moment matrix with its inverse, the weighted covariate
    total, the intercept weight split (total, slope-projected part, net), and
    the accumulated second moments needed for row-level norms.
    """

    ratio: float
    sizes: np.ndarray        # (K,)
    shrink: np.ndarray       # (K,) h n / (1 + h n)
    damp: np.ndarray         # (K,) 1 / (1 + h n)
    mean_x: np.ndarray       # (K, p) group covariate means
    gram: np.ndarray         # (p, p) weighted covariate moment
    gram_inv: np.ndarray
    weighted_x: np.ndarray   # (p,) sum of group weights times covariate means
    weight_total: float      # sum of group weights
    weight_projected: float  # slope-projected part of the intercept weight
    intercept_weight: float  # net weight: total minus projected
    group_slope_sum: np.ndarray      # (K, p) per-group column sums of the slope rows
    group_intercept_sum: np.ndarray  # (K,) per-group sums of the intercept row
    slope_sq: np.ndarray     # (p, p) accumulated outer products of slope columns
    cross_sq: np.ndarray     # (p,)  accumulated slope-column / intercept-row products
    intercept_sq: float      # accumulated squared intercept row

    @property
    def k(self) -> int:
        return len(self.sizes)

    # Dense realizations, used by the equivalence oracles in the test suite.
    # These are p-by-N and 1-by-N, never N-by-N.

    def slope_core_rows(self, x: np.ndarray, group_of: np.ndarray) -> np.ndarray:
        """p-by-N rows mapping a residual vector to the raw slope solve."""
        t = np.asarray(x, dtype=float) - self.shrink[group_of, None] * self.mean_x[group_of]
        return self.gram_inv @ t.T

    def intercept_score_row(self, x: np.ndarray, group_of: np.ndarray) -> np.ndarray:
        """Length-N row mapping a residual vector to the intercept score."""
        w1 = self.slope_core_rows(x, group_of)
        return self.damp[group_of] - self.weighted_x @ w1

    def slope_error_rows(self, x: np.ndarray, group_of: np.ndarray) -> np.ndarray:
        """p-by-N rows mapping a residual vector to the slope estimation error."""
        w1 = self.slope_core_rows(x, group_of)
        w3 = self.damp[group_of] - self.weighted_x @ w1
        return w1 - np.outer(self.gram_inv @ self.weighted_x, w3) / self.intercept_weight


def mse_weights(stats: GroupStats, ratio: float) -> MseWeights:
    """Build the blocked error-weight decomposition at a fixed variance ratio."""
    if not ratio > 0:
        raise ConfigError("mse weights require a positive variance ratio")
    n = stats.size
    damp = 1.0 / (1.0 + ratio * n)
    shrink = 1.0 - damp
    wt = n * damp
    p = stats.p

    gram = stats.ss_xx.sum(axis=0) + stats.mean_x.T @ (wt[:, None] * stats.mean_x)
    if p:
        sv = np.linalg.svd(gram, compute_uv=False)
        if sv[0] <= 0 or sv[-1] / sv[0] < 1e-12:
            raise RankDeficiencyError("weighted covariate moment matrix is singular")
        gram_inv = np.linalg.inv(gram)
    else:
        gram_inv = np.zeros((0, 0))
    weighted_x = (wt[:, None] * stats.mean_x).sum(axis=0)
    weight_total = float(wt.sum())
    weight_projected = float(weighted_x @ gram_inv @ weighted_x)
    intercept_weight = weight_total - weight_projected
    if not intercept_weight > 0:
        raise RankDeficiencyError("net intercept weight is not positive")

    group_slope_sum = (wt[:, None] * stats.mean_x) @ gram_inv  # rows are U_k
    group_intercept_sum = wt - group_slope_sum @ weighted_x

    inner = stats.ss_xx.sum(axis=0) + stats.mean_x.T @ ((n * damp * damp)[:, None] * stats.mean_x)
    slope_sq = gram_inv @ inner @ gram_inv
    cross_sq = (damp[:, None] * group_slope_sum).sum(axis=0) - slope_sq @ weighted_x
    intercept_sq = float(
        np.sum(n * damp * damp) - 2.0 * damp @ (group_slope_sum @ weighted_x)
        + weighted_x @ slope_sq @ weighted_x
    )
    return MseWeights(
        ratio=ratio, sizes=n, shrink=shrink, damp=damp, mean_x=stats.mean_x,
        gram=gram, gram_inv=gram_inv, weighted_x=weighted_x,
        weight_total=weight_total, weight_projected=weight_projected,
        intercept_weight=intercept_weight,
        group_slope_sum=group_slope_sum, group_intercept_sum=group_intercept_sum,
        slope_sq=slope_sq, cross_sq=cross_sq, intercept_sq=intercept_sq,
    )


def weights_for(fit: FittedPmmp) -> MseWeights:
    """Error weights at the fitted ratio, warning when the signal was too weak
    for the root solve (the ratio sits at its regularizer floor)."""
    if fit.diagnostics.clamped_final or fit.diagnostics.floored:
        warnings.warn(
            "variance ratio sits at its regularizer floor; MSE estimates are "
            "evaluated in a low-signal regime the theory does not cover",
            UserWarning, stacklevel=2,
        )
    return mse_weights(fit.stats, fit.variance_ratio)


@dataclass(frozen=True)
class MseEstimate:
    value: float
    bias_part: float      # squared effect-spread bracket
    variance_part: float  # noise variance times squared weight norm
    margin: float         # 2 sqrt(value)


def _check_same_ratio(fit: FittedPmmp, w: MseWeights) -> None:
    if abs(w.ratio - fit.variance_ratio) > 1e-12 * max(1.0, fit.variance_ratio):
        raise ConfigError("weights were built at a different variance ratio than the fit")


def mse_for(fit: FittedPmmp, w: MseWeights, x, group: int) -> MseEstimate:
    """MSE estimate for a covariate vector attached to fitted group ``group``."""
    _check_same_ratio(fit, w)
    if not 0 <= group < w.k:
        raise GroupKeyError(f"group index {group} out of range")
    x = np.asarray(x, dtype=float).reshape(-1)
    effects = group_effects(fit)
    centered = effects - effects.mean()

    t = x - w.shrink[group] * w.mean_x[group]
    c = (w.damp[group] - float(t @ (w.gram_inv @ w.weighted_x))) / w.intercept_weight
    group_sums = w.group_slope_sum @ t + c * w.group_intercept_sum
    bias_bracket = float(centered @ group_sums) - centered[group] * w.damp[group]

    sq = float(t @ w.slope_sq @ t) + 2.0 * c * float(w.cross_sq @ t) + c * c * w.intercept_sq
    gamma = w.shrink[group]
    n_k = w.sizes[group]
    noise_norm = sq + 2.0 * gamma * group_sums[group] / n_k + gamma * gamma / n_k

    bias_part = bias_bracket * bias_bracket
    variance_part = fit.noise_variance * noise_norm
    value = bias_part + variance_part
    return MseEstimate(value=value, bias_part=bias_part,
                       variance_part=variance_part, margin=2.0 * np.sqrt(value))


def mse_for_row(fit: FittedPmmp, w: MseWeights, i: int) -> MseEstimate:
    """MSE estimate for fitted row ``i``."""
    if fit.dataset is None:
        raise InternalError("fit was deserialized without its dataset; "
                            "use mse_for with explicit rows")
    if not 0 <= i < fit.dataset.n:
        raise IndexError(f"row index {i} out of range")
    return mse_for(fit, w, fit.dataset.x[i], int(fit.partition.group_of[i]))


@dataclass(frozen=True)
class MseBatch:
    mean: np.ndarray
    value: np.ndarray
    bias_part: np.ndarray
    variance_part: np.ndarray
    margin: np.ndarray


def mse_batch(fit: FittedPmmp, w: MseWeights | None = None) -> MseBatch:
    """Vectorized MSE estimates for every fitted row."""
    if fit.dataset is None:
        raise InternalError("fit was deserialized without its dataset")
    if w is None:
        w = weights_for(fit)
    _check_same_ratio(fit, w)
    g = fit.partition.group_of
    x = fit.dataset.x
    n_rows = len(g)
    effects = group_effects(fit)
    centered = effects - effects.mean()

    t = x - w.shrink[g, None] * w.mean_x[g]
    c = (w.damp[g] - t @ (w.gram_inv @ w.weighted_x)) / w.intercept_weight
    group_sums = t @ w.group_slope_sum.T + np.outer(c, w.group_intercept_sum)
    bias_bracket = group_sums @ centered - centered[g] * w.damp[g]

    sq = np.einsum("ij,jk,ik->i", t, w.slope_sq, t) + 2.0 * c * (t @ w.cross_sq) \
        + c * c * w.intercept_sq
    own = group_sums[np.arange(n_rows), g]
    gamma = w.shrink[g]
    noise_norm = sq + 2.0 * gamma * own / w.sizes[g] + gamma * gamma / w.sizes[g]

    bias_part = bias_bracket * bias_bracket
    variance_part = fit.noise_variance * noise_norm
    value = bias_part + variance_part
    return MseBatch(mean=predict_all(fit), value=value, bias_part=bias_part,
                    variance_part=variance_part, margin=2.0 * np.sqrt(value))


def margins(fit: FittedPmmp, w: MseWeights | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(estimated mean, margin of error) for every fitted row."""
    batch = mse_batch(fit, w)
    return batch.mean, batch.margin
