"""Working linear mixed model fit by regularized maximum likelihood.

The working model treats each categorical cell's contribution as a random
effect with variance ratio ``h`` (effect variance over noise variance).  The
inverse covariance is block diagonal, one block per group, so every quantity
below reduces to group sufficient statistics: a group enters the weighted
normal equations through its centered cross products at full weight plus a
rank-one term on its means with weight n_k / (1 + h n_k).

Fitting alternates the closed-form solve for (intercept, slopes, noise
variance) at a pinned ratio with a scalar root solve for the ratio, then
floors the ratio at the deterministic regularizer delta / sqrt(min group
size).  By default the alternation is driven to its fixed point (the joint
stationary point) by root-finding the profiled score; stopping after a single
alternation pair is available through the config but badly underestimates the
ratio whenever most groups are singletons, because the first-pass noise
variance then absorbs nearly all of the group-effect spread.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import CategoricalSchema, Dataset
from .errors import AssumptionWarning, RankDeficiencyError
from .grouping import GroupPartition, GroupStats, build_partition, compute_stats

RCOND_MIN = 1e-12


@dataclass(frozen=True)
class GlsSolution:
    """Closed-form solution of the mean/variance equations at a pinned ratio."""

    intercept: float
    slopes: np.ndarray
    noise_variance: float
    ratio_used: float


def _normal_equations(stats: GroupStats, ratio: float):
    """Weighted normal-equation blocks from group sufficient statistics."""
    w = stats.size / (1.0 + ratio * stats.size)  # group weight n_k/(1+h n_k)
    p = stats.p
    a = np.empty((p + 1, p + 1))
    a[0, 0] = w.sum()
    wx = w[:, None] * stats.mean_x
    a[0, 1:] = wx.sum(axis=0)
    a[1:, 0] = a[0, 1:]
    a[1:, 1:] = stats.ss_xx.sum(axis=0) + stats.mean_x.T @ wx
    rhs = np.empty(p + 1)
    rhs[0] = float(w @ stats.mean_y)
    rhs[1:] = stats.ss_xy.sum(axis=0) + wx.T @ stats.mean_y
    return a, rhs, w


def _check_conditioning(a: np.ndarray, names: Sequence[str] | None) -> None:
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] <= 0 or sv[-1] / sv[0] < RCOND_MIN:
        _, _, vt = np.linalg.svd(a)
        j = int(np.argmax(np.abs(vt[-1])))
        if j == 0:
            dim = "intercept"
        elif names is not None and j - 1 < len(names):
            dim = f"continuous column {names[j - 1]!r}"
        else:
            dim = f"continuous column {j - 1}"
        raise RankDeficiencyError(
            f"weighted normal equations are numerically singular along the {dim}"
        )


def gls_solve(stats: GroupStats, ratio: float,
              names: Sequence[str] | None = None) -> GlsSolution:
    """Solve the mean equations at a pinned variance ratio; ratio 0 is OLS."""
    a, rhs, w = _normal_equations(stats, ratio)
    _check_conditioning(a, names)
    beta = np.linalg.solve(a, rhs)
    b0, b = float(beta[0]), beta[1:]
    resid_mean = stats.mean_y - b0 - stats.mean_x @ b
    within = float(
        stats.ss_y.sum()
        - 2.0 * b @ stats.ss_xy.sum(axis=0)
        + b @ stats.ss_xx.sum(axis=0) @ b
    )
    quad = within + float(w @ (resid_mean * resid_mean))
    return GlsSolution(intercept=b0, slopes=b,
                       noise_variance=quad / stats.n_total, ratio_used=ratio)


def ratio_score(stats: GroupStats, intercept: float, slopes: np.ndarray,
                noise_variance: float, ratio: float) -> float:
    """Profile-likelihood score in the variance ratio.

    Sum over groups of n/(1+hn) * [1 - n r^2 / (R (1+hn))] with r the group
    mean residual; a root balances between-group residual spread against the
    noise level.
    """
    n = stats.size
    r = stats.mean_y - intercept - stats.mean_x @ np.asarray(slopes, dtype=float)
    one = 1.0 + ratio * n
    return float(np.sum((n / one) * (1.0 - n * r * r / (noise_variance * one))))


def objective(stats: GroupStats, intercept: float, slopes: np.ndarray,
              noise_variance: float, ratio: float) -> float:
    """Minus twice the working log-likelihood, dropping the 2*pi constant."""
    b = np.asarray(slopes, dtype=float)
    n = stats.size
    w = n / (1.0 + ratio * n)
    resid_mean = stats.mean_y - intercept - stats.mean_x @ b
    within = float(
        stats.ss_y.sum() - 2.0 * b @ stats.ss_xy.sum(axis=0)
        + b @ stats.ss_xx.sum(axis=0) @ b
    )
    quad = within + float(w @ (resid_mean * resid_mean))
    logdet = float(np.sum(np.log1p(ratio * n)))
    return stats.n_total * math.log(noise_variance) + logdet + quad / noise_variance


@dataclass(frozen=True)
class RootDiagnostics:
    bracket: tuple[float, float] | None
    iterations: int
    clamped: bool


def _bisect_score(score: Callable[[float], float], floor: float,
                  h_max: float, tol: float) -> tuple[float, RootDiagnostics]:
    """Root of a scalar score on [0, h_max] by sign-bracketed bisection.

    The score is scanned on {0} union a geometric grid; without a sign change
    (zero residual spread, say) there is no useful root and the regularizer
    floor is returned with a clamped flag.
    """
    grid = [0.0]
    h = 1e-8
    while h < h_max:
        grid.append(h)
        h *= 2.0
    grid.append(h_max)

    lo = grid[0]
    f_lo = score(lo)
    bracket = None
    if f_lo == 0.0:
        return lo, RootDiagnostics(bracket=(lo, lo), iterations=0, clamped=False)
    for hi in grid[1:]:
        f_hi = score(hi)
        if f_hi == 0.0:
            return hi, RootDiagnostics(bracket=(hi, hi), iterations=0, clamped=False)
        if f_lo * f_hi < 0.0:
            bracket = (lo, hi)
            break
        lo, f_lo = hi, f_hi
    if bracket is None:
        return floor, RootDiagnostics(bracket=None, iterations=0, clamped=True)

    lo, hi = bracket
    iterations = 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid = score(mid)
        iterations += 1
        if f_mid == 0.0:
            lo = hi = mid
            break
        if f_lo * f_mid < 0.0:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
    return 0.5 * (lo + hi), RootDiagnostics(bracket=bracket, iterations=iterations,
                                            clamped=False)


def solve_ratio(stats: GroupStats, intercept: float, slopes: np.ndarray,
                noise_variance: float, floor: float,
                *, h_max: float = 1e6, tol: float = 1e-10) -> tuple[float, RootDiagnostics]:
    """Root of the ratio score at fixed mean/variance parameters."""

    def score(h: float) -> float:
        return ratio_score(stats, intercept, slopes, noise_variance, h)

    return _bisect_score(score, floor, h_max, tol)


def solve_profile_ratio(stats: GroupStats, floor: float,
                        *, h_max: float = 1e6, tol: float = 1e-10,
                        names: Sequence[str] | None = None,
                        ) -> tuple[float, GlsSolution, RootDiagnostics]:
    """Root of the profiled ratio score, re-solving the mean equations at each h.

    A root here satisfies all four stationarity conditions at once, i.e. it is
    the fixed point of alternating the closed-form solve with the plain root
    solve until nothing moves.
    """

    def score(h: float) -> float:
        sol = gls_solve(stats, h, names=names)
        return ratio_score(stats, sol.intercept, sol.slopes, sol.noise_variance, h)

    root, diag = _bisect_score(score, floor, h_max, tol)
    return root, gls_solve(stats, max(root, floor), names=names), diag


@dataclass(frozen=True)
class FitConfig:
    delta: float = 0.1       # regularizer scale: floor = delta / sqrt(min group size)
    converge: bool = True    # drive the alternation to its fixed point
    h_max: float = 1e6
    root_tol: float = 1e-10

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class FitDiagnostics:
    ratio_initial: float          # root after the first alternation
    ratio_solved: float           # root after the final alternation, before flooring
    clamped_initial: bool
    clamped_final: bool
    floored: bool                 # final ratio was lifted to the regularizer floor
    root_bracket: tuple[float, float] | None
    root_iterations: int
    min_within_eigenvalue: float  # smallest eigenvalue of the pooled centered x moment
    warnings: tuple[str, ...]


@dataclass(frozen=True)
class FittedPmmp:
    intercept: float
    slopes: np.ndarray
    noise_variance: float
    variance_ratio: float        # post-floor value used for prediction
    ratio_floor: float
    config: FitConfig
    schema: CategoricalSchema
    x_names: tuple[str, ...]
    y_name: str
    partition: GroupPartition
    stats: GroupStats
    diagnostics: FitDiagnostics
    dataset: Dataset | None = None  # absent when deserialized
    transforms: dict | None = None  # ingestion transforms to replay on new data

    @property
    def effect_variance(self) -> float:
        return self.variance_ratio * self.noise_variance

    def to_dict(self) -> dict:
        d = {
            "intercept": self.intercept,
            "slopes": [float(v) for v in self.slopes],
            "noise_variance": self.noise_variance,
            "variance_ratio": self.variance_ratio,
            "ratio_floor": self.ratio_floor,
            "effect_variance": self.effect_variance,
            "delta": self.config.delta,
            "transforms": self.transforms or {},
            "schema": _spec_dict(self),
            "groups": {
                "keys": [list(k) for k in self.partition.keys],
                "size": [int(v) for v in self.stats.size],
                "mean_y": [float(v) for v in self.stats.mean_y],
                "mean_x": [[float(v) for v in row] for row in self.stats.mean_x],
                "ss_y": [float(v) for v in self.stats.ss_y],
                "ss_xy": [[float(v) for v in row] for row in self.stats.ss_xy],
                "ss_xx": [[[float(v) for v in row] for row in m] for m in self.stats.ss_xx],
                "n_total": self.stats.n_total,
            },
            "diagnostics": {
                "ratio_initial": self.diagnostics.ratio_initial,
                "ratio_solved": self.diagnostics.ratio_solved,
                "clamped_initial": self.diagnostics.clamped_initial,
                "clamped_final": self.diagnostics.clamped_final,
                "floored": self.diagnostics.floored,
                "root_bracket": list(self.diagnostics.root_bracket)
                if self.diagnostics.root_bracket else None,
                "root_iterations": self.diagnostics.root_iterations,
                "min_within_eigenvalue": self.diagnostics.min_within_eigenvalue,
                "warnings": list(self.diagnostics.warnings),
            },
        }
        return d

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, default=_json_float)
            f.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "FittedPmmp":
        from .data import IngestSpec

        spec = IngestSpec.from_dict(d["schema"])
        g = d["groups"]
        keys = tuple(tuple(int(v) for v in k) for k in g["keys"])
        sizes = np.array(g["size"], dtype=np.int64)
        # member row indices are unknown after deserialization; synthesize
        # contiguous blocks so group-blocked code keeps working.
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        members = tuple(np.arange(bounds[i], bounds[i + 1]) for i in range(len(sizes)))
        group_of = np.repeat(np.arange(len(sizes)), sizes)
        partition = GroupPartition(keys=keys, sizes=sizes, group_of=group_of,
                                   members=members, n_star=int(sizes.min()))
        stats = GroupStats(
            size=sizes.astype(float),
            mean_y=np.array(g["mean_y"], dtype=float),
            mean_x=np.array(g["mean_x"], dtype=float).reshape(len(sizes), -1),
            ss_y=np.array(g["ss_y"], dtype=float),
            ss_xy=np.array(g["ss_xy"], dtype=float).reshape(len(sizes), -1),
            ss_xx=np.array(g["ss_xx"], dtype=float).reshape(
                len(sizes), len(spec.continuous), len(spec.continuous)),
            n_total=int(g["n_total"]),
        )
        diag = d["diagnostics"]
        diagnostics = FitDiagnostics(
            ratio_initial=float(diag["ratio_initial"]),
            ratio_solved=float(diag["ratio_solved"]),
            clamped_initial=bool(diag["clamped_initial"]),
            clamped_final=bool(diag["clamped_final"]),
            floored=bool(diag["floored"]),
            root_bracket=tuple(diag["root_bracket"]) if diag["root_bracket"] else None,
            root_iterations=int(diag["root_iterations"]),
            min_within_eigenvalue=float(diag["min_within_eigenvalue"]),
            warnings=tuple(diag["warnings"]),
        )
        return cls(
            intercept=float(d["intercept"]),
            slopes=np.array(d["slopes"], dtype=float),
            noise_variance=float(d["noise_variance"]),
            variance_ratio=float(d["variance_ratio"]),
            ratio_floor=float(d["ratio_floor"]),
            config=FitConfig(delta=float(d["delta"])),
            schema=spec.schema,
            x_names=spec.continuous,
            y_name=spec.response,
            partition=partition,
            stats=stats,
            diagnostics=diagnostics,
            dataset=None,
            transforms=d.get("transforms") or None,
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "FittedPmmp":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _spec_dict(fit: FittedPmmp) -> dict:
    d = fit.schema.to_dict()
    d["response"] = fit.y_name
    d["continuous"] = list(fit.x_names)
    return d


def _json_float(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v)}")


def fit(dataset: Dataset, config: FitConfig = FitConfig()) -> FittedPmmp:
    """Full fitting procedure on a dataset.

    Closed-form solve at the regularizer floor, root-solve the ratio, then
    either re-solve/root-solve once more (``converge=False``) or drive the
    pair to its joint fixed point via the profiled score (the default).  The
    final ratio is floored; root solves that find no sign change fall back to
    the floor with a clamped flag.
    """
    partition = build_partition(dataset)
    stats = compute_stats(dataset, partition)
    floor = config.delta / math.sqrt(partition.n_star)

    notes: list[str] = []
    if partition.n_star < 2:
        notes.append(
            f"smallest group has {partition.n_star} observation(s); "
            "shrinkage theory assumes growing group sizes"
        )
    if floor * partition.n_star < 1.0:
        notes.append(
            f"regularizer floor times smallest group size is "
            f"{floor * partition.n_star:.3g} < 1; the floor may be too weak here"
        )
    pooled = stats.ss_xx.sum(axis=0) / stats.n_total
    min_eig = float(np.linalg.eigvalsh(pooled).min()) if stats.p else float("inf")
    if stats.p and min_eig < 1e-8:
        notes.append(
            f"within-group variation of the continuous predictors is nearly "
            f"degenerate (min eigenvalue {min_eig:.3g})"
        )
    for msg in notes:
        warnings.warn(msg, AssumptionWarning, stacklevel=2)

    initial = gls_solve(stats, floor, names=dataset.x_names)
    ratio_initial, diag_initial = solve_ratio(
        stats, initial.intercept, initial.slopes, initial.noise_variance, floor,
        h_max=config.h_max, tol=config.root_tol)

    if config.converge:
        ratio_solved, solution, diag_final = solve_profile_ratio(
            stats, floor, h_max=config.h_max, tol=config.root_tol,
            names=dataset.x_names)
    else:
        solution = gls_solve(stats, max(ratio_initial, floor), names=dataset.x_names)
        ratio_solved, diag_final = solve_ratio(
            stats, solution.intercept, solution.slopes, solution.noise_variance, floor,
            h_max=config.h_max, tol=config.root_tol)

    final_ratio = max(ratio_solved, floor)
    diagnostics = FitDiagnostics(
        ratio_initial=ratio_initial,
        ratio_solved=ratio_solved,
        clamped_initial=diag_initial.clamped,
        clamped_final=diag_final.clamped,
        floored=final_ratio > ratio_solved,
        root_bracket=diag_final.bracket,
        root_iterations=diag_final.iterations,
        min_within_eigenvalue=min_eig,
        warnings=tuple(notes),
    )
    return FittedPmmp(
        intercept=solution.intercept,
        slopes=solution.slopes,
        noise_variance=solution.noise_variance,
        variance_ratio=final_ratio,
        ratio_floor=floor,
        config=config,
        schema=dataset.schema,
        x_names=dataset.x_names,
        y_name=dataset.y_name,
        partition=partition,
        stats=stats,
        diagnostics=diagnostics,
        dataset=dataset,
    )
