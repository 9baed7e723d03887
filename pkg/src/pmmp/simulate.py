"""Monte-Carlo harness: scenario generators, method comparisons, MSE calibration.

Two families of scenarios share the same generators: a sparse one with a
fixed block-sparse coefficient vector and a dense one whose categorical
coefficients are drawn Uniform(0,1).  Variants drop categorical variables to
change the number of cells.  Every replicate derives its own RNG stream from
(root seed, replicate index), so results are bit-reproducible regardless of
how replicates are scheduled.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CategoricalSchema, CategoricalVariable, Dataset, TrueModel, true_theta
from .design import expand, term_slots
from .enet import DEFAULT_ALPHA_GRID, cv_table, refit_at, _select
from .errors import ConfigError
from .estimator import FitConfig, fit
from .mse import mse_batch, weights_for
from .predict import predict_all

_VAR_DEFS = (
    ("c1", 4, (0.2, 0.3, 0.3, 0.2)),
    ("c2", 5, (1 / 12, 1 / 4, 1 / 3, 1 / 4, 1 / 12)),
    ("c3", 6, (1 / 12, 1 / 6, 1 / 4, 1 / 4, 1 / 6, 1 / 12)),
)

# kind -> (indices into _VAR_DEFS, interaction terms over the kept variables)
_KINDS = {
    "sparse": ((0, 1, 2), ((0, 1), (0, 2), (1, 2), (0, 1, 2))),
    "dense": ((0, 1, 2), ((0, 1), (0, 2), (1, 2), (0, 1, 2))),
    "dense-a": ((1, 2), ((0, 1),)),
    "dense-b": ((0, 2), ((0, 1),)),
    "dense-c": ((0, 1), ((0, 1),)),
    "dense-d": ((2,), ()),
}

SPARSE_BLOCKS = (29, 30, 30, 30)  # alternating runs of 2s and 0s


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "dense"
    n: int = 30
    sigma: float = 1.0
    n_sim: int = 200
    seed: int = 12345
    study: str = "comparison"          # "comparison" or "rb"
    fixed_design: bool = False         # reuse one design (and model) across runs
    fixed_coefficients: bool = False   # draw dense coefficients once
    delta: float = 0.1
    cv_folds: int = 10
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    n_lambda: int = 100

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "sparse" and self.fixed_coefficients:
            raise ConfigError("the sparse coefficient vector is already fixed")
        if self.n_sim < 1:
            raise ConfigError("n_sim must be at least 1")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.study not in ("comparison", "rb"):
            raise ConfigError(f"unknown study {self.study!r}")
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "n": self.n, "sigma": self.sigma,
            "n_sim": self.n_sim, "seed": self.seed, "study": self.study,
            "fixed_design": self.fixed_design,
            "fixed_coefficients": self.fixed_coefficients,
            "delta": self.delta, "cv_folds": self.cv_folds,
            "alpha_grid": list(self.alpha_grid), "n_lambda": self.n_lambda,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown scenario fields: {sorted(extra)}")
        if "alpha_grid" in d:
            d = {**d, "alpha_grid": tuple(d["alpha_grid"])}
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioConfig":
        path = Path(path)
        text = path.read_bytes()
        if path.suffix.lower() == ".toml":
            try:
                import tomllib as toml
            except ImportError:
                import tomli as toml
            return cls.from_dict(toml.loads(text.decode("utf-8")))
        return cls.from_dict(json.loads(text.decode("utf-8")))


def scenario_schema(kind: str) -> tuple[CategoricalSchema, tuple]:
    """Schema and full term list (mains plus declared interactions) for a kind."""
    var_idx, interactions = _KINDS[kind]
    variables = tuple(
        CategoricalVariable(name, tuple(str(i + 1) for i in range(size)), reference=0)
        for name, size, _ in (_VAR_DEFS[i] for i in var_idx)
    )
    schema = CategoricalSchema(variables, tuple(interactions))
    terms = tuple((j,) for j in range(len(variables))) + tuple(interactions)
    return schema, terms


def _category_probs(kind: str) -> list[np.ndarray]:
    var_idx, _ = _KINDS[kind]
    return [np.asarray(_VAR_DEFS[i][2]) for i in var_idx]


def draw_model(config: ScenarioConfig, rng: np.random.Generator) -> TrueModel:
    """Generating model: intercept 1, slope 2, categorical coefficients by kind."""
    schema, terms = scenario_schema(config.kind)
    slots = term_slots(schema, terms)
    if config.kind == "sparse":
        values = []
        level = 2.0
        for block in SPARSE_BLOCKS:
            values.extend([level] * block)
            level = 2.0 - level
        if len(values) != len(slots):
            raise ConfigError("sparse coefficient vector does not match the term slots")
    else:
        values = rng.uniform(0.0, 1.0, size=len(slots))
    coeffs: dict = {}
    for (term, cats), v in zip(slots, values):
        coeffs.setdefault(term, {})[cats] = float(v)
    return TrueModel(b0=1.0, b=np.array([2.0]), coeffs=coeffs, sigma=config.sigma)


def draw_design(config: ScenarioConfig, rng: np.random.Generator):
    """Covariate vector and category codes for one replicate, in a fixed draw order."""
    x = rng.standard_normal(config.n).reshape(-1, 1)
    probs = _category_probs(config.kind)
    c = np.column_stack([
        rng.choice(len(p), size=config.n, p=p) for p in probs
    ]).astype(np.int64)
    return x, c


def _rng(config: ScenarioConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=key))


def generate(config: ScenarioConfig, replicate: int) -> tuple[Dataset, TrueModel]:
    """Dataset and generating model for one replicate index."""
    schema, _ = scenario_schema(config.kind)
    rep_rng = _rng(config, 1, replicate)
    if config.fixed_design:
        fixed_rng = _rng(config, 0)
        model = draw_model(config, fixed_rng)
        x, c = draw_design(config, fixed_rng)
    else:
        if config.fixed_coefficients and config.kind != "sparse":
            model = draw_model(config, _rng(config, 0))
        else:
            model = draw_model(config, rep_rng)
        x, c = draw_design(config, rep_rng)
    dataset = Dataset(y=np.zeros(config.n), x=x, c=c, schema=schema)
    theta = true_theta(model, dataset)
    noise = rep_rng.standard_normal(config.n)
    return replace_y(dataset, theta + config.sigma * noise), model


def replace_y(dataset: Dataset, y: np.ndarray) -> Dataset:
    return Dataset(y=y, x=dataset.x, c=dataset.c, schema=dataset.schema,
                   x_names=dataset.x_names, y_name=dataset.y_name)


def gen_dense(config: ScenarioConfig, replicate: int):
    if config.kind == "sparse":
        raise ConfigError("gen_dense requires a dense scenario kind")
    return generate(config, replicate)


def gen_sparse(config: ScenarioConfig, replicate: int):
    if config.kind != "sparse":
        raise ConfigError("gen_sparse requires the sparse scenario kind")
    return generate(config, replicate)


def ase(theta_hat, theta_true) -> float:
    """Averaged squared error between estimated and true regression means."""
    a = np.asarray(theta_hat, dtype=float)
    b = np.asarray(theta_true, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# Comparison study

METHODS = ("pmmp", "lasso", "enet")


def _cv_seed(config: ScenarioConfig, replicate: int) -> int:
    return int(np.random.SeedSequence(config.seed, spawn_key=(2, replicate))
               .generate_state(1)[0])


def _compare_one(config: ScenarioConfig, replicate: int) -> tuple:
    dataset, model = generate(config, replicate)
    theta = true_theta(model, dataset)
    _, terms = scenario_schema(config.kind)

    fitted = fit(dataset, FitConfig(delta=config.delta))
    ase_pmmp = ase(predict_all(fitted), theta)
    k = fitted.partition.k

    design = expand(dataset, terms)
    alphas = config.alpha_grid if 1.0 in config.alpha_grid else (*config.alpha_grid, 1.0)
    alphas_t, grids, errors = cv_table(
        design.matrix, dataset.y, alphas=alphas, folds=config.cv_folds,
        seed=_cv_seed(config, replicate), n_lambda=config.n_lambda)
    lasso_row = alphas_t.index(1.0)
    l_idx = int(np.argmin(errors[lasso_row]))
    lasso = refit_at(design.matrix, dataset.y, 1.0, grids[lasso_row], l_idx)
    a_idx, l_idx, alpha, _ = _select(alphas_t, grids, errors)
    enet = refit_at(design.matrix, dataset.y, alpha, grids[a_idx], l_idx)

    ase_lasso = ase(lasso.predict(design.matrix), theta)
    ase_enet = ase(enet.predict(design.matrix), theta)
    return replicate, k, ase_pmmp, ase_lasso, ase_enet


def _compare_range(config: ScenarioConfig, indices: tuple[int, ...]) -> list:
    import warnings

    out = []
    for i in indices:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # small scenarios always trip the
                out.append(_compare_one(config, i))  # group-size diagnostics
        except Exception as e:  # recorded, not raised: one bad replicate != a dead study
            out.append((i, None, None, None, None, f"{type(e).__name__}: {e}"))
    return out


def _chunks(n_sim: int, threads: int) -> list[tuple[int, ...]]:
    per = max(1, math.ceil(n_sim / max(1, threads * 4)))
    idx = list(range(n_sim))
    return [tuple(idx[i:i + per]) for i in range(0, n_sim, per)]


def _run_chunked(worker, config: ScenarioConfig, threads: int) -> list:
    chunks = _chunks(config.n_sim, threads)
    if threads <= 1 or len(chunks) == 1:
        results = [worker(config, chunk) for chunk in chunks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(worker, config, chunk) for chunk in chunks]
            results = [f.result() for f in futures]  # chunk submission order
    flat = [item for chunk in results for item in chunk]
    flat.sort(key=lambda item: item[0])
    return flat


@dataclass(frozen=True)
class RunSummary:
    config: ScenarioConfig
    ases: dict[str, np.ndarray]            # method -> (n_sim,)
    k_values: np.ndarray                   # (n_sim,)
    failures: tuple[str, ...] = ()
    mse_true: np.ndarray | None = None     # (N,) Monte-Carlo truth (rb study)
    mse_hat_mean: np.ndarray | None = None
    relative_bias: np.ndarray | None = None

    def quartiles(self, method: str) -> tuple[float, float, float]:
        q1, med, q3 = np.percentile(self.ases[method], [25, 50, 75])
        return float(q1), float(med), float(q3)

    def summary_dict(self) -> dict:
        d: dict = {
            "config": self.config.to_dict(),
            "n_failures": len(self.failures),
            "failures": list(self.failures),
            "k": {
                "min": int(self.k_values.min()),
                "max": int(self.k_values.max()),
                "median": float(np.median(self.k_values)),
                "mode": int(np.bincount(self.k_values).argmax()),
            },
            "methods": {},
        }
        for method, values in self.ases.items():
            q1, med, q3 = self.quartiles(method)
            d["methods"][method] = {
                "median": med, "q1": q1, "q3": q3, "mean": float(values.mean()),
            }
        if self.relative_bias is not None:
            q1, med, q3 = np.percentile(self.relative_bias, [25, 50, 75])
            d["relative_bias"] = {
                "median": float(med), "q1": float(q1), "q3": float(q3),
                "iqr_width": float(q3 - q1),
            }
        return d

    def write_summary(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.summary_dict(), f, indent=2)
            f.write("\n")

    def write_ases_csv(self, path: str | Path) -> None:
        methods = list(self.ases)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["replicate", "k", *[f"ase_{m}" for m in methods]])
            for i in range(len(self.k_values)):
                writer.writerow([i, int(self.k_values[i]),
                                 *["%.17g" % self.ases[m][i] for m in methods]])

    def write_rb_csv(self, path: str | Path) -> None:
        if self.relative_bias is None:
            raise ConfigError("no relative-bias table in this summary")
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["row", "mse_true", "mse_hat_mean", "relative_bias"])
            for i in range(len(self.relative_bias)):
                writer.writerow([i, "%.17g" % self.mse_true[i],
                                 "%.17g" % self.mse_hat_mean[i],
                                 "%.17g" % self.relative_bias[i]])

    def write_boxplot_stats(self, path: str | Path) -> None:
        out = {m: boxplot_stats(v) for m, v in self.ases.items()}
        if self.relative_bias is not None:
            out["relative_bias"] = boxplot_stats(self.relative_bias)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(out, f, indent=2)
            f.write("\n")


def boxplot_stats(values: np.ndarray) -> dict:
    values = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = values[(values < lo) | (values > hi)]
    return {
        "min": float(values.min()), "q1": float(q1), "median": float(med),
        "q3": float(q3), "max": float(values.max()),
        "outliers": [float(v) for v in np.sort(outliers)],
    }


def run_comparison(config: ScenarioConfig, threads: int = 1) -> RunSummary:
    """Replicated comparison of the mixed-model predictor against the baselines."""
    rows = _run_chunked(_compare_range, config, threads)
    n_sim = config.n_sim
    ases = {m: np.full(n_sim, np.nan) for m in METHODS}
    k_values = np.zeros(n_sim, dtype=np.int64)
    failures = []
    for row in rows:
        if len(row) == 6:
            failures.append(f"replicate {row[0]}: {row[5]}")
            continue
        i, k, a_p, a_l, a_e = row
        k_values[i] = k
        ases["pmmp"][i], ases["lasso"][i], ases["enet"][i] = a_p, a_l, a_e
    if failures:
        keep = ~np.isnan(ases["pmmp"])
        ases = {m: v[keep] for m, v in ases.items()}
        k_values = k_values[keep]
    return RunSummary(config=config, ases=ases, k_values=k_values,
                      failures=tuple(failures))


# ---------------------------------------------------------------------------
# Relative-bias study of the MSE estimator


def _canonical_order(dataset: Dataset) -> np.ndarray:
    """Row order used to align rows across redrawn designs: categories, then x."""
    keys = [dataset.x[:, j] for j in range(dataset.p - 1, -1, -1)]
    keys += [dataset.c[:, j] for j in range(dataset.schema.n_variables - 1, -1, -1)]
    return np.lexsort(keys)


def _rb_range(config: ScenarioConfig, indices: tuple[int, ...]) -> list:
    import warnings as _warnings

    out = []
    for s in indices:
        try:
            with _warnings.catch_warnings():
                _warnings.simplefilter("ignore")
                dataset, model = generate(config, s)
                theta = true_theta(model, dataset)
                fitted = fit(dataset, FitConfig(delta=config.delta))
                means = predict_all(fitted)
                batch = mse_batch(fitted, weights_for(fitted))
            sq = (means - theta) ** 2
            hat = batch.value
            if not config.fixed_design:
                order = _canonical_order(dataset)
                sq, hat = sq[order], hat[order]
            out.append((s, fitted.partition.k, sq, hat))
        except Exception as e:
            out.append((s, None, None, None, f"{type(e).__name__}: {e}"))
    return out


def run_rb_study(config: ScenarioConfig, threads: int = 1) -> RunSummary:
    """Monte-Carlo relative bias of the analytic MSE estimator, row by row."""
    if config.kind == "sparse":
        raise ConfigError("the relative-bias study uses the dense scenarios")
    rows = _run_chunked(_rb_range, config, threads)
    sq_sum = np.zeros(config.n)
    hat_sum = np.zeros(config.n)
    k_values = np.zeros(config.n_sim, dtype=np.int64)
    failures = []
    used = 0
    for row in rows:
        if len(row) == 5:
            failures.append(f"replicate {row[0]}: {row[4]}")
            continue
        s, k, sq, hat = row
        k_values[s] = k
        sq_sum += sq
        hat_sum += hat
        used += 1
    if used == 0:
        raise ConfigError("every replicate failed; see failures")
    mse_true = sq_sum / used
    mse_hat_mean = hat_sum / used
    rb = mse_hat_mean / mse_true - 1.0
    if failures:
        k_values = k_values[k_values > 0]
    return RunSummary(config=config, ases={}, k_values=k_values,
                      failures=tuple(failures), mse_true=mse_true,
                      mse_hat_mean=mse_hat_mean, relative_bias=rb)


def run_study(config: ScenarioConfig, threads: int = 1) -> RunSummary:
    if config.study == "rb":
        return run_rb_study(config, threads)
    return run_comparison(config, threads)
