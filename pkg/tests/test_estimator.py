import math
import warnings

import numpy as np
import pytest

from pmmp.data import CategoricalSchema, CategoricalVariable, Dataset
from pmmp.errors import AssumptionWarning, RankDeficiencyError
from pmmp.estimator import (
    FitConfig,
    FittedPmmp,
    fit,
    gls_solve,
    objective,
    ratio_score,
    solve_ratio,
)
from pmmp.grouping import build_partition, compute_stats

from _oracles import balanced_dataset, gls_dense, grouped_dataset, stats_of


def quiet_fit(dataset, config=FitConfig()):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AssumptionWarning)
        return fit(dataset, config)


class TestGlsSolve:
    def test_ratio_zero_is_ols(self):
        rng = np.random.default_rng(0)
        ds = grouped_dataset(rng, n_max=50, p_max=3, k_max=6)
        stats = stats_of(ds)
        sol = gls_solve(stats, 0.0)
        design = np.column_stack([np.ones(ds.n), ds.x])
        beta, *_ = np.linalg.lstsq(design, ds.y, rcond=None)
        assert abs(sol.intercept - beta[0]) < 1e-10
        assert np.allclose(sol.slopes, beta[1:], atol=1e-10)
        sse = float(np.sum((ds.y - design @ beta) ** 2))
        assert abs(sol.noise_variance - sse / ds.n) < 1e-10

    def test_two_singletons_hand_case(self):
        # two singleton groups, y = (0, 2), ratio 1: each weight is 1/2,
        # intercept 1, residual quadratic form 1, noise variance 1/2
        var = CategoricalVariable("g", ("a", "b"))
        ds = Dataset(y=np.array([0.0, 2.0]), x=np.zeros((2, 0)),
                     c=np.array([[0], [1]]), schema=CategoricalSchema((var,)))
        sol = gls_solve(stats_of(ds), 1.0)
        assert abs(sol.intercept - 1.0) < 1e-14
        assert abs(sol.noise_variance - 0.5) < 1e-14

    @pytest.mark.parametrize("h", [0.0, 0.1, 1.0, 10.0])
    def test_matches_dense_oracle(self, h):
        rng = np.random.default_rng(42)
        for _ in range(10):
            ds = grouped_dataset(rng, n_max=60, p_max=3, k_max=10)
            part = build_partition(ds)
            stats = compute_stats(ds, part)
            sol = gls_solve(stats, h)
            order = np.argsort(part.group_of, kind="stable")
            b0, b, r = gls_dense(ds.y[order], ds.x[order], part.sizes, h)
            assert abs(sol.intercept - b0) < 1e-10
            assert np.allclose(sol.slopes, b, atol=1e-10)
            assert abs(sol.noise_variance - r) < 1e-10

    def test_rank_deficiency_names_column(self):
        rng = np.random.default_rng(3)
        n = 30
        x = rng.standard_normal((n, 1))
        ds = Dataset(
            y=rng.standard_normal(n),
            x=np.column_stack([x, x]),  # exact copy: the second column is redundant
            c=rng.integers(0, 3, (n, 1)),
            schema=CategoricalSchema((CategoricalVariable("g", ("1", "2", "3")),)),
            x_names=("age", "age_copy"),
        )
        stats = stats_of(ds)
        with pytest.raises(RankDeficiencyError, match="age"):
            gls_solve(stats, 0.5, names=ds.x_names)


class TestRatioScore:
    def test_zero_residuals_positive_everywhere(self):
        var = CategoricalVariable("g", ("a", "b"))
        ds = Dataset(y=np.array([3.0, 3.0, 3.0]), x=np.zeros((3, 0)),
                     c=np.array([[0], [0], [1]]), schema=CategoricalSchema((var,)))
        stats = stats_of(ds)
        for h in (0.0, 0.5, 2.0, 100.0):
            assert ratio_score(stats, 3.0, np.zeros(0), 1.0, h) > 0.0

    def test_balanced_closed_form(self):
        # two groups of two, residuals -1 and +1, noise variance 1/2:
        # root = sum r^2 / (R K) - 1/n = 2/(0.5*2) - 0.5 = 1.5
        var = CategoricalVariable("g", ("a", "b"))
        ds = Dataset(y=np.array([-1.0, -1.0, 1.0, 1.0]), x=np.zeros((4, 0)),
                     c=np.array([[0], [0], [1], [1]]), schema=CategoricalSchema((var,)))
        stats = stats_of(ds)
        assert abs(ratio_score(stats, 0.0, np.zeros(0), 0.5, 1.5)) < 1e-12
        root, diag = solve_ratio(stats, 0.0, np.zeros(0), 0.5, floor=1e-3)
        assert abs(root - 1.5) < 1e-9
        assert not diag.clamped

    def test_large_ratio_limit_positive(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            ds = grouped_dataset(rng, n_max=40)
            stats = stats_of(ds)
            sol = gls_solve(stats, 0.1)
            val = ratio_score(stats, sol.intercept, sol.slopes, sol.noise_variance, 1e8)
            assert val > 0.0


class TestSolveRatio:
    def test_all_zero_residuals_clamps(self):
        var = CategoricalVariable("g", ("a", "b"))
        ds = Dataset(y=np.full(4, 2.0), x=np.zeros((4, 0)),
                     c=np.array([[0], [0], [1], [1]]), schema=CategoricalSchema((var,)))
        stats = stats_of(ds)
        root, diag = solve_ratio(stats, 2.0, np.zeros(0), 1.0, floor=0.07)
        assert root == 0.07
        assert diag.clamped

    def test_root_residual_small(self):
        rng = np.random.default_rng(12)
        found = 0
        for _ in range(25):
            ds = grouped_dataset(rng, n_max=50, k_max=8)
            stats = stats_of(ds)
            sol = gls_solve(stats, 0.05)
            root, diag = solve_ratio(stats, sol.intercept, sol.slopes,
                                     sol.noise_variance, floor=1e-4)
            if diag.clamped:
                continue
            found += 1
            val = ratio_score(stats, sol.intercept, sol.slopes, sol.noise_variance, root)
            assert abs(val) <= 1e-9 * stats.size.sum()
        assert found >= 10

    def test_balanced_closed_form_random_instances(self):
        rng = np.random.default_rng(77)
        for _ in range(25):
            k = int(rng.integers(2, 9))
            size = int(rng.integers(1, 6))
            ds = balanced_dataset(rng, k, size)
            stats = stats_of(ds)
            b0 = float(rng.normal())
            r = float(rng.uniform(0.2, 2.0))
            resid = stats.mean_y - b0
            expected = float(np.sum(resid ** 2) / (r * k) - 1.0 / size)
            root, diag = solve_ratio(stats, b0, np.zeros(0), r, floor=1e-6)
            if expected <= 0:
                assert diag.clamped or root < 1e-6 * 10
            else:
                assert abs(root - expected) < 1e-8


class TestObjective:
    def test_log_determinant_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            ds = grouped_dataset(rng, n_max=50)
            part = build_partition(ds)
            h = float(rng.uniform(0.0, 3.0))
            blocked = float(np.sum(np.log1p(h * part.sizes)))
            z = np.repeat(np.eye(part.k), part.sizes, axis=0)
            _, dense = np.linalg.slogdet(np.eye(ds.n) + h * z @ z.T)
            assert abs(blocked - dense) <= 1e-9

    def test_solution_minimizes_objective(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            ds = grouped_dataset(rng, n_max=30, p_max=2, k_max=5)
            stats = stats_of(ds)
            h = float(rng.uniform(0.05, 2.0))
            sol = gls_solve(stats, h)
            base = objective(stats, sol.intercept, sol.slopes, sol.noise_variance, h)
            for _ in range(20):
                db0 = float(rng.normal() * 1e-3)
                db = rng.normal(size=stats.p) * 1e-3
                dr = float(rng.normal() * 1e-3)
                perturbed = objective(stats, sol.intercept + db0, sol.slopes + db,
                                      sol.noise_variance * (1 + dr), h)
                assert perturbed >= base - 1e-9


class TestFit:
    def test_pure_fixed_model_clamps_to_floor(self):
        # no categorical signal at all: groups differ only by noise
        rng = np.random.default_rng(21)
        ds = balanced_dataset(rng, k=8, size=50, p=1)
        flat = Dataset(y=rng.standard_normal(ds.n) + 0.5 + 2.0 * ds.x[:, 0],
                       x=ds.x, c=ds.c, schema=ds.schema)
        fitted = quiet_fit(flat)
        assert fitted.variance_ratio == fitted.ratio_floor
        assert abs(fitted.intercept - 0.5) < 0.1
        assert abs(fitted.slopes[0] - 2.0) < 0.1
        assert abs(fitted.noise_variance - 1.0) < 0.15

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        ds = grouped_dataset(rng, n_max=40)
        f1, f2 = quiet_fit(ds), quiet_fit(ds)
        assert f1.intercept == f2.intercept
        assert np.array_equal(f1.slopes, f2.slopes)
        assert f1.noise_variance == f2.noise_variance
        assert f1.variance_ratio == f2.variance_ratio

    def test_floor_uses_min_group_size(self):
        rng = np.random.default_rng(6)
        ds = balanced_dataset(rng, k=5, size=4)
        fitted = quiet_fit(ds, FitConfig(delta=0.2))
        assert abs(fitted.ratio_floor - 0.2 / math.sqrt(4)) < 1e-15

    def test_profile_root_is_joint_stationary_point(self):
        rng = np.random.default_rng(30)
        for _ in range(8):
            ds = grouped_dataset(rng, n_max=60, p_max=2, k_max=8)
            fitted = quiet_fit(ds)
            if fitted.diagnostics.clamped_final or fitted.diagnostics.floored:
                continue
            val = ratio_score(fitted.stats, fitted.intercept, fitted.slopes,
                              fitted.noise_variance, fitted.variance_ratio)
            assert abs(val) <= 1e-7 * fitted.stats.size.sum()

    def test_two_pass_mode_matches_manual_steps(self):
        rng = np.random.default_rng(14)
        ds = grouped_dataset(rng, n_max=50, p_max=1, k_max=6)
        stats = stats_of(ds)
        floor = 0.1 / math.sqrt(build_partition(ds).n_star)
        first = gls_solve(stats, floor)
        h1, _ = solve_ratio(stats, first.intercept, first.slopes,
                            first.noise_variance, floor)
        second = gls_solve(stats, max(h1, floor))
        h2, _ = solve_ratio(stats, second.intercept, second.slopes,
                            second.noise_variance, floor)
        fitted = quiet_fit(ds, FitConfig(converge=False))
        assert fitted.intercept == second.intercept
        assert fitted.variance_ratio == max(h2, floor)

    def test_assumption_warnings_on_singletons(self):
        rng = np.random.default_rng(2)
        ds = grouped_dataset(rng, n_max=30, k_max=10)
        if build_partition(ds).n_star >= 2:
            pytest.skip("draw produced no singleton group")
        with pytest.warns(AssumptionWarning):
            fit(ds)

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(18)
        ds = grouped_dataset(rng, n_max=40, p_max=2)
        fitted = quiet_fit(ds)
        path = tmp_path / "model.json"
        fitted.to_json(path)
        loaded = FittedPmmp.from_json(path)
        assert loaded.intercept == fitted.intercept
        assert np.array_equal(loaded.slopes, fitted.slopes)
        assert loaded.noise_variance == fitted.noise_variance
        assert loaded.variance_ratio == fitted.variance_ratio
        assert loaded.partition.keys == fitted.partition.keys
        assert np.array_equal(loaded.stats.mean_y, fitted.stats.mean_y)
        path2 = tmp_path / "model2.json"
        loaded.to_json(path2)
        assert path.read_bytes() == path2.read_bytes()


class TestLimitConcentration:
    """Desk-scale checks of the limiting values of the estimators."""

    def _balanced_run(self, n_groups=40, size=25, reps=60, seed=100):
        rng = np.random.default_rng(seed)
        alphas = rng.uniform(0.0, 3.0, size=n_groups)  # fixed across replicates
        results = []
        for _ in range(reps):
            group_of = np.repeat(np.arange(n_groups), size)
            x = rng.standard_normal((n_groups * size, 1))
            y = 1.0 + 2.0 * x[:, 0] + alphas[group_of] + rng.standard_normal(len(group_of))
            var = CategoricalVariable("g", tuple(str(i) for i in range(n_groups)))
            ds = Dataset(y=y, x=x, c=group_of.reshape(-1, 1),
                         schema=CategoricalSchema((var,)))
            results.append(quiet_fit(ds))
        return alphas, results

    def test_intercept_targets_b0_plus_mean_effect(self):
        alphas, fits = self._balanced_run()
        target = 1.0 + alphas.mean()
        estimates = np.array([f.intercept for f in fits])
        se = estimates.std(ddof=1) / math.sqrt(len(fits))
        assert abs(estimates.mean() - target) <= 3 * se + 0.02

    def test_ratio_targets_effect_variance_over_noise(self):
        alphas, fits = self._balanced_run()
        g_k = float(np.mean((alphas - alphas.mean()) ** 2))
        ratios = np.array([f.variance_ratio for f in fits])
        se = ratios.std(ddof=1) / math.sqrt(len(fits))
        assert abs(ratios.mean() - g_k) <= 3 * se + 0.05 * g_k

    def test_slope_and_noise_consistent(self):
        _, fits = self._balanced_run()
        slopes = np.array([f.slopes[0] for f in fits])
        noises = np.array([f.noise_variance for f in fits])
        assert abs(slopes.mean() - 2.0) < 0.02
        assert abs(noises.mean() - 1.0) < 0.03

    def test_dense_scenario_within_ten_percent(self):
        # at n=2000 nearly every replicate estimates the slope and the noise
        # variance within 10 percent
        from pmmp.simulate import ScenarioConfig, generate

        config = ScenarioConfig(kind="dense", n=2000, sigma=1.0, seed=4040)
        hits = 0
        reps = 200
        for rep in range(reps):
            ds, _ = generate(config, rep)
            fitted = quiet_fit(ds)
            if (abs(fitted.slopes[0] - 2.0) < 0.2
                    and abs(fitted.noise_variance - 1.0) < 0.1):
                hits += 1
        assert hits >= 0.95 * reps
