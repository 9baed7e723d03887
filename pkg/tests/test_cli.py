import csv
import json
import warnings
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from pmmp.cli import main, verify_manifest
from pmmp.data import CategoricalSchema, CategoricalVariable, Dataset, export_csv
from pmmp.estimator import FittedPmmp, fit
from pmmp.mse import mse_batch, weights_for
from pmmp.predict import predict_all
from pmmp.simulate import ScenarioConfig, generate


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workdir(tmp_path):
    """A data CSV plus schema JSON for a small grouped dataset."""
    config = ScenarioConfig(kind="dense-c", n=60, seed=31)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds, _ = generate(config, 0)
    data = tmp_path / "data.csv"
    schema = tmp_path / "schema.json"
    export_csv(ds, data, schema)
    return tmp_path, data, schema, ds


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


class TestFitCommand:
    def test_fit_writes_model_and_groups(self, runner, workdir):
        tmp, data, schema, ds = workdir
        out = tmp / "model.json"
        run_ok(runner, ["fit", str(data), "--schema", str(schema), "--out", str(out)])
        assert out.exists()
        assert (tmp / "groups.csv").exists()
        assert (tmp / "model.manifest.json").exists()
        loaded = FittedPmmp.from_json(out)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            direct = fit(ds)
        assert loaded.intercept == direct.intercept
        assert loaded.variance_ratio == direct.variance_ratio

    def test_refit_from_export_byte_identical(self, runner, workdir):
        tmp, data, schema, ds = workdir
        m1 = tmp / "m1.json"
        run_ok(runner, ["fit", str(data), "--schema", str(schema), "--out", str(m1)])
        # export the ingested dataset and fit again from the copy
        again_csv, again_schema = tmp / "copy.csv", tmp / "copy.json"
        export_csv(ds, again_csv, again_schema)
        m2 = tmp / "m2.json"
        run_ok(runner, ["fit", str(again_csv), "--schema", str(again_schema),
                        "--out", str(m2)])
        assert m1.read_bytes() == m2.read_bytes()

    def test_missing_column_exit_2(self, runner, workdir, tmp_path):
        tmp, data, schema, ds = workdir
        broken = tmp_path / "broken.csv"
        rows = data.read_text().splitlines()
        header = rows[0].split(",")
        keep = [i for i, name in enumerate(header) if name != "c2"]
        broken.write_text("\n".join(
            ",".join(line.split(",")[i] for i in keep) for line in rows
        ))
        result = runner.invoke(main, ["fit", str(broken), "--schema", str(schema)])
        assert result.exit_code == 2
        assert "c2" in result.output or "c2" in (result.stderr or "")

    def test_bad_transform_exit_2(self, runner, workdir):
        tmp, data, schema, ds = workdir
        # responses in this dataset take both signs, so the log is invalid
        result = runner.invoke(main, ["fit", str(data), "--schema", str(schema),
                                      "--log-response"])
        assert result.exit_code == 2

    def test_rank_deficient_exit_3(self, runner, tmp_path):
        rng = np.random.default_rng(0)
        n = 24
        x = rng.standard_normal(n)
        schema = CategoricalSchema((CategoricalVariable("g", ("1", "2", "3")),))
        ds = Dataset(y=rng.standard_normal(n), x=np.column_stack([x, x]),
                     c=rng.integers(0, 3, (n, 1)), schema=schema,
                     x_names=("a", "a_copy"))
        data, spec = tmp_path / "d.csv", tmp_path / "s.json"
        export_csv(ds, data, spec)
        result = runner.invoke(main, ["fit", str(data), "--schema", str(spec)])
        assert result.exit_code == 3


class TestPredictCommand:
    def test_in_sample_predictions_match_batch(self, runner, workdir):
        tmp, data, schema, ds = workdir
        model = tmp / "model.json"
        run_ok(runner, ["fit", str(data), "--schema", str(schema), "--out", str(model)])
        preds = tmp / "predictions.csv"
        run_ok(runner, ["predict", str(model), str(data), "--out", str(preds)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            expected = predict_all(fit(ds))
        with open(preds) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == ds.n
        got = np.array([float(r["mean"]) for r in rows])
        assert np.allclose(got, expected, atol=0, rtol=0)
        assert all(r["unseen"] == "0" for r in rows)

    def test_unseen_keys_flagged(self, runner, workdir):
        tmp, data, schema, ds = workdir
        model = tmp / "model.json"
        run_ok(runner, ["fit", str(data), "--schema", str(schema), "--out", str(model)])
        # craft one row with a category tuple absent from the fitted groups
        seen = {tuple(map(int, row)) for row in ds.c}
        unseen = next(
            (a, b) for a in range(4) for b in range(5) if (a, b) not in seen
        )
        newdata = tmp / "new.csv"
        new = Dataset(y=np.array([0.0]), x=np.zeros((1, 1)),
                      c=np.array([unseen]), schema=ds.schema, x_names=ds.x_names)
        export_csv(new, newdata)
        out = tmp / "p.csv"
        run_ok(runner, ["predict", str(model), str(newdata), "--out", str(out)])
        with open(out) as f:
            row = next(csv.DictReader(f))
        assert row["unseen"] == "1"
        assert float(row["effect"]) == 0.0

    def test_schema_mismatch_exit_2(self, runner, workdir, tmp_path):
        tmp, data, schema, ds = workdir
        model = tmp / "model.json"
        run_ok(runner, ["fit", str(data), "--schema", str(schema), "--out", str(model)])
        other = tmp_path / "other.csv"
        other.write_text("y,z\n1,2\n")
        result = runner.invoke(main, ["predict", str(model), str(other)])
        assert result.exit_code == 2

    def test_margin_is_twice_root_mse(self, runner, workdir):
        tmp, data, schema, ds = workdir
        model = tmp / "model.json"
        run_ok(runner, ["fit", str(data), "--schema", str(schema), "--out", str(model)])
        out = tmp / "p.csv"
        run_ok(runner, ["predict", str(model), str(data), "--out", str(out), "--mse"])
        with open(out) as f:
            rows = list(csv.DictReader(f))
        for r in rows[:10]:
            mse = float(r["mse"])
            assert abs(float(r["margin"]) - 2.0 * np.sqrt(mse)) < 1e-12
            assert abs(float(r["bias_component"]) + float(r["variance_component"]) - mse) < 1e-12
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fitted = fit(ds)
            batch = mse_batch(fitted, weights_for(fitted))
        got = np.array([float(r["mse"]) for r in rows])
        assert np.allclose(got, batch.value, rtol=1e-12)


class TestSimulateCommand:
    def test_comparison_run_and_reproducibility(self, runner, tmp_path):
        scenario = tmp_path / "scenario.json"
        scenario.write_text(json.dumps({
            "kind": "dense", "n": 30, "n_sim": 3, "seed": 99,
            "n_lambda": 20, "alpha_grid": [0.0, 1.0],
        }))
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        run_ok(runner, ["simulate", str(scenario), "--out-dir", str(out1),
                        "--threads", "1"])
        run_ok(runner, ["simulate", str(scenario), "--out-dir", str(out2),
                        "--threads", "2"])
        assert (out1 / "ases.csv").read_bytes() == (out2 / "ases.csv").read_bytes()
        summary = json.loads((out1 / "summary.json").read_text())
        assert set(summary["methods"]) == {"pmmp", "lasso", "enet"}
        assert summary["n_failures"] == 0

    def test_rb_run(self, runner, tmp_path):
        scenario = tmp_path / "scenario.toml"
        scenario.write_text(
            'kind = "dense"\nn = 30\nn_sim = 5\nseed = 7\nstudy = "rb"\n'
            "fixed_design = true\n"
        )
        out = tmp_path / "rb"
        run_ok(runner, ["simulate", str(scenario), "--out-dir", str(out),
                        "--threads", "1"])
        assert (out / "rb.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert "relative_bias" in summary

    def test_invalid_scenario_exit_2(self, runner, tmp_path):
        scenario = tmp_path / "scenario.json"
        scenario.write_text('{"kind": "wat"}')
        result = runner.invoke(main, ["simulate", str(scenario)])
        assert result.exit_code == 2

    def test_shipped_presets_parse(self):
        for preset in Path("configs").glob("*.toml"):
            config = ScenarioConfig.from_file(preset)
            assert config.n_sim >= 200


class TestBaselineCommand:
    def test_baseline_writes_fit(self, runner, workdir):
        tmp, data, schema, ds = workdir
        out = tmp / "enet.json"
        run_ok(runner, ["baseline", str(data), "--schema", str(schema),
                        "--out", str(out), "--alpha-grid", "0.5,1",
                        "--seed", "5"])
        payload = json.loads(out.read_text())
        assert payload["n_predictors"] == 1 + 3 + 4 + 12
        assert payload["nonzero"] == len(payload["coefficients"])

    def test_deterministic_under_seed(self, runner, workdir):
        tmp, data, schema, ds = workdir
        o1, o2 = tmp / "e1.json", tmp / "e2.json"
        args = ["baseline", str(data), "--schema", str(schema),
                "--alpha-grid", "1", "--seed", "11"]
        run_ok(runner, args + ["--out", str(o1)])
        run_ok(runner, args + ["--out", str(o2)])
        assert o1.read_bytes() == o2.read_bytes()


class TestManifest:
    def test_hash_verification_detects_change(self, runner, workdir):
        tmp, data, schema, ds = workdir
        out = tmp / "model.json"
        run_ok(runner, ["fit", str(data), "--schema", str(schema), "--out", str(out)])
        manifest = tmp / "model.manifest.json"
        assert verify_manifest(manifest)
        data.write_text(data.read_text().replace("1", "2", 1))
        assert not verify_manifest(manifest)
