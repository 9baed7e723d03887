"""Command-line front end: fit, predict, simulate, baseline.

Exit codes: 0 success, 2 input/validation problem, 3 numerical failure,
4 internal invariant violation.  Every run writes a manifest next to its
outputs recording the config snapshot, input hashes and the seed.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

from typing import NoReturn

import click
import numpy as np

from . import __version__
from .data import IngestSpec, apply_transform, format_float, ingest_csv, transform
from .design import expand
from .enet import cv_select
from .errors import (
    GroupKeyError,
    InternalError,
    PmmpError,
    RankDeficiencyError,
    SchemaError,
)
from .estimator import FitConfig, FittedPmmp, fit
from .grouping import export_group_report
from .mse import mse_for, weights_for
from .predict import predict_mean
from .simulate import ScenarioConfig, run_study


def _fail(exc: Exception) -> NoReturn:
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, RankDeficiencyError):
        sys.exit(3)
    if isinstance(exc, InternalError):
        sys.exit(4)
    sys.exit(2)


def _sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir: Path, name: str, subcommand: str, config: dict,
                   inputs: list[Path], seed: int | None, outputs: list[Path],
                   started: float) -> Path:
    manifest = {
        "artifact_version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "seed": seed,
        "outputs": [str(p) for p in outputs],
        "duration_s": time.time() - started,
    }
    path = out_dir / name
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    os.replace(tmp, path)
    return path


def verify_manifest(path: str | Path) -> bool:
    """True when every input file still hashes to its recorded digest."""
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    return all(_sha256(p) == digest for p, digest in manifest["inputs"].items())


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Mixed-model prediction for regression with many categorical predictors."""


@main.command("fit")
@click.argument("data_csv", type=click.Path(exists=True, path_type=Path))
@click.option("--schema", "schema_json", required=True,
              type=click.Path(exists=True, path_type=Path), help="Column spec JSON.")
@click.option("--out", default="model.json", type=click.Path(path_type=Path),
              show_default=True)
@click.option("--groups-out", default=None, type=click.Path(path_type=Path),
              help="Group report CSV (default: alongside --out).")
@click.option("--delta", default=0.1, show_default=True,
              help="Regularizer scale for the variance-ratio floor.")
@click.option("--standardize", is_flag=True, help="Standardize continuous columns.")
@click.option("--log-response", is_flag=True, help="Log-transform the response.")
@click.option("--drop-incomplete", is_flag=True, help="Drop rows with blank fields.")
@click.option("--seed", default=12345, show_default=True)
def cmd_fit(data_csv, schema_json, out, groups_out, delta, standardize,
            log_response, drop_incomplete, seed):
    """Fit the working mixed model to a CSV dataset."""
    import dataclasses

    started = time.time()
    try:
        spec = IngestSpec.from_json(schema_json)
        dataset = ingest_csv(data_csv, spec, drop_incomplete=drop_incomplete)
        dataset, transforms = transform(dataset, standardize=standardize,
                                        log_response=log_response)
        fitted = fit(dataset, FitConfig(delta=delta))
        fitted = dataclasses.replace(fitted, transforms=transforms)
    except PmmpError as e:
        _fail(e)
    except ValueError as e:
        _fail(SchemaError(str(e)))
    fitted.to_json(out)
    groups_out = groups_out or out.parent / "groups.csv"
    export_group_report(dataset, fitted.partition, fitted.stats, groups_out)
    write_manifest(out.parent, out.stem + ".manifest.json", "fit",
                   {"delta": delta, "standardize": standardize,
                    "log_response": log_response, "drop_incomplete": drop_incomplete},
                   [data_csv, schema_json], seed, [out, groups_out], started)
    click.echo(f"fitted {dataset.n} rows in {fitted.partition.k} groups -> {out}")


@main.command("predict")
@click.argument("model_json", type=click.Path(exists=True, path_type=Path))
@click.argument("newdata_csv", type=click.Path(exists=True, path_type=Path))
@click.option("--out", default="predictions.csv", type=click.Path(path_type=Path),
              show_default=True)
@click.option("--mse", "with_mse", is_flag=True,
              help="Add MSE estimates and margins of error.")
@click.option("--seed", default=12345, show_default=True)
def cmd_predict(model_json, newdata_csv, out, with_mse, seed):
    """Predict regression means for new rows; unseen category tuples are flagged."""
    import csv as _csv

    started = time.time()
    try:
        fitted = FittedPmmp.from_json(model_json)
        spec = IngestSpec(fitted.y_name, fitted.x_names, fitted.schema)
        newdata = ingest_csv(newdata_csv, spec)
        newdata = apply_transform(newdata, fitted.transforms or {})
        weights = weights_for(fitted) if with_mse else None
    except PmmpError as e:
        _fail(e)
    except ValueError as e:
        _fail(SchemaError(str(e)))

    header = ["row", *[v.name for v in fitted.schema.variables],
              "mean", "effect", "shrinkage", "unseen"]
    if with_mse:
        header += ["mse", "bias_component", "variance_component", "margin"]
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(header)
        for i in range(newdata.n):
            key = tuple(int(v) for v in newdata.c[i])
            try:
                result = predict_mean(fitted, newdata.x[i], key)
            except GroupKeyError as e:
                _fail(e)
            row = [i, *fitted.schema.labels_for_key(key),
                   format_float(result.mean), format_float(result.effect),
                   format_float(result.shrinkage), int(result.unseen)]
            if with_mse:
                if result.unseen:
                    row += ["", "", "", ""]
                else:
                    est = mse_for(fitted, weights, newdata.x[i], result.group)
                    row += [format_float(est.value), format_float(est.bias_part),
                            format_float(est.variance_part), format_float(est.margin)]
            writer.writerow(row)
    write_manifest(out.parent, out.stem + ".manifest.json", "predict",
                   {"mse": with_mse}, [model_json, newdata_csv], seed, [out], started)
    click.echo(f"wrote {newdata.n} predictions -> {out}")


@main.command("simulate")
@click.argument("scenario", type=click.Path(exists=True, path_type=Path))
@click.option("--out-dir", default=".", type=click.Path(path_type=Path), show_default=True)
@click.option("--seed", default=None, type=int, help="Override the config seed.")
@click.option("--threads", default=os.cpu_count(), show_default="all cores", type=int)
@click.option("--boxplot-stats", "boxplot_path", default=None,
              type=click.Path(path_type=Path), help="Also write boxplot statistics JSON.")
def cmd_simulate(scenario, out_dir, seed, threads, boxplot_path):
    """Run a comparison or relative-bias study from a scenario config (TOML/JSON)."""
    started = time.time()
    try:
        config = ScenarioConfig.from_file(scenario)
        if seed is not None:
            config = ScenarioConfig.from_dict({**config.to_dict(), "seed": seed})
        summary = run_study(config, threads=threads)
    except PmmpError as e:
        _fail(e)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "summary.json"
    summary.write_summary(summary_path)
    outputs = [summary_path]
    if config.study == "rb":
        table_path = out_dir / "rb.csv"
        summary.write_rb_csv(table_path)
    else:
        table_path = out_dir / "ases.csv"
        summary.write_ases_csv(table_path)
    outputs.append(table_path)
    if boxplot_path is not None:
        summary.write_boxplot_stats(boxplot_path)
        outputs.append(boxplot_path)
    write_manifest(out_dir, "summary.manifest.json", "simulate", config.to_dict(),
                   [scenario], config.seed, outputs, started)
    if summary.failures:
        click.echo(f"warning: {len(summary.failures)} replicate(s) failed", err=True)
    click.echo(f"study {config.study} ({config.kind}, n={config.n}) -> {summary_path}")


@main.command("baseline")
@click.argument("data_csv", type=click.Path(exists=True, path_type=Path))
@click.option("--schema", "schema_json", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--out", default="enet_fit.json", type=click.Path(path_type=Path),
              show_default=True)
@click.option("--coef-out", default=None, type=click.Path(path_type=Path),
              help="Also write the full coefficient vector as CSV.")
@click.option("--terms", default="schema", show_default=True,
              type=click.Choice(["main", "schema"]),
              help="'main' expands main effects only; 'schema' adds declared interactions.")
@click.option("--alpha-grid", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1",
              show_default=True, help="Comma-separated mixing grid for CV.")
@click.option("--folds", default=10, show_default=True)
@click.option("--standardize", is_flag=True)
@click.option("--log-response", is_flag=True)
@click.option("--drop-incomplete", is_flag=True)
@click.option("--seed", default=12345, show_default=True)
def cmd_baseline(data_csv, schema_json, out, coef_out, terms, alpha_grid, folds,
                 standardize, log_response, drop_incomplete, seed):
    """Cross-validated elastic net on the expanded indicator design."""
    started = time.time()
    try:
        spec = IngestSpec.from_json(schema_json)
        dataset = ingest_csv(data_csv, spec, standardize=standardize,
                             log_response=log_response, drop_incomplete=drop_incomplete)
        term_list = [(j,) for j in range(dataset.schema.n_variables)]
        if terms == "schema":
            term_list += list(dataset.schema.interactions)
        design = expand(dataset, term_list)
        grid = tuple(float(a) for a in alpha_grid.split(","))
        best = cv_select(design.matrix, dataset.y, folds=folds, alphas=grid, seed=seed)
    except PmmpError as e:
        _fail(e)
    except ValueError as e:
        _fail(SchemaError(str(e)))
    nonzero = int(np.sum(best.coef != 0.0))
    payload = {
        "alpha": best.alpha,
        "lambda": best.lam,
        "intercept": best.intercept,
        "nonzero": nonzero,
        "coefficients": {
            label: float(c) for label, c in zip(design.labels, best.coef) if c != 0.0
        },
        "n_predictors": design.n_predictors,
    }
    with open(out, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    outputs = [out]
    if coef_out is not None:
        import csv as _csv

        with open(coef_out, "w", encoding="utf-8", newline="") as f:
            writer = _csv.writer(f)
            writer.writerow(["predictor", "coefficient"])
            for label, c in zip(design.labels, best.coef):
                writer.writerow([label, format_float(c)])
        outputs.append(coef_out)
    write_manifest(out.parent, out.stem + ".manifest.json", "baseline",
                   {"terms": terms, "alpha_grid": list(grid), "folds": folds,
                    "standardize": standardize, "log_response": log_response,
                    "drop_incomplete": drop_incomplete},
                   [data_csv, schema_json], seed, outputs, started)
    click.echo(f"selected alpha={best.alpha:g} lambda={best.lam:.6g} "
               f"({nonzero} nonzero) -> {out}")


if __name__ == "__main__":
    main()
