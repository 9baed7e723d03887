"""Dataset schema, validation, CSV ingestion and export.

An observation is a response value, a vector of continuous predictors and a
tuple of categorical codes.  Categories are stored as 0-based indices into the
per-variable label list; the reference category (default: the first label)
carries no indicator in any expanded design.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InternalError, SchemaError

# 17 significant digits guarantee exact float64 text round-trips.
FLOAT_FMT = "%.17g"


def format_float(v: float) -> str:
    return FLOAT_FMT % v


@dataclass(frozen=True)
class CategoricalVariable:
    """One categorical predictor: ordered labels plus a reference category."""

    name: str
    labels: tuple[str, ...]
    reference: int = 0

    def __post_init__(self) -> None:
        if len(self.labels) < 2:
            raise SchemaError(f"variable {self.name!r} needs at least 2 categories")
        if len(set(self.labels)) != len(self.labels):
            raise SchemaError(f"variable {self.name!r} has duplicate category labels")
        if not 0 <= self.reference < len(self.labels):
            raise SchemaError(
                f"variable {self.name!r}: reference index {self.reference} out of range"
            )

    @property
    def n_categories(self) -> int:
        return len(self.labels)

    @property
    def non_reference(self) -> tuple[int, ...]:
        """Indices of the categories that receive indicator columns, in label order."""
        return tuple(i for i in range(len(self.labels)) if i != self.reference)


@dataclass(frozen=True)
class CategoricalSchema:
    """All categorical variables plus the declared interaction terms.

    Interactions are tuples of main-effect indices, strictly increasing.
    """

    variables: tuple[CategoricalVariable, ...]
    interactions: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self) -> None:
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate variable names in schema")
        for term in self.interactions:
            if len(term) < 2 or len(set(term)) != len(term):
                raise SchemaError(f"interaction {term} must list distinct variables")
            if list(term) != sorted(term):
                raise SchemaError(f"interaction {term} must be in increasing index order")
            for j in term:
                if not 0 <= j < len(self.variables):
                    raise SchemaError(f"interaction {term} references unknown variable {j}")

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    def var_index(self, name: str) -> int:
        for i, v in enumerate(self.variables):
            if v.name == name:
                return i
        raise SchemaError(f"unknown categorical variable {name!r}")

    def key_from_labels(self, labels: Sequence[str]) -> tuple[int, ...]:
        if len(labels) != self.n_variables:
            raise SchemaError(
                f"expected {self.n_variables} category labels, got {len(labels)}"
            )
        key = []
        for v, lab in zip(self.variables, labels):
            try:
                key.append(v.labels.index(lab))
            except ValueError:
                raise SchemaError(f"unknown category {lab!r} for variable {v.name!r}")
        return tuple(key)

    def labels_for_key(self, key: Sequence[int]) -> tuple[str, ...]:
        return tuple(v.labels[k] for v, k in zip(self.variables, key))

    def to_dict(self) -> dict:
        return {
            "variables": [
                {"name": v.name, "labels": list(v.labels), "reference": v.labels[v.reference]}
                for v in self.variables
            ],
            "interactions": [
                [self.variables[j].name for j in term] for term in self.interactions
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CategoricalSchema":
        variables = []
        for spec in d.get("variables", []):
            labels = tuple(str(x) for x in spec["labels"])
            ref = spec.get("reference", labels[0])
            if isinstance(ref, str):
                if ref not in labels:
                    raise SchemaError(
                        f"reference {ref!r} is not a category of {spec['name']!r}"
                    )
                ref = labels.index(ref)
            variables.append(CategoricalVariable(str(spec["name"]), labels, int(ref)))
        name_to_idx = {v.name: i for i, v in enumerate(variables)}
        interactions = []
        for term in d.get("interactions", []):
            try:
                idx = tuple(name_to_idx[str(n)] for n in term)
            except KeyError as e:
                raise SchemaError(f"interaction references unknown variable {e.args[0]!r}")
            interactions.append(idx)
        return cls(tuple(variables), tuple(interactions))


@dataclass(frozen=True)
class Dataset:
    """Validated observations: response, continuous matrix, categorical codes."""

    y: np.ndarray  # (N,)
    x: np.ndarray  # (N, p)
    c: np.ndarray  # (N, q1) 0-based category indices
    schema: CategoricalSchema
    x_names: tuple[str, ...] = ()
    y_name: str = "y"

    def __post_init__(self) -> None:
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "x", np.atleast_2d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.int64))
        if self.x.size == 0:
            object.__setattr__(self, "x", np.zeros((len(self.y), 0)))
        if self.c.ndim == 1:
            object.__setattr__(self, "c", self.c.reshape(len(self.y), -1))
        n = len(self.y)
        if n < 1:
            raise SchemaError("dataset must contain at least one row")
        if self.x.shape[0] != n or self.c.shape[0] != n:
            raise SchemaError("y, x, c row counts disagree")
        if self.c.shape[1] != self.schema.n_variables:
            raise SchemaError(
                f"dataset has {self.c.shape[1]} categorical columns, "
                f"schema declares {self.schema.n_variables}"
            )
        if not self.x_names:
            object.__setattr__(
                self, "x_names", tuple(f"x{j + 1}" for j in range(self.x.shape[1]))
            )
        if len(self.x_names) != self.x.shape[1]:
            raise SchemaError("x_names length does not match continuous column count")
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.x)):
            raise SchemaError("dataset contains non-finite values")
        for j, v in enumerate(self.schema.variables):
            col = self.c[:, j]
            if col.min(initial=0) < 0 or col.max(initial=0) >= v.n_categories:
                bad = int(np.argmax((col < 0) | (col >= v.n_categories)))
                raise SchemaError(
                    f"row {bad}: category code {col[bad]} out of range for {v.name!r}"
                )

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class TrueModel:
    """Generating model for simulations: intercept, slopes, categorical effects.

    ``coeffs`` maps a term (tuple of main-effect indices; length 1 for a main
    effect) to a map from non-reference category tuples to coefficients.
    """

    b0: float
    b: np.ndarray
    coeffs: Mapping[tuple[int, ...], Mapping[tuple[int, ...], float]]
    sigma: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        if not self.sigma > 0:
            raise SchemaError("sigma must be positive")

    def validate_against(self, schema: CategoricalSchema) -> None:
        """Check the coefficient map covers exactly the non-reference combos."""
        from itertools import product

        for term, table in self.coeffs.items():
            for j in term:
                if not 0 <= j < schema.n_variables:
                    raise SchemaError(f"model term {term} references unknown variable {j}")
            expected = set(product(*(schema.variables[j].non_reference for j in term)))
            if set(table) != expected:
                raise SchemaError(
                    f"model term {term}: coefficient map does not cover exactly "
                    f"the non-reference categories"
                )


def true_theta(model: TrueModel, dataset: Dataset) -> np.ndarray:
    """Regression mean for every row: intercept + linear part + categorical part.

    A term contributes only when every member variable sits at a non-reference
    category; the contribution is the coefficient keyed by that category tuple.
    """
    if len(model.b) != dataset.p:
        raise InternalError(
            f"model has {len(model.b)} slopes, dataset has {dataset.p} continuous columns"
        )
    theta = model.b0 + dataset.x @ model.b
    refs = np.array([v.reference for v in dataset.schema.variables])
    for term, table in model.coeffs.items():
        cols = dataset.c[:, list(term)]
        active = np.all(cols != refs[list(term)], axis=1)
        for i in np.nonzero(active)[0]:
            key = tuple(int(v) for v in cols[i])
            try:
                theta[i] += table[key]
            except KeyError:
                raise InternalError(f"no coefficient for term {term} at categories {key}")
    return theta


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class IngestSpec:
    """Column layout of a CSV file: response, continuous columns, schema."""

    response: str
    continuous: tuple[str, ...]
    schema: CategoricalSchema

    @classmethod
    def from_dict(cls, d: Mapping) -> "IngestSpec":
        return cls(
            response=str(d["response"]),
            continuous=tuple(str(c) for c in d.get("continuous", [])),
            schema=CategoricalSchema.from_dict(d),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "IngestSpec":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = self.schema.to_dict()
        d["response"] = self.response
        d["continuous"] = list(self.continuous)
        return d


def ingest_csv(
    path: str | Path,
    spec: IngestSpec,
    *,
    standardize: bool = False,
    log_response: bool = False,
    drop_incomplete: bool = False,
) -> Dataset:
    """Read and validate a CSV file into a Dataset.

    Missing values are blank fields.  Rows containing any blank are dropped
    when ``drop_incomplete`` is set, and rejected otherwise.  ``standardize``
    centers and scales each continuous column by its sample mean / sample
    standard deviation (computed after row filtering); ``log_response``
    replaces the response by its natural log and requires positive values.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file")
        rows = list(reader)

    col_idx: dict[str, int] = {}
    for name in [spec.response, *spec.continuous] + [v.name for v in spec.schema.variables]:
        if name not in header:
            raise SchemaError(f"{path}: missing column {name!r}")
        col_idx[name] = header.index(name)

    label_maps = [
        {lab: i for i, lab in enumerate(v.labels)} for v in spec.schema.variables
    ]
    y_list: list[float] = []
    x_list: list[list[float]] = []
    c_list: list[list[int]] = []
    for r, row in enumerate(rows):
        line = r + 2  # 1-based file line, after the header
        fields = [row[col_idx[spec.response]]]
        fields += [row[col_idx[name]] for name in spec.continuous]
        cat_fields = [row[col_idx[v.name]] for v in spec.schema.variables]
        if any(f.strip() == "" for f in fields + cat_fields):
            if drop_incomplete:
                continue
            raise SchemaError(f"{path}: line {line}: missing value (use drop-incomplete)")
        try:
            y_val = float(fields[0])
        except ValueError:
            raise SchemaError(
                f"{path}: line {line}, column {spec.response!r}: not a number"
            )
        x_vals = []
        for name, text in zip(spec.continuous, fields[1:]):
            try:
                x_vals.append(float(text))
            except ValueError:
                raise SchemaError(f"{path}: line {line}, column {name!r}: not a number")
        c_vals = []
        for v, lmap, text in zip(spec.schema.variables, label_maps, cat_fields):
            code = lmap.get(text.strip())
            if code is None:
                raise SchemaError(
                    f"{path}: line {line}, column {v.name!r}: unknown category {text!r}"
                )
            c_vals.append(code)
        y_list.append(y_val)
        x_list.append(x_vals)
        c_list.append(c_vals)

    if not y_list:
        raise SchemaError(f"{path}: no complete rows after filtering")
    y = np.array(y_list)
    x = np.array(x_list) if spec.continuous else np.zeros((len(y_list), 0))
    c = np.array(c_list, dtype=np.int64).reshape(len(y_list), -1)

    dataset = Dataset(y=y, x=x, c=c, schema=spec.schema,
                      x_names=spec.continuous, y_name=spec.response)
    dataset, _ = transform(dataset, standardize=standardize, log_response=log_response)
    return dataset


def transform(dataset: Dataset, *, standardize: bool = False,
              log_response: bool = False) -> tuple[Dataset, dict]:
    """Apply the response/covariate transforms and return their parameters.

    The returned dict can be stored with a fitted model and replayed on new
    data via apply_transform, so prediction-time covariates are scaled with
    the training centers and spreads rather than their own.
    """
    params: dict = {"standardize": standardize, "log_response": log_response}
    y, x = dataset.y, dataset.x
    if log_response:
        if np.any(y <= 0):
            bad = int(np.argmax(y <= 0))
            raise ValueError(
                f"log-response requires positive responses; row {bad} has {y[bad]}"
            )
        y = np.log(y)
    if standardize and x.shape[1]:
        mean = x.mean(axis=0)
        sd = x.std(axis=0, ddof=1) if dataset.n > 1 else np.zeros(x.shape[1])
        for j, s in enumerate(sd):
            if not s > 0:
                raise ValueError(
                    f"cannot standardize zero-variance column {dataset.x_names[j]!r}"
                )
        x = (x - mean) / sd
        params["x_center"] = [float(v) for v in mean]
        params["x_scale"] = [float(v) for v in sd]
    if not standardize and not log_response:
        return dataset, params
    return Dataset(y=y, x=x, c=dataset.c, schema=dataset.schema,
                   x_names=dataset.x_names, y_name=dataset.y_name), params


def apply_transform(dataset: Dataset, params: Mapping) -> Dataset:
    """Replay stored transform parameters on new data of the same shape."""
    y, x = dataset.y, dataset.x
    if params.get("log_response"):
        if np.any(y <= 0):
            bad = int(np.argmax(y <= 0))
            raise ValueError(
                f"log-response requires positive responses; row {bad} has {y[bad]}"
            )
        y = np.log(y)
    if params.get("standardize") and x.shape[1]:
        center = np.asarray(params["x_center"], dtype=float)
        scale = np.asarray(params["x_scale"], dtype=float)
        x = (x - center) / scale
    if not params.get("standardize") and not params.get("log_response"):
        return dataset
    return Dataset(y=y, x=x, c=dataset.c, schema=dataset.schema,
                   x_names=dataset.x_names, y_name=dataset.y_name)


def export_csv(dataset: Dataset, path: str | Path, sidecar: str | Path | None = None) -> None:
    """Write a Dataset back to CSV; optionally write the schema sidecar JSON."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        names = [dataset.y_name, *dataset.x_names] + [
            v.name for v in dataset.schema.variables
        ]
        writer.writerow(names)
        for i in range(dataset.n):
            row = [format_float(dataset.y[i])]
            row += [format_float(v) for v in dataset.x[i]]
            row += [
                v.labels[dataset.c[i, j]] for j, v in enumerate(dataset.schema.variables)
            ]
            writer.writerow(row)
    if sidecar is not None:
        spec = IngestSpec(dataset.y_name, dataset.x_names, dataset.schema)
        with open(sidecar, "w", encoding="utf-8") as f:
            json.dump(spec.to_dict(), f, indent=2)
            f.write("\n")
