"""Indicator design-matrix expansion for the shrinkage baselines.

Reference-cell coding: a main effect with C+1 categories emits C columns (the
reference emits none), an interaction emits the product of its members'
non-reference counts, ordered with the leftmost variable outermost.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .data import Dataset, format_float
from .errors import ConfigError

Term = tuple[int, ...]


def normalize_terms(terms) -> tuple[Term, ...]:
    """Canonical term list: ints become 1-tuples, mains sorted, interactions kept in order."""
    mains: list[Term] = []
    inters: list[Term] = []
    for t in terms:
        t = (t,) if isinstance(t, int) else tuple(t)
        (mains if len(t) == 1 else inters).append(t)
    out = tuple(sorted(set(mains))) + tuple(inters)
    if len(set(out)) != len(out):
        raise ConfigError(f"duplicate terms requested: {terms}")
    if len(mains) != len(set(mains)):
        raise ConfigError(f"duplicate terms requested: {terms}")
    return out


def term_slots(schema, terms) -> list[tuple[Term, tuple[int, ...]]]:
    """Enumerate (term, category tuple) pairs in design-column order."""
    slots = []
    for term in normalize_terms(terms):
        for cats in product(*(schema.variables[j].non_reference for j in term)):
            slots.append((term, cats))
    return slots


@dataclass(frozen=True)
class ExpandedDesign:
    """Dense predictor matrix: continuous columns first, then 0/1 indicators."""

    matrix: np.ndarray  # (N, P)
    labels: tuple[str, ...]
    n_continuous: int
    terms: tuple[Term, ...]

    @property
    def n_predictors(self) -> int:
        return self.matrix.shape[1]


def expand(dataset: Dataset, terms) -> ExpandedDesign:
    """Build the indicator design for the requested main effects and interactions.

    Every interaction must be declared in the dataset schema; an interaction
    column is the elementwise product of its member main-effect indicators, so
    it is 1 only when every member sits at a non-reference category.
    """
    schema = dataset.schema
    norm = normalize_terms(terms)
    declared = set(schema.interactions)
    for term in norm:
        for j in term:
            if not 0 <= j < schema.n_variables:
                raise ConfigError(f"term {term} references unknown variable index {j}")
        if len(term) > 1 and term not in declared:
            raise ConfigError(f"interaction {term} is not declared in the schema")

    columns = [dataset.x[:, j] for j in range(dataset.p)]
    labels = list(dataset.x_names)
    for term, cats in term_slots(schema, norm):
        col = np.ones(dataset.n)
        for j, k in zip(term, cats):
            col = col * (dataset.c[:, j] == k)
        columns.append(col)
        labels.append(
            ":".join(
                f"{schema.variables[j].name}={schema.variables[j].labels[k]}"
                for j, k in zip(term, cats)
            )
        )
    matrix = np.column_stack(columns) if columns else np.zeros((dataset.n, 0))
    return ExpandedDesign(matrix=matrix, labels=tuple(labels),
                          n_continuous=dataset.p, terms=norm)


def export_design_csv(design: ExpandedDesign, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(design.labels)
        for row in design.matrix:
            writer.writerow([format_float(v) for v in row])
