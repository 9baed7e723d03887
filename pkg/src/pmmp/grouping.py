"""Partition observations into cells sharing a full categorical tuple.

Two rows land in the same group exactly when their main-effect category
tuples are equal; group order is lexicographic in the tuple.  All downstream
estimation works off per-group sufficient statistics, so nothing here (or
later) ever materializes an N-by-N matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, format_float
from .errors import InternalError


@dataclass(frozen=True)
class GroupPartition:
    keys: tuple[tuple[int, ...], ...]  # K category tuples, lexicographically sorted
    sizes: np.ndarray                  # (K,) group sizes
    group_of: np.ndarray               # (N,) group index per row
    members: tuple[np.ndarray, ...]    # row indices per group
    n_star: int                        # smallest group size

    @property
    def k(self) -> int:
        return len(self.keys)

    def index_of(self, key: tuple[int, ...]) -> int | None:
        """Group index for a category tuple, or None if the cell is unobserved."""
        lookup = getattr(self, "_lookup", None)
        if lookup is None:
            lookup = {key: i for i, key in enumerate(self.keys)}
            object.__setattr__(self, "_lookup", lookup)
        return lookup.get(key)


def build_partition(dataset: Dataset) -> GroupPartition:
    keys, group_of = np.unique(dataset.c, axis=0, return_inverse=True)
    group_of = group_of.ravel()
    sizes = np.bincount(group_of, minlength=len(keys))
    order = np.argsort(group_of, kind="stable")
    members = tuple(np.split(order, np.cumsum(sizes)[:-1]))
    return GroupPartition(
        keys=tuple(tuple(int(v) for v in key) for key in keys),
        sizes=sizes,
        group_of=group_of,
        members=members,
        n_star=int(sizes.min()),
    )


@dataclass(frozen=True)
class GroupStats:
    """Per-group means and centered cross products, plus global totals."""

    size: np.ndarray    # (K,)
    mean_y: np.ndarray  # (K,)
    mean_x: np.ndarray  # (K, p)
    ss_y: np.ndarray    # (K,)   sum (y - mean_y)^2 within group
    ss_xy: np.ndarray   # (K, p) sum (x - mean_x)(y - mean_y)
    ss_xx: np.ndarray   # (K, p, p)
    n_total: int

    @property
    def k(self) -> int:
        return len(self.size)

    @property
    def p(self) -> int:
        return self.mean_x.shape[1]


def compute_stats(dataset: Dataset, partition: GroupPartition) -> GroupStats:
    g = partition.group_of
    k = partition.k
    n = partition.sizes.astype(float)
    sum_y = np.bincount(g, weights=dataset.y, minlength=k)
    mean_y = sum_y / n
    p = dataset.p
    mean_x = np.empty((k, p))
    for j in range(p):
        mean_x[:, j] = np.bincount(g, weights=dataset.x[:, j], minlength=k) / n
    ry = dataset.y - mean_y[g]
    rx = dataset.x - mean_x[g]
    ss_y = np.bincount(g, weights=ry * ry, minlength=k)
    ss_xy = np.empty((k, p))
    ss_xx = np.empty((k, p, p))
    for a in range(p):
        ss_xy[:, a] = np.bincount(g, weights=rx[:, a] * ry, minlength=k)
        for b in range(a, p):
            cross = np.bincount(g, weights=rx[:, a] * rx[:, b], minlength=k)
            ss_xx[:, a, b] = cross
            ss_xx[:, b, a] = cross

    total = float(np.sum(dataset.y))
    recon = float(np.sum(n * mean_y))
    if abs(recon - total) > 1e-9 * (1.0 + abs(total)):
        raise InternalError("group means do not reconstruct the response total")
    return GroupStats(size=n, mean_y=mean_y, mean_x=mean_x,
                      ss_y=ss_y, ss_xy=ss_xy, ss_xx=ss_xx, n_total=dataset.n)


def export_group_report(dataset: Dataset, partition: GroupPartition,
                        stats: GroupStats, path: str | Path) -> None:
    """Diagnostic CSV: category labels, group size, group response mean."""
    names = [v.name for v in dataset.schema.variables]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([*names, "n", "mean_response"])
        for i, key in enumerate(partition.keys):
            labels = dataset.schema.labels_for_key(key)
            writer.writerow([*labels, int(stats.size[i]), format_float(stats.mean_y[i])])
