"""DBSCAN, partition-quality scores and the parameter grid search used to fix
cluster assignments before training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

NOISE = -1
DEFAULT_EPS_GRID = tuple(np.round(np.arange(1.0, 5.0 + 1e-9, 0.5), 10))
DEFAULT_MIN_SAMPLES_GRID = (3, 4, 5, 6)
MAX_NOISE_FRACTION = 0.5


class UndefinedScoreError(ValueError):
    """Raised when a score is not defined for the given partition."""


@dataclass(frozen=True)
class DbscanParams:
    eps: float
    min_samples: int

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.min_samples < 1:
            raise ValueError(f"min_samples must be >= 1, got {self.min_samples}")


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, labels) -> "ClusterAssignment":
        labels = np.asarray(labels, dtype=np.int64)
        n = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
        return cls(labels, n)

    @property
    def noise_fraction(self) -> float:
        return float(np.mean(self.labels == NOISE)) if self.labels.size else 0.0


def dbscan(points, params: DbscanParams, dist: np.ndarray | None = None) -> ClusterAssignment:
    """Classical DBSCAN with Euclidean distance.

    A point is core when at least ``min_samples`` points (itself included) lie
    within ``eps``. Clusters are numbered in the order their first core point
    is met while scanning rows; a border point joins the first cluster that
    reaches it. Pass ``dist`` to reuse a precomputed distance matrix.
    """
    if dist is None:
        dist = kernels.pairwise_distances(np.ascontiguousarray(points, dtype=np.float64))
    labels = kernels.dbscan_labels(np.ascontiguousarray(dist), float(params.eps),
                                   int(params.min_samples))
    return ClusterAssignment.from_labels(labels)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """Normalised mutual information ``I(a;b) / sqrt(H(a) H(b))``. Noise ids
    are ordinary categories."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        return 1.0 if ha == hb else 0.0
    n = table.sum()
    pxy = table / n
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])).sum())
    return min(max(mi / math.sqrt(ha * hb), 0.0), 1.0)


def silhouette(points, labels, dist: np.ndarray | None = None) -> float:
    """Mean silhouette over non-noise samples; noise is ignored entirely."""
    assignment = ClusterAssignment.from_labels(labels)
    present = np.unique(assignment.labels[assignment.labels != NOISE])
    if present.size < 2:
        raise UndefinedScoreError("silhouette needs at least 2 non-noise clusters")
    if dist is None:
        dist = kernels.pairwise_distances(np.ascontiguousarray(points, dtype=np.float64))
    s = kernels.silhouette_samples(np.ascontiguousarray(dist), assignment.labels,
                                   assignment.n_clusters)
    return float(np.nanmean(s))


@dataclass
class GridCell:
    eps: float
    min_samples: int
    n_clusters: int
    noise_fraction: float
    score: float
    skipped: bool


@dataclass
class TuneResult:
    params: DbscanParams | None
    assignment: ClusterAssignment
    score: float
    grid: list[GridCell] = field(default_factory=list)

    @property
    def fell_back(self) -> bool:
        return self.params is None


def tune_dbscan(points, trial_ids=None, class_labels=None,
                eps_grid=DEFAULT_EPS_GRID,
                min_samples_grid=DEFAULT_MIN_SAMPLES_GRID) -> TuneResult:
    """Grid-search DBSCAN parameters.

    The score is NMI against ``trial_ids`` when given, otherwise the
    silhouette. Configurations with fewer than two clusters or more than half
    the points flagged as noise are skipped. Ties go to the smaller ``eps``,
    then the smaller ``min_samples``. When every cell is skipped the result
    falls back to one cluster per class label (or a single cluster) with a NaN
    score and ``params=None``.
    """
    x = np.ascontiguousarray(points, dtype=np.float64)
    dist = kernels.pairwise_distances(x)
    best: tuple[float, DbscanParams, ClusterAssignment] | None = None
    grid = []
    for eps in sorted(eps_grid):
        for ms in sorted(min_samples_grid):
            params = DbscanParams(float(eps), int(ms))
            assignment = dbscan(x, params, dist=dist)
            skipped = assignment.n_clusters < 2 or assignment.noise_fraction > MAX_NOISE_FRACTION
            score = math.nan
            if not skipped:
                if trial_ids is not None:
                    score = nmi(assignment.labels, trial_ids)
                else:
                    score = silhouette(x, assignment.labels, dist=dist)
                if best is None or score > best[0]:
                    best = (score, params, assignment)
            grid.append(GridCell(params.eps, params.min_samples, assignment.n_clusters,
                                 assignment.noise_fraction, score, skipped))
    if best is None:
        return TuneResult(None, fallback_assignment(len(x), class_labels), math.nan, grid)
    return TuneResult(best[1], best[2], best[0], grid)


def fallback_assignment(n: int, class_labels=None) -> ClusterAssignment:
    if class_labels is not None and np.all(np.asarray(class_labels) >= 0):
        _, inv = np.unique(np.asarray(class_labels), return_inverse=True)
        return ClusterAssignment.from_labels(inv)
    return ClusterAssignment.from_labels(np.zeros(n, dtype=np.int64))


def assign_clusters(points, params: DbscanParams | None, class_labels=None) -> ClusterAssignment:
    """Apply fixed parameters to one domain, falling back when DBSCAN yields no
    cluster at all."""
    if params is not None:
        assignment = dbscan(points, params)
        if assignment.n_clusters >= 1:
            return assignment
    return fallback_assignment(len(points), class_labels)
