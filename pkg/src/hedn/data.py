"""Subject datasets: CSV ingestion, a synthetic multi-subject generator and
the evaluation protocols (leave-one-subject-out, cross-dataset)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

UNLABELED = -1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectDataset:
    domain_id: int
    features: np.ndarray
    labels: np.ndarray
    trial_ids: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        trials = np.array(self.trial_ids, dtype=np.int64)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {feats.shape}")
        if not (len(feats) == len(labels) == len(trials)):
            raise DataError(
                f"length mismatch: {len(feats)} rows, {len(labels)} labels, {len(trials)} trial ids"
            )
        if not np.all(np.isfinite(feats)):
            raise DataError("features contain non-finite values")
        for arr in (feats, labels, trials):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "trial_ids", trials)

    def __len__(self):
        return len(self.features)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return bool(len(self.labels)) and bool(np.all(self.labels >= 0))

    def check_labels(self, n_classes: int) -> None:
        if self.labeled and self.labels.max() >= n_classes:
            raise DataError(f"domain {self.domain_id}: label {self.labels.max()} >= {n_classes} classes")


@dataclass(frozen=True)
class ExperimentFold:
    sources: list[SubjectDataset]
    target: SubjectDataset

    def __post_init__(self):
        if any(s.domain_id == self.target.domain_id for s in self.sources):
            raise DataError(f"target domain {self.target.domain_id} also appears as a source")


# --------------------------------------------------------------------------
# CSV format: header ``trial_id,label,f0,...,f{D-1}``
# --------------------------------------------------------------------------


def _format_float(v: float) -> str:
    return repr(float(v))


def dumps_subject(ds: SubjectDataset) -> str:
    buf = io.StringIO()
    buf.write(",".join(["trial_id", "label"] + [f"f{i}" for i in range(ds.n_features)]) + "\n")
    for t, y, row in zip(ds.trial_ids, ds.labels, ds.features):
        buf.write(f"{int(t)},{int(y)}," + ",".join(_format_float(v) for v in row) + "\n")
    return buf.getvalue()


def write_subject(path, ds: SubjectDataset) -> None:
    Path(path).write_text(dumps_subject(ds), encoding="utf-8", newline="\n")


def load_subject(path, domain_id: int = 0, n_features: int | None = None,
                 n_classes: int | None = None) -> SubjectDataset:
    """Parse a subject CSV. Errors carry the offending line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}:1: empty file") from None
    d = len(header) - 2
    expected = ["trial_id", "label"] + [f"f{i}" for i in range(d)]
    if d < 1 or header != expected:
        raise DataError(f"{path}:1: malformed header, expected trial_id,label,f0,...")
    if n_features is not None and d != n_features:
        raise DataError(f"{path}:1: file has {d} features, experiment uses {n_features}")
    trials, labels, rows = [], [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != d + 2:
            raise DataError(f"{path}:{lineno}: expected {d + 2} fields, got {len(rec)}")
        try:
            trials.append(int(rec[0]))
            labels.append(int(rec[1]))
            rows.append([float(v) for v in rec[2:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        lab = labels[-1]
        if lab < UNLABELED or (n_classes is not None and lab >= n_classes):
            raise DataError(f"{path}:{lineno}: label {lab} out of range")
    if not rows:
        raise DataError(f"{path}: no samples")
    feats = np.array(rows)
    if not np.all(np.isfinite(feats)):
        bad = int(np.argwhere(~np.isfinite(feats))[0, 0]) + 2
        raise DataError(f"{path}:{bad}: non-finite feature value")
    labels_arr = np.array(labels)
    if np.any(labels_arr == UNLABELED) and np.any(labels_arr != UNLABELED):
        raise DataError(f"{path}: labels must be all present or all -1")
    return SubjectDataset(domain_id, feats, labels_arr, np.array(trials))


# --------------------------------------------------------------------------
# Synthetic subjects
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 6
    n_classes: int = 3
    clusters_per_class: int = 3
    samples_per_cluster: int = 120
    feature_dim: int = 64
    cluster_spread: float = 0.15
    class_separation: float = 1.0
    cluster_offset: float = 0.6
    shift_scale: float = 0.5
    label_noise: tuple[tuple[int, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "n_classes", "clusters_per_class", "samples_per_cluster", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("cluster_spread", "class_separation", "cluster_offset", "shift_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for subject, frac in self.label_noise:
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"label noise fraction for subject {subject} must lie in [0, 1]")


def synth_generate(config: SynthConfig) -> list[SubjectDataset]:
    """Gaussian clusters with several clusters per class and a random affine
    map per subject.

    All scales are per-coordinate standard deviations. Class centres are
    spread with ``class_separation``; each class owns ``clusters_per_class``
    cluster centres offset from its class centre with ``cluster_offset``.
    Every subject applies ``x -> x A + b`` with
    ``A = I + shift_scale * N(0, 1/D)`` and ``b ~ N(0, shift_scale^2)`` to the
    shared centres, then draws isotropic samples of spread ``cluster_spread``.
    Trial ids are the global cluster index. Rows listed in ``label_noise``
    have that fraction of their labels moved to a different class.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    dim = c.feature_dim
    class_centers = rng.normal(0.0, c.class_separation, size=(c.n_classes, dim))
    offsets = rng.normal(0.0, c.cluster_offset, size=(c.n_classes, c.clusters_per_class, dim))
    centers = class_centers[:, None, :] + offsets
    noise = dict(c.label_noise)
    subjects = []
    for s in range(c.n_subjects):
        a = np.eye(dim) + c.shift_scale * rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim))
        b = rng.normal(0.0, c.shift_scale, size=dim)
        feats, labels, trials = [], [], []
        for k in range(c.n_classes):
            for j in range(c.clusters_per_class):
                center = centers[k, j] @ a + b
                pts = center + rng.normal(0.0, c.cluster_spread, size=(c.samples_per_cluster, dim))
                feats.append(pts)
                labels.append(np.full(c.samples_per_cluster, k))
                trials.append(np.full(c.samples_per_cluster, k * c.clusters_per_class + j))
        labels_arr = np.concatenate(labels)
        frac = noise.get(s, 0.0)
        if frac > 0 and c.n_classes > 1:
            n_bad = int(round(frac * len(labels_arr)))
            idx = rng.choice(len(labels_arr), size=n_bad, replace=False)
            shift = rng.integers(1, c.n_classes, size=n_bad)
            labels_arr[idx] = (labels_arr[idx] + shift) % c.n_classes
        subjects.append(SubjectDataset(s, np.concatenate(feats), labels_arr, np.concatenate(trials)))
    return subjects


# --------------------------------------------------------------------------
# Protocols and preprocessing
# --------------------------------------------------------------------------


def loso_folds(subjects: list[SubjectDataset]) -> list[ExperimentFold]:
    if len(subjects) < 3:
        raise DataError(f"leave-one-subject-out needs >= 3 subjects, got {len(subjects)}")
    ids = [s.domain_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise DataError("subject domain ids must be unique")
    return [ExperimentFold([s for s in subjects if s is not t], t) for t in subjects]


def cross_dataset_folds(source_subjects: list[SubjectDataset],
                        target_subjects: list[SubjectDataset]) -> list[ExperimentFold]:
    """Every source-dataset subject trains; each target-dataset subject is
    evaluated once."""
    if len(source_subjects) < 2:
        raise DataError("cross-dataset protocol needs >= 2 source subjects")
    offset = max(s.domain_id for s in source_subjects) + 1
    folds = []
    for i, t in enumerate(target_subjects):
        folds.append(ExperimentFold(list(source_subjects), replace(t, domain_id=offset + i)))
    return folds


# SEED-IV coding {0 neutral, 1 sad, 2 fear, 3 happy} -> {0 negative, 1 neutral, 2 positive}
_FOUR_TO_THREE = {0: 1, 1: 0, 2: 0, 3: 2}


def merge_labels_4to3(ds: SubjectDataset) -> SubjectDataset:
    unknown = set(np.unique(ds.labels).tolist()) - set(_FOUR_TO_THREE) - {UNLABELED}
    if unknown:
        raise DataError(f"unknown four-class label ids {sorted(unknown)}")
    mapped = np.array([_FOUR_TO_THREE.get(int(y), UNLABELED) for y in ds.labels], dtype=np.int64)
    return replace(ds, labels=mapped)


def zscore_per_domain(ds: SubjectDataset) -> SubjectDataset:
    if len(ds) < 2:
        raise DataError("z-scoring needs at least 2 samples")
    mean = ds.features.mean(axis=0)
    std = np.sqrt(np.maximum(ds.features.var(axis=0), 1e-12))
    return replace(ds, features=(ds.features - mean) / std)
