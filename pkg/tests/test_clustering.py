import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hedn import _kernels_py, kernels
from hedn.clustering import (
    NOISE,
    ClusterAssignment,
    DbscanParams,
    UndefinedScoreError,
    assign_clusters,
    dbscan,
    nmi,
    silhouette,
    tune_dbscan,
)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def reference_dbscan(points, eps, min_samples):
    """Brute-force DBSCAN: union-find over core points, clusters numbered by
    their smallest core index, border points joining the lowest-numbered
    adjacent core component."""
    n = len(points)
    dist = [[math.dist(points[i], points[j]) for j in range(n)] for i in range(n)]
    core = [sum(d <= eps for d in row) >= min_samples for row in dist]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if core[i] and core[j] and dist[i][j] <= eps:
                ri, rj = find(i), find(j)
                parent[max(ri, rj)] = min(ri, rj)
    roots = sorted({min(k for k in range(n) if core[k] and find(k) == find(i))
                    for i in range(n) if core[i]})
    cid = {r: c for c, r in enumerate(roots)}
    labels = [NOISE] * n
    for i in range(n):
        if core[i]:
            labels[i] = cid[min(k for k in range(n) if core[k] and find(k) == find(i))]
    for i in range(n):
        if not core[i]:
            near = [labels[j] for j in range(n) if core[j] and dist[i][j] <= eps]
            if near:
                labels[i] = min(near)
    return np.array(labels)


def reference_nmi(a, b):
    n = len(a)
    ca, cb, cab = Counter(a), Counter(b), Counter(zip(a, b))
    ha = -sum(v / n * math.log(v / n) for v in ca.values())
    hb = -sum(v / n * math.log(v / n) for v in cb.values())
    mi = sum(v / n * math.log((v / n) / (ca[x] / n * cb[y] / n)) for (x, y), v in cab.items())
    return mi / math.sqrt(ha * hb)


def reference_silhouette(points, labels):
    idx = [i for i in range(len(labels)) if labels[i] != NOISE]
    scores = []
    for i in idx:
        same = [j for j in idx if labels[j] == labels[i] and j != i]
        if not same:
            scores.append(0.0)
            continue
        a = sum(math.dist(points[i], points[j]) for j in same) / len(same)
        b = min(
            sum(math.dist(points[i], points[j]) for j in idx if labels[j] == c)
            / sum(1 for j in idx if labels[j] == c)
            for c in set(labels[j] for j in idx) if c != labels[i]
        )
        scores.append((b - a) / max(a, b))
    return sum(scores) / len(scores)


def random_instance(r):
    n = int(r.integers(1, 301))
    d = int(r.integers(1, 11))
    k = int(r.integers(1, 6))
    centers = r.normal(scale=4.0, size=(k, d))
    x = centers[r.integers(0, k, n)] + r.normal(scale=r.uniform(0.3, 1.5), size=(n, d))
    return x, float(r.uniform(0.3, 3.0)), int(r.integers(1, 8))


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_dbscan_matches_reference(seed):
    r = np.random.default_rng(seed)
    x, eps, ms = random_instance(r)
    got = dbscan(x, DbscanParams(eps, ms))
    assert np.array_equal(got.labels, reference_dbscan(x.tolist(), eps, ms))


def test_two_blobs():
    r = np.random.default_rng(0)
    x = np.vstack([r.normal(0, 0.5, (100, 2)), r.normal(0, 0.5, (100, 2)) + [20, 0]])
    a = dbscan(x, DbscanParams(2.0, 4))
    assert a.n_clusters == 2 and a.noise_fraction == 0.0
    assert np.array_equal(a.labels, reference_dbscan(x.tolist(), 2.0, 4))


def test_single_point_is_noise():
    a = dbscan(np.zeros((1, 3)), DbscanParams(1.0, 2))
    assert a.labels.tolist() == [NOISE] and a.n_clusters == 0


def test_identical_points_one_cluster():
    a = dbscan(np.ones((7, 2)), DbscanParams(0.5, 7))
    assert a.labels.tolist() == [0] * 7


def test_eps_is_inclusive():
    x = np.array([[0.0], [1.0]])
    assert dbscan(x, DbscanParams(1.0, 2)).labels.tolist() == [0, 0]


def test_border_joins_first_cluster_in_scan_order():
    # point 4 is a border point within eps of both core groups
    x = np.array([0, 1, 2, 3, 12, 21, 22, 23, 24], dtype=float)[:, None]
    labels = dbscan(x, DbscanParams(9.0, 4)).labels
    assert labels.tolist() == [0, 0, 0, 0, 0, 1, 1, 1, 1]
    flipped = dbscan(-x[::-1], DbscanParams(9.0, 4)).labels
    assert flipped.tolist() == [0, 0, 0, 0, 0, 1, 1, 1, 1]


@pytest.mark.parametrize("bad", [dict(eps=0.0, min_samples=3), dict(eps=1.0, min_samples=0)])
def test_params_validation(bad):
    with pytest.raises(ValueError):
        DbscanParams(**bad)


def test_assignment_is_immutable():
    a = ClusterAssignment.from_labels([0, 1, -1])
    with pytest.raises(ValueError):
        a.labels[0] = 5
    assert a.n_clusters == 2


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@pytest.mark.parametrize("seed", range(10))
def test_backends_agree(seed):
    from hedn import _kernels

    r = np.random.default_rng(100 + seed)
    x, eps, ms = random_instance(r)
    d_c = _kernels.pairwise_distances(x)
    d_p = _kernels_py.pairwise_distances(x)
    np.testing.assert_allclose(d_c, d_p, rtol=1e-12, atol=1e-12)
    lab_c = _kernels.dbscan_labels(d_c, eps, ms)
    assert np.array_equal(lab_c, _kernels_py.dbscan_labels(d_c, eps, ms))
    k = int(lab_c.max()) + 1
    np.testing.assert_allclose(_kernels.silhouette_samples(d_c, lab_c, k),
                               _kernels_py.silhouette_samples(d_c, lab_c, k), atol=1e-12)


def test_dbscan_against_sklearn():
    sk = pytest.importorskip("sklearn.cluster")
    r = np.random.default_rng(7)
    for _ in range(5):
        x, eps, ms = random_instance(r)
        ours = dbscan(x, DbscanParams(eps, ms)).labels
        theirs = sk.DBSCAN(eps=eps, min_samples=ms).fit(x)
        # core membership is order-free, so compare the core partition only
        core = np.zeros(len(x), bool)
        core[theirs.core_sample_indices_] = True
        if core.sum() > 1:
            assert nmi(ours[core], theirs.labels_[core]) == pytest.approx(1.0)
        assert np.array_equal(ours == NOISE, theirs.labels_ == -1)


# ---------------------------------------------------------------------------
# NMI
# ---------------------------------------------------------------------------


def test_nmi_identical():
    assert nmi([0, 0, 1, 2], [5, 5, 3, 9]) == pytest.approx(1.0)


def test_nmi_zero_entropy_conventions():
    assert nmi([0, 0, 0], [1, 1, 1]) == 1.0
    assert nmi([0, 0, 0, 0], [0, 0, 1, 1]) == 0.0


def test_nmi_twelve_sample_oracle():
    a = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]
    b = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 0, -1]
    assert nmi(a, b) == pytest.approx(reference_nmi(a, b), abs=1e-12)


def test_nmi_length_mismatch():
    with pytest.raises(ValueError):
        nmi([0, 1], [0])


labels_st = st.lists(st.integers(-1, 4), min_size=2, max_size=40)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_nmi_properties(data):
    a = data.draw(labels_st)
    b = data.draw(st.lists(st.integers(-1, 4), min_size=len(a), max_size=len(a)))
    v = nmi(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(nmi(b, a), abs=1e-12)
    perm = {x: 10 - x for x in set(a)}
    assert v == pytest.approx(nmi([perm[x] for x in a], b), abs=1e-12)
    if len(set(a)) > 1 and len(set(b)) > 1:
        assert v == pytest.approx(reference_nmi(a, b), abs=1e-12)


def test_nmi_against_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    r = np.random.default_rng(3)
    a, b = r.integers(0, 4, 50), r.integers(-1, 3, 50)
    assert nmi(a, b) == pytest.approx(
        metrics.normalized_mutual_info_score(a, b, average_method="geometric"), abs=1e-12)


# ---------------------------------------------------------------------------
# Silhouette
# ---------------------------------------------------------------------------


def test_silhouette_separated_blobs():
    r = np.random.default_rng(1)
    x = np.vstack([r.normal(0, 0.1, (30, 2)), r.normal(0, 0.1, (30, 2)) + 10])
    labels = [0] * 30 + [1] * 30
    s = silhouette(x, labels)
    assert s > 0.9
    assert s == pytest.approx(reference_silhouette(x.tolist(), labels), abs=1e-12)


def test_silhouette_interleaved():
    r = np.random.default_rng(2)
    x = r.normal(size=(80, 2))
    labels = [0, 1] * 40
    assert abs(silhouette(x, labels)) < 0.1


def test_silhouette_with_noise_and_singleton():
    r = np.random.default_rng(4)
    x = r.normal(size=(25, 3))
    labels = [0] * 10 + [1] * 10 + [2] + [-1] * 4
    assert silhouette(x, labels) == pytest.approx(reference_silhouette(x.tolist(), labels), abs=1e-12)


def test_silhouette_undefined():
    with pytest.raises(UndefinedScoreError):
        silhouette(np.zeros((4, 2)), [0, 0, -1, -1])


def test_silhouette_against_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    r = np.random.default_rng(5)
    x = r.normal(size=(60, 4))
    labels = r.integers(0, 3, 60)
    assert silhouette(x, labels) == pytest.approx(metrics.silhouette_score(x, labels), abs=1e-12)


# ---------------------------------------------------------------------------
# Tuning
# ---------------------------------------------------------------------------


def blobs(r, k=4, n=30, d=5, sep=30.0, spread=0.3):
    centers = r.normal(scale=sep, size=(k, d))
    trials = np.repeat(np.arange(k), n)
    return centers[trials] + r.normal(scale=spread, size=(k * n, d)), trials


def test_tune_recovers_trials():
    x, trials = blobs(np.random.default_rng(0))
    res = tune_dbscan(x, trials)
    assert res.score == pytest.approx(1.0)
    assert nmi(res.assignment.labels, trials) == pytest.approx(1.0)
    assert np.array_equal(res.assignment.labels,
                          reference_dbscan(x.tolist(), res.params.eps, res.params.min_samples))
    assert len(res.grid) == 36


def test_tune_tie_break_prefers_small_params():
    x, trials = blobs(np.random.default_rng(1))
    res = tune_dbscan(x, trials)
    best = [c for c in res.grid if not c.skipped and c.score == res.score]
    assert (res.params.eps, res.params.min_samples) == min((c.eps, c.min_samples) for c in best)


def test_tune_silhouette_without_trials():
    x, _ = blobs(np.random.default_rng(2))
    res = tune_dbscan(x)
    scores = [c.score for c in res.grid if not c.skipped]
    assert res.score == max(scores)


def test_tune_skip_rule():
    x, trials = blobs(np.random.default_rng(3))
    for cell in tune_dbscan(x, trials).grid:
        assert cell.skipped == (cell.n_clusters < 2 or cell.noise_fraction > 0.5)
        assert math.isnan(cell.score) == cell.skipped


def test_tune_fallback():
    x = np.arange(10, dtype=float)[:, None] * 100.0
    res = tune_dbscan(x)
    assert res.fell_back and math.isnan(res.score)
    assert res.assignment.labels.tolist() == [0] * 10
    by_class = tune_dbscan(x, class_labels=[2, 0] * 5)
    assert by_class.assignment.labels.tolist() == [1, 0] * 5


def test_tune_deterministic():
    x, trials = blobs(np.random.default_rng(4))
    a, b = tune_dbscan(x, trials), tune_dbscan(x, trials)
    assert a.params == b.params and np.array_equal(a.assignment.labels, b.assignment.labels)


def test_assign_clusters_fallback():
    x = np.arange(4, dtype=float)[:, None] * 100.0
    a = assign_clusters(x, DbscanParams(1.0, 2), class_labels=[0, 1, 0, 1])
    assert a.labels.tolist() == [0, 1, 0, 1]
