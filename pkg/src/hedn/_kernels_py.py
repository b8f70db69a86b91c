"""Pure-Python clustering kernels, used when the compiled extension is absent."""
import numpy as np


def pairwise_distances(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    out = np.empty((n, n))
    for i in range(n):
        out[i] = np.sqrt(((x - x[i]) ** 2).sum(axis=1))
    np.fill_diagonal(out, 0.0)
    # enforce exact symmetry, as the compiled kernel does
    upper = np.triu_indices(n, 1)
    out[(upper[1], upper[0])] = out[upper]
    return out


def dbscan_labels(dist, eps, min_samples):
    n = dist.shape[0]
    adjacency = dist <= eps
    core = adjacency.sum(axis=1) >= min_samples
    neighbors = [np.flatnonzero(row) for row in adjacency]
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        queued = {i}
        stack = [i]
        while stack:
            p = stack.pop()
            if labels[p] == -1:
                labels[p] = cluster
            if not core[p]:
                continue
            for j in neighbors[p]:
                if labels[j] == -1 and j not in queued:
                    queued.add(j)
                    stack.append(j)
        cluster += 1
    return labels


def silhouette_samples(dist, labels, n_clusters):
    labels = np.asarray(labels, dtype=np.int64)
    n = dist.shape[0]
    out = np.full(n, np.nan)
    keep = labels >= 0
    sizes = np.bincount(labels[keep], minlength=n_clusters)
    # sums[i, c] = total distance from i to members of cluster c
    onehot = np.zeros((n, n_clusters))
    onehot[np.flatnonzero(keep), labels[keep]] = 1.0
    sums = dist @ onehot
    for i in np.flatnonzero(keep):
        li = labels[i]
        if sizes[li] <= 1:
            out[i] = 0.0
            continue
        a = sums[i, li] / (sizes[li] - 1)
        others = [sums[i, c] / sizes[c] for c in range(n_clusters) if c != li and sizes[c] > 0]
        if not others:
            out[i] = 0.0
            continue
        b = min(others)
        m = max(a, b)
        out[i] = (b - a) / m if m > 0 else 0.0
    return out
