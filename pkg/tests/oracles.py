"""Reference implementations used to check the package from a second route.

Everything here is written with plain loops and no shared code with ``stage``.
"""

import math

import numpy as np


def sequence_ok(row):
    """Both funnel rules on the known (non-zero) entries of one label row.

    Rule 1: a +1 at stage j needs every known earlier stage to be +1.
    Rule 2: a -1 at stage i forces every known later stage to be -1.
    """
    row = [int(v) for v in row]
    for j, v in enumerate(row):
        if v == 1 and any(row[i] == -1 for i in range(j)):
            return False
        if v == -1 and any(row[k] == 1 for k in range(j + 1, len(row))):
            return False
    return True


def tc_brute(y):
    total = 0.0
    for row in np.atleast_2d(y):
        for i in range(len(row)):
            for j in range(i + 1, len(row)):
                total += (1 - row[i]) * (1 + row[j])
    return total / 4.0


def lc_brute(yhat, y, masked=True):
    total = 0.0
    for a in range(len(y)):
        for s in range(len(y[a])):
            if masked and y[a][s] == 0:
                continue
            total += (yhat[a][s] - y[a][s]) ** 2
    return total


def numeric_grad(fun, params, eps=1e-6):
    """Central differences of a scalar ``fun(params)`` for each array in ``params``."""
    params = [np.array(p, dtype=np.float64) for p in params]
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = fun(params)
            flat[i] = keep - eps
            down = fun(params)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_rel_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a).ravel(), np.asarray(n).ravel()
        for x, y in zip(a, n):
            worst = max(worst, abs(x - y) / max(1.0, abs(x) + abs(y)))
    return worst


def knn_graph_loops(x, k, h):
    """Weights of the locally scaled k-nn graph, built pair by pair."""
    n = len(x)
    dist = [[math.dist(x[i], x[j]) for j in range(n)] for i in range(n)]
    neigh = []
    for i in range(n):
        others = sorted((dist[i][j], j) for j in range(n) if j != i)
        neigh.append([j for _, j in others[:k]])
    sigma = [max(dist[i][neigh[i][h - 1]], 1e-8) for i in range(n)]
    v = np.zeros((n, n))
    for i in range(n):
        for j in neigh[i]:
            w = math.exp(-dist[i][j] ** 2 / (sigma[i] * sigma[j]))
            v[i, j] = max(v[i, j], w)
            v[j, i] = max(v[j, i], w)
    return v


def smoothness_pairs(y, v):
    """Half the weighted sum of squared differences of degree-scaled scores."""
    d = v.sum(axis=1)
    total = 0.0
    n = len(v)
    for s in range(y.shape[1]):
        for i in range(n):
            for j in range(n):
                if v[i, j] == 0:
                    continue
                diff = y[i, s] / math.sqrt(d[i]) - y[j, s] / math.sqrt(d[j])
                total += 0.5 * v[i, j] * diff * diff
    return total


def f1_counts(pred, truth):
    tp = sum(1 for p, t in zip(pred, truth) if p == 1 and t == 1)
    fp = sum(1 for p, t in zip(pred, truth) if p == 1 and t == -1)
    fn = sum(1 for p, t in zip(pred, truth) if p == -1 and t == 1)
    if tp == fp == fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)
