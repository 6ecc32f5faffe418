"""Distances between point clouds and the reference densities used in checks."""
from __future__ import annotations

import numpy as np
from scipy import stats
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from .errors import InputError

EXACT_W1_MAX_POINTS = 512


def _cloud(points, weights):
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise InputError("empty point cloud")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite coordinates")
    if weights is None:
        w = np.full(len(x), 1.0 / len(x))
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(x),) or np.any(w < 0):
            raise InputError("weights must be nonnegative, one per point")
        w = w / w.sum()
    return x, w


def exact_w1(a, b, wa=None, wb=None):
    """Wasserstein-1 with Euclidean ground cost via the transportation LP.

    Points may live in a product space (e.g. atoms of a coupling written as
    concatenated ``(x, y)`` pairs); the ground cost is then the Euclidean norm
    in the concatenated coordinates.
    """
    x, u = _cloud(a, wa)
    y, v = _cloud(b, wb)
    if x.shape[1] != y.shape[1]:
        raise InputError("point clouds have different dimensions")
    if len(x) + len(y) > EXACT_W1_MAX_POINTS:
        raise InputError(f"exact_w1 is limited to {EXACT_W1_MAX_POINTS} points; use sliced_w1")
    # drop zero-mass atoms, they only enlarge the LP
    x, u = x[u > 0], u[u > 0]
    y, v = y[v > 0], v[v > 0]
    C = cdist(x, y)
    m, n = C.shape
    if m == 1 or n == 1:
        return float(np.sum(C * np.outer(u, v)))
    rows = np.zeros((m + n, m * n))
    for i in range(m):
        rows[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        rows[m + j, j::n] = 1.0
    rhs = np.concatenate([u, v])
    # one equality is redundant (both marginals have unit mass)
    res = linprog(C.ravel(), A_eq=rows[:-1], b_eq=rhs[:-1], bounds=(0, None), method="highs")
    if res.status != 0:
        raise ArithmeticError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))


def _w1_1d(x, u, y, v):
    vals = np.concatenate([x, y])
    order = np.argsort(vals, kind="mergesort")
    vals = vals[order]
    mass = np.concatenate([u, -v])[order]
    cdf_diff = np.cumsum(mass)[:-1]
    return float(np.sum(np.abs(cdf_diff) * np.diff(vals)))


def sliced_w1(a, b, n_projections=128, seed=0, wa=None, wb=None):
    """Mean 1D Wasserstein-1 over random unit directions."""
    x, u = _cloud(a, wa)
    y, v = _cloud(b, wb)
    d = x.shape[1]
    if d != y.shape[1]:
        raise InputError("point clouds have different dimensions")
    if d == 1:
        return _w1_1d(x[:, 0], u, y[:, 0], v)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    px = x @ dirs.T
    py = y @ dirs.T
    return float(np.mean([_w1_1d(px[:, k], u, py[:, k], v) for k in range(n_projections)]))


def ks_statistic(samples, reference):
    """Kolmogorov-Smirnov distance to a cdf callable or to a second sample."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size == 0:
        raise InputError("empty sample")
    if callable(reference):
        return float(stats.kstest(s, reference).statistic)
    r = np.asarray(reference, dtype=float).ravel()
    if r.size == 0:
        raise InputError("empty reference sample")
    return float(stats.ks_2samp(s, r).statistic)


def truncated_gaussian_density(x, interval=(-1.0, 1.0), mean=0.0, scale=1.0):
    lo, hi = interval
    x = np.asarray(x, dtype=float)
    z = stats.norm.cdf(hi, mean, scale) - stats.norm.cdf(lo, mean, scale)
    p = stats.norm.pdf(x, mean, scale) / z
    return np.where((x >= lo) & (x <= hi), p, 0.0)


def truncated_gaussian_cdf(x, interval=(-1.0, 1.0), mean=0.0, scale=1.0):
    lo, hi = interval
    x = np.clip(np.asarray(x, dtype=float), lo, hi)
    a = stats.norm.cdf(lo, mean, scale)
    z = stats.norm.cdf(hi, mean, scale) - a
    return (stats.norm.cdf(x, mean, scale) - a) / z


def l1_hist_distance(samples, density=None, bins=40, range=None, cdf=None):
    """Sum over bins of |empirical bin mass - reference bin mass|.

    Reference bin masses come from ``cdf`` when given, otherwise from a
    composite Simpson rule on ``density``.
    """
    s = np.asarray(samples, dtype=float).ravel()
    if s.size == 0:
        raise InputError("empty sample")
    if density is None and cdf is None:
        raise InputError("need a density or a cdf")
    counts, edges = np.histogram(s, bins=bins, range=range)
    emp = counts / s.size
    if cdf is not None:
        ref = np.diff(cdf(edges))
    else:
        k = 16
        ref = np.empty(len(edges) - 1)
        for i in np.arange(len(ref)):
            grid = np.linspace(edges[i], edges[i + 1], 2 * k + 1)
            w = np.ones(2 * k + 1)
            w[1:-1:2] = 4.0
            w[2:-1:2] = 2.0
            ref[i] = (edges[i + 1] - edges[i]) / (6 * k) * np.sum(w * density(grid))
    return float(np.abs(emp - ref).sum())
