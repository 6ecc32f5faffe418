"""Bounded domains: membership, boundary search, inward normals and reflection.

Every query accepts either a single point of shape ``(d,)`` or a batch of
shape ``(n, d)`` and answers in the same form.  Domains are immutable once
built, so one instance can be shared by any number of simulations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateSegmentError,
    GeometryError,
    InputError,
    SingularityError,
    ToleranceError,
)

log = logging.getLogger(__name__)

BISECTION_MAX_ITERS = 60
BISECTION_REL_TOL = 1e-10
MAX_FOLDS = 16
CURVE_SEGMENTS = 2048
NORMAL_FD_STEP = 1e-6


def _as_batch(x, dim=None):
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
        single = True
    elif single:
        arr = arr[None, :]
    if dim is not None and arr.shape[1] != dim:
        raise InputError(f"expected points of dimension {dim}, got {arr.shape[1]}")
    return arr, single


def _unbatch(arr, single):
    return arr[0] if single else arr


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite coordinates")


class Domain:
    """Base class.  Subclasses implement ``_contains`` and ``_normal`` on batches."""

    kind = "abstract"

    def __init__(self, dim: int, witness, bounding_radius: float):
        self.dim = int(dim)
        self.witness = np.asarray(witness, dtype=float).reshape(self.dim)
        self.bounding_radius = float(bounding_radius)

    # -- membership -------------------------------------------------------
    def contains(self, x):
        pts, single = _as_batch(x, self.dim)
        _check_finite(pts)
        res = self._contains(pts)
        return bool(res[0]) if single else res

    def _contains(self, pts):
        raise NotImplementedError

    # -- boundary search --------------------------------------------------
    def boundary_intersect(self, x_in, x_out, tol=None):
        """Locate the boundary crossing on the segment ``x_in -> x_out``.

        Returns ``(b, eta)`` with ``b = eta * x_in + (1 - eta) * x_out``.  The
        returned point is always on the inside-closure side of the crossing.
        """
        a, single = _as_batch(x_in, self.dim)
        z, _ = _as_batch(x_out, self.dim)
        _check_finite(a)
        _check_finite(z)
        b, eta = self._intersect(a, z, tol)
        if single:
            return b[0], float(eta[0])
        return b, eta

    def _intersect(self, a, z, tol=None):
        return self._bisect(a, z, tol)

    def _bisect(self, a, z, tol=None, max_iters=BISECTION_MAX_ITERS):
        seg = z - a
        length = np.linalg.norm(seg, axis=1)
        if np.any(length == 0.0):
            raise DegenerateSegmentError("segment endpoints coincide")
        rel = BISECTION_REL_TOL if tol is None else float(tol)
        lo = np.zeros(len(a))
        hi = np.ones(len(a))
        for _ in range(max_iters):
            if np.all(hi - lo <= rel):
                break
            mid = 0.5 * (lo + hi)
            inside = self._contains(a + mid[:, None] * seg)
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        if np.any(hi - lo > rel):
            raise ToleranceError("boundary bisection did not reach tolerance")
        b = a + lo[:, None] * seg
        return b, 1.0 - lo

    # -- normals ----------------------------------------------------------
    def inward_normal(self, b):
        pts, single = _as_batch(b, self.dim)
        _check_finite(pts)
        n = self._normal(pts)
        return _unbatch(n, single)

    def _normal(self, pts):
        raise NotImplementedError

    # -- reflection -------------------------------------------------------
    def reflect_step(self, x_prev, x_prop):
        """One step of the practical reflection operator (fold across the boundary)."""
        a, single = _as_batch(x_prev, self.dim)
        z, _ = _as_batch(x_prop, self.dim)
        _check_finite(z)
        out = self.fold(a, z, mode="reflect")
        return _unbatch(out.x, single)

    def project_step(self, x_prev, x_prop):
        """Like ``reflect_step`` but removes the normal overshoot instead of mirroring it."""
        a, single = _as_batch(x_prev, self.dim)
        z, _ = _as_batch(x_prop, self.dim)
        _check_finite(z)
        out = self.fold(a, z, mode="project")
        return _unbatch(out.x, single)

    def fold(self, x_prev, x_prop, mode="reflect", max_folds=MAX_FOLDS):
        """Batched reflection returning the full bookkeeping (see :class:`FoldResult`)."""
        x = np.array(x_prop, dtype=float, copy=True)
        n, d = x.shape
        anchor = np.array(x_prev, dtype=float, copy=True)
        outside = ~self._contains(x)
        hit = outside.copy()
        bpts = np.full((n, d), np.nan)
        normals = np.full((n, d), np.nan)
        for _ in range(max_folds):
            idx = np.flatnonzero(outside)
            if idx.size == 0:
                break
            b, _ = self._intersect(anchor[idx], x[idx])
            nrm = self._fold_normal(b, anchor[idx], x[idx])
            nu = x[idx] - b
            dot = np.einsum("ij,ij->i", nu, nrm)
            if mode == "reflect":
                new = b + nu - 2.0 * dot[:, None] * nrm
            else:
                new = b + nu - dot[:, None] * nrm
            # proposal not beyond the tangent plane: keep the snapped boundary point
            graze = dot >= 0.0
            new[graze] = b[graze]
            bpts[idx] = b
            normals[idx] = nrm
            anchor[idx] = b
            x[idx] = new
            outside[idx] = ~self._contains(new)
        n_fallback = int(outside.sum())
        if n_fallback:
            log.info("reflection fold cap reached for %d point(s); using boundary point", n_fallback)
            x[outside] = anchor[outside]
        return FoldResult(x=x, hit=hit, boundary_points=bpts, normals=normals,
                          correction=x - np.asarray(x_prop, dtype=float),
                          n_fallback=n_fallback)

    def _fold_normal(self, b, a, z):
        """Normal used to fold the segment ``a -> z`` at its boundary point ``b``."""
        return self._normal(b)

    # -- misc -------------------------------------------------------------
    def bounding_box(self):
        r = self.bounding_radius
        return -r * np.ones(self.dim), r * np.ones(self.dim)

    def sample_uniform(self, n, rng, max_rounds=1000):
        lo, hi = self.bounding_box()
        out = np.empty((0, self.dim))
        for _ in range(max_rounds):
            if len(out) >= n:
                break
            cand = rng.uniform(lo, hi, size=(max(2 * (n - len(out)), 64), self.dim))
            out = np.vstack([out, cand[self._contains(cand)]])
        if len(out) < n:
            raise GeometryError("rejection sampling budget exhausted")
        return out[:n]

    def volume(self):
        raise NotImplementedError

    def diameter(self):
        return 2.0 * self.bounding_radius

    def boundary_samples(self, n, rng):
        """Points on the boundary, used by property tests."""
        raise NotImplementedError


@dataclass
class FoldResult:
    x: np.ndarray
    hit: np.ndarray
    boundary_points: np.ndarray
    normals: np.ndarray
    correction: np.ndarray
    n_fallback: int = 0


class Hypercube(Domain):
    kind = "hypercube"

    def __init__(self, lower, upper):
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise InputError("hypercube needs lower < upper on every axis")
        self.lower, self.upper = lo, hi
        mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                       np.where(np.isfinite(lo), lo + 1.0, hi - 1.0))
        corner = np.maximum(np.abs(lo), np.abs(hi))
        super().__init__(len(lo), mid, float(np.linalg.norm(corner)))
        span = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
        self._face_tol = 1e-9 * span

    def _contains(self, pts):
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)

    def _exit_face(self, a, seg):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            th_hi = np.where(seg > 0, (self.upper - a) / seg, np.inf)
            th_lo = np.where(seg < 0, (self.lower - a) / seg, np.inf)
        th = np.minimum(th_hi, th_lo)
        return th_hi, th_lo, th, np.argmin(th, axis=1)

    def _intersect(self, a, z, tol=None):
        seg = z - a
        if np.any(np.all(seg == 0.0, axis=1)):
            raise DegenerateSegmentError("segment endpoints coincide")
        th_hi, th_lo, th, axis = self._exit_face(a, seg)
        theta = np.clip(th[np.arange(len(a)), axis], 0.0, 1.0)
        b = a + theta[:, None] * seg
        rows = np.arange(len(a))
        upper_face = th_hi[rows, axis] <= th_lo[rows, axis]
        b[rows, axis] = np.where(upper_face, self.upper[axis], self.lower[axis])
        b = np.clip(b, self.lower, self.upper)
        return b, 1.0 - theta

    def _fold_normal(self, b, a, z):
        # the face the segment leaves through, which matters at edges and corners
        th_hi, th_lo, _, axis = self._exit_face(a, z - a)
        rows = np.arange(len(a))
        n = np.zeros_like(b)
        n[rows, axis] = np.where(th_hi[rows, axis] <= th_lo[rows, axis], -1.0, 1.0)
        return n

    def _normal(self, pts):
        at_lo = np.abs(pts - self.lower) <= self._face_tol
        at_hi = np.abs(pts - self.upper) <= self._face_tol
        n = at_lo.astype(float) - at_hi.astype(float)
        norm = np.linalg.norm(n, axis=1)
        if np.any(norm == 0.0):
            raise GeometryError("point is not on the hypercube boundary")
        return n / norm[:, None]

    def bounding_box(self):
        return self.lower.copy(), self.upper.copy()

    def sample_uniform(self, n, rng, max_rounds=1000):
        if not np.all(np.isfinite(self.upper - self.lower)):
            raise GeometryError("cannot sample an unbounded box")
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def volume(self):
        return float(np.prod(self.upper - self.lower))

    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))

    def boundary_samples(self, n, rng):
        x = self.sample_uniform(n, rng)
        axis = rng.integers(0, self.dim, size=n)
        side = rng.integers(0, 2, size=n).astype(bool)
        rows = np.arange(n)
        x[rows, axis] = np.where(side, self.upper[axis], self.lower[axis])
        return x


class Ball(Domain):
    kind = "ball"

    def __init__(self, center, radius):
        c = np.atleast_1d(np.asarray(center, dtype=float))
        if radius <= 0:
            raise InputError("ball radius must be positive")
        self.center, self.radius = c, float(radius)
        super().__init__(len(c), c, (float(np.linalg.norm(c)) + self.radius) * (1.0 + 1e-9))

    def _contains(self, pts):
        return np.linalg.norm(pts - self.center, axis=1) <= self.radius * (1.0 + 1e-12)

    def _intersect(self, a, z, tol=None):
        seg = z - a
        ss = np.einsum("ij,ij->i", seg, seg)
        if np.any(ss == 0.0):
            raise DegenerateSegmentError("segment endpoints coincide")
        p = a - self.center
        bq = np.einsum("ij,ij->i", p, seg)
        cq = np.einsum("ij,ij->i", p, p) - self.radius**2
        disc = np.maximum(bq * bq - ss * cq, 0.0)
        theta = np.clip((-bq + np.sqrt(disc)) / ss, 0.0, 1.0)
        b = a + theta[:, None] * seg
        # snap onto the sphere from the inside
        r = b - self.center
        rn = np.linalg.norm(r, axis=1)
        over = rn > self.radius
        b[over] = self.center + r[over] * (self.radius / rn[over])[:, None]
        return b, 1.0 - theta

    def _normal(self, pts):
        r = self.center - pts
        rn = np.linalg.norm(r, axis=1)
        if np.any(np.abs(rn - self.radius) > 1e-6 * self.radius):
            raise GeometryError("point is not on the sphere")
        return r / rn[:, None]

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    def sample_uniform(self, n, rng, max_rounds=1000):
        g = rng.standard_normal((n, self.dim))
        g /= np.linalg.norm(g, axis=1)[:, None]
        r = rng.uniform(size=n) ** (1.0 / self.dim)
        return self.center + self.radius * r[:, None] * g

    def volume(self):
        d = self.dim
        return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * self.radius**d

    def diameter(self):
        return 2.0 * self.radius

    def boundary_samples(self, n, rng):
        g = rng.standard_normal((n, self.dim))
        return self.center + self.radius * g / np.linalg.norm(g, axis=1)[:, None]


class Polytope(Domain):
    """Convex polytope ``{x : A x <= c}`` with exact ray intersection."""

    kind = "polytope"

    def __init__(self, A, c, witness, bounding_radius):
        self.A = np.asarray(A, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self._row_norm = np.linalg.norm(self.A, axis=1)
        super().__init__(self.A.shape[1], witness, bounding_radius)
        self._tol = 1e-12

    def _slack(self, pts):
        return (self.c - pts @ self.A.T) / self._row_norm

    def _contains(self, pts):
        return np.all(self._slack(pts) >= -self._tol, axis=1)

    def _intersect(self, a, z, tol=None):
        seg = z - a
        if np.any(np.all(seg == 0.0, axis=1)):
            raise DegenerateSegmentError("segment endpoints coincide")
        rate = seg @ self.A.T
        room = self.c - a @ self.A.T
        with np.errstate(divide="ignore", invalid="ignore"):
            th = np.where(rate > 0, room / rate, np.inf)
        theta = np.clip(th.min(axis=1), 0.0, 1.0)
        return a + theta[:, None] * seg, 1.0 - theta

    def _normal(self, pts):
        active = np.abs(self._slack(pts)) <= 1e-9
        n = -(active.astype(float) @ (self.A / self._row_norm[:, None]))
        norm = np.linalg.norm(n, axis=1)
        if np.any(norm == 0.0):
            raise GeometryError("point is not on the polytope boundary")
        return n / norm[:, None]


class ProjectedSimplex(Polytope):
    """``{x in R^d : x_i >= 0, sum_i x_i <= 1}``."""

    kind = "simplex"

    def __init__(self, dim):
        d = int(dim)
        A = np.vstack([-np.eye(d), np.ones((1, d))])
        c = np.concatenate([np.zeros(d), [1.0]])
        super().__init__(A, c, np.full(d, 1.0 / (d + 1)), 1.0)

    def sample_uniform(self, n, rng, max_rounds=1000):
        return rng.dirichlet(np.ones(self.dim + 1), size=n)[:, :-1]

    def bounding_box(self):
        return np.zeros(self.dim), np.ones(self.dim)

    def volume(self):
        return 1.0 / math.factorial(self.dim)

    def diameter(self):
        return math.sqrt(2.0) if self.dim > 1 else 1.0

    def boundary_samples(self, n, rng):
        x = self.sample_uniform(n, rng)
        face = rng.integers(0, self.dim + 1, size=n)
        for i in range(n):
            if face[i] == self.dim:
                x[i] /= x[i].sum()
            else:
                x[i, face[i]] = 0.0
        return x


# -- 2D parametric curves -------------------------------------------------

@dataclass(frozen=True)
class CurveParams:
    kind: str
    petals: int = 5
    move_out: float = 3.0
    vertices: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind == "flower" and self.move_out <= 1.0:
            raise InputError("flower move-out length must exceed 1")
        if self.kind == "octagon":
            v = np.asarray(self.vertices, dtype=float)
            if v.ndim != 2 or v.shape[1] != 2 or len(v) < 4:
                raise InputError("octagon needs at least 3 distinct vertices")
            if not np.allclose(v[0], v[-1]):
                raise InputError("octagon vertex list must be closed (last == first)")


def regular_polygon(n_sides=8, radius=1.0, phase=math.pi / 8):
    ang = phase + 2 * math.pi * np.arange(n_sides + 1) / n_sides
    v = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    v[-1] = v[0]
    return tuple(map(tuple, v))


def curve_point(params: CurveParams, t):
    """Evaluate a closed boundary curve at ``t`` in [0, 1]."""
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr < 0.0) | (t_arr > 1.0)) or not np.all(np.isfinite(t_arr)):
        raise InputError("curve parameter must lie in [0, 1]")
    return _curve_eval(params, t_arr)


def _curve_eval(params, t):
    tau = 2.0 * math.pi * t
    if params.kind == "flower":
        r = np.sin(tau * params.petals) + params.move_out
        xy = np.stack([r * np.cos(tau), r * np.sin(tau)], axis=-1)
    elif params.kind == "heart":
        x = 16.0 * np.sin(tau) ** 3
        y = 13.0 * np.cos(tau) - 5.0 * np.cos(2 * tau) - 2.0 * np.cos(3 * tau) - np.cos(4 * tau)
        xy = np.stack([x, y], axis=-1)
    elif params.kind == "octagon":
        v = np.asarray(params.vertices, dtype=float)
        c = len(v) - 1
        ct = c * t
        i = np.minimum(np.floor(ct).astype(int), c - 1)
        r = (ct - i)[..., None]
        xy = (1.0 - r) * v[i] + r * v[i + 1]
    else:
        raise InputError(f"unknown curve kind {params.kind!r}")
    return xy


class CurveDomain(Domain):
    """Interior of a closed planar curve, discretized as a polyline."""

    def __init__(self, params: CurveParams, witness=(0.0, 0.0), segments=CURVE_SEGMENTS, rows=8192):
        self.params = params
        self.kind = params.kind
        if params.kind == "octagon":
            verts = np.asarray(params.vertices, dtype=float)
            self._t_nodes = np.linspace(0.0, 1.0, len(verts))
        else:
            self._t_nodes = np.linspace(0.0, 1.0, int(segments) + 1)
            verts = _curve_eval(params, self._t_nodes)
            verts[-1] = verts[0]
        self.vertices = verts
        self._a = verts[:-1]
        self._b = verts[1:]
        dense = _curve_eval(params, np.linspace(0.0, 1.0, 16 * len(verts)))
        radius = float(np.max(np.linalg.norm(np.vstack([dense, verts]), axis=1)))
        super().__init__(2, witness, radius * (1.0 + 1e-9))
        self.scale = float(np.max(np.ptp(verts, axis=0)))
        self._on_tol = 1e-12 * self.scale
        t_mid = 0.5 * (self._t_nodes[:-1] + self._t_nodes[1:])
        self._chord_err = float(np.max(np.linalg.norm(
            _curve_eval(params, t_mid) - 0.5 * (self._a + self._b), axis=1)))
        self._normal_tol = 1e-6 * self.scale + 2.0 * self._chord_err
        area2 = np.sum(self._a[:, 0] * self._b[:, 1] - self._b[:, 0] * self._a[:, 1])
        self._area = 0.5 * abs(area2)
        self._orient = 1.0 if area2 > 0 else -1.0
        self._build_rows(rows)
        self._seg_tree = cKDTree(0.5 * (self._a + self._b))
        if not self._contains(self.witness[None])[0]:
            raise InputError("interior witness point is not inside the curve")

    def _build_rows(self, n_rows):
        # bucket segments by horizontal bands so a crossing test only touches a few of them
        ys = self.vertices[:, 1]
        pad = 1e-9 * self.scale
        self._y0 = float(ys.min()) - pad
        self._rh = (float(ys.max()) + pad - self._y0) / n_rows
        self._n_rows = n_rows
        ylo = np.minimum(self._a[:, 1], self._b[:, 1]) - pad
        yhi = np.maximum(self._a[:, 1], self._b[:, 1]) + pad
        r_lo = np.clip(np.floor((ylo - self._y0) / self._rh).astype(int), 0, n_rows - 1)
        r_hi = np.clip(np.floor((yhi - self._y0) / self._rh).astype(int), 0, n_rows - 1)
        counts = np.zeros(n_rows, dtype=int)
        for lo, hi in zip(r_lo, r_hi):
            counts[lo:hi + 1] += 1
        m = len(self._a)
        table = np.full((n_rows, max(1, counts.max())), m, dtype=int)
        fill = np.zeros(n_rows, dtype=int)
        for j, (lo, hi) in enumerate(zip(r_lo, r_hi)):
            for r in range(lo, hi + 1):
                table[r, fill[r]] = j
                fill[r] += 1
        self._row_table = table
        # sentinel segment (index m) never crosses and is infinitely far away
        self._sa = np.vstack([self._a, [np.nan, np.nan]])
        self._sb = np.vstack([self._b, [np.nan, np.nan]])
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = (self._sb[:, 0] - self._sa[:, 0]) / (self._sb[:, 1] - self._sa[:, 1])
        self._seg_tables = (self._sa[:, 0], self._sa[:, 1], self._sb[:, 1], slope,
                            np.minimum(self._sa, self._sb), np.maximum(self._sa, self._sb))

    def _contains(self, pts, chunk=20000):
        res = np.zeros(len(pts), dtype=bool)
        row = np.floor((pts[:, 1] - self._y0) / self._rh)
        ok = np.flatnonzero((row >= 0) & (row < self._n_rows))
        ax, ay, by, slope, lo, hi = self._seg_tables
        tol = self._on_tol
        for s in range(0, len(ok), chunk):
            idx = ok[s:s + chunk]
            seg = self._row_table[row[idx].astype(int)]
            px = pts[idx, 0:1]
            py = pts[idx, 1:2]
            sy, ey = ay[seg], by[seg]
            straddle = (sy <= py) != (ey <= py)
            with np.errstate(invalid="ignore"):
                xi = ax[seg] + (py - sy) * slope[seg]
            inside = (np.count_nonzero(straddle & (px < xi), axis=1) % 2) == 1
            # points outside by the crossing count may still lie on a segment
            near = ~inside
            if near.any():
                m = np.flatnonzero(near)
                sm = seg[m]
                q = pts[idx[m]]
                box = np.all((q[:, None, :] >= lo[sm] - tol) & (q[:, None, :] <= hi[sm] + tol), axis=2)
                m, sm, q = m[box.any(axis=1)], sm[box.any(axis=1)], q[box.any(axis=1)]
                if len(m):
                    a, b = self._sa[sm], self._sb[sm]
                    ab = b - a
                    ap = q[:, None, :] - a
                    ab2 = np.einsum("nkj,nkj->nk", ab, ab)
                    with np.errstate(divide="ignore", invalid="ignore"):
                        f = np.clip(np.einsum("nkj,nkj->nk", ap, ab) / np.where(ab2 > 0, ab2, 1.0), 0.0, 1.0)
                    d = np.linalg.norm(ap - f[..., None] * ab, axis=2)
                    inside[m] = np.nanmin(np.where(np.isnan(d), np.inf, d), axis=1) <= tol
            res[idx] = inside
        return res

    def _dist(self, pts, k=16):
        k = min(k, len(self._a))
        _, cand = self._seg_tree.query(pts, k=k)
        cand = cand.reshape(len(pts), k)
        a, b = self._a[cand], self._b[cand]
        ab = b - a
        ap = pts[:, None, :] - a
        ab2 = np.einsum("nkj,nkj->nk", ab, ab)
        f = np.clip(np.einsum("nkj,nkj->nk", ap, ab) / np.where(ab2 > 0, ab2, 1.0), 0.0, 1.0)
        d = np.linalg.norm(ap - f[..., None] * ab, axis=2)
        j = np.argmin(d, axis=1)
        rows = np.arange(len(pts))
        return d[rows, j], cand[rows, j], f[rows, j]

    def _normal(self, pts):
        d, seg, frac = self._dist(pts)
        if np.any(d > self._normal_tol):
            raise GeometryError("point is not on the curve boundary")
        n = np.empty_like(pts)
        todo = np.ones(len(pts), dtype=bool)
        if self.params.kind != "octagon":
            t = (self._t_nodes[seg] + frac * (self._t_nodes[seg + 1] - self._t_nodes[seg])) % 1.0
            h = NORMAL_FD_STEP
            tan = (_curve_eval(self.params, (t + h) % 1.0) - _curve_eval(self.params, (t - h) % 1.0)) / (2 * h)
            tn = np.linalg.norm(tan, axis=1)
            good = tn > 1e-9 * self.scale
            tan = tan[good] / tn[good, None]
            n[good] = self._orient * np.stack([-tan[:, 1], tan[:, 0]], axis=1)
            todo = ~good
        else:
            interior = (frac > 1e-9) & (frac < 1.0 - 1e-9)
            e = self._b[seg[interior]] - self._a[seg[interior]]
            e /= np.linalg.norm(e, axis=1)[:, None]
            n[interior] = self._orient * np.stack([-e[:, 1], e[:, 0]], axis=1)
            todo = ~interior
        for i in np.flatnonzero(todo):
            n[i] = self._vertex_normal(seg[i] + 1 if frac[i] >= 0.5 else seg[i])
        # near sharp tips the polyline is thinner than the curve normal suggests
        delta = 1e-9 * self.scale
        bad = np.flatnonzero(~self._contains(pts + delta * n))
        for i in bad:
            k = seg[i] + 1 if frac[i] >= 0.5 else seg[i]
            cand = self._vertex_normal(k)
            if not self._contains((pts[i] + delta * cand)[None])[0]:
                w = self.witness - pts[i]
                cand = w / np.linalg.norm(w)
            n[i] = cand
        return n

    def _rot_in(self, v):
        # inward side of a counter-clockwise curve is on the left of the tangent
        return self._orient * np.array([-v[1], v[0]])

    def _vertex_normal(self, k):
        """Normalized bisector of the inward normals of the two edges meeting at vertex ``k``."""
        m = len(self._a)
        prev_e = self._b[(k - 1) % m] - self._a[(k - 1) % m]
        next_e = self._b[k % m] - self._a[k % m]
        n = (self._rot_in(prev_e / np.linalg.norm(prev_e))
             + self._rot_in(next_e / np.linalg.norm(next_e)))
        nn = np.linalg.norm(n)
        if nn > 1e-12:
            return n / nn
        w = self.witness - self._a[k % m]
        return w / np.linalg.norm(w)

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def volume(self):
        return self._area

    def diameter(self):
        v = self.vertices
        d = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)
        return float(d.max())

    def boundary_samples(self, n, rng):
        # points on the polyline, which is the boundary the membership test sees
        seg = rng.integers(0, len(self._a), size=n)
        r = rng.uniform(size=n)[:, None]
        return (1.0 - r) * self._a[seg] + r * self._b[seg]


class MeshDomain(Domain):
    """Approximate checker: a point is inside if it is near a cached interior grid node."""

    kind = "mesh"

    def __init__(self, base: Domain, resolution=200):
        lo, hi = base.bounding_box()
        self.base = base
        self.h = float(np.max(hi - lo)) / int(resolution)
        axes = [np.arange(l - self.h, u + 1.5 * self.h, self.h) for l, u in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, base.dim)
        self.nodes = grid[base._contains(grid)]
        if len(self.nodes) == 0:
            raise InputError("mesh resolution too coarse: no interior nodes")
        self.threshold = 1.5 * self.h * math.sqrt(base.dim)
        self._tree = cKDTree(self.nodes)
        super().__init__(base.dim, base.witness, base.bounding_radius + self.threshold)
        self._vol = None

    def _contains(self, pts):
        d, _ = self._tree.query(pts, k=1)
        return d <= self.threshold

    def _normal(self, pts):
        n = np.empty_like(pts)
        for i, p in enumerate(pts):
            d, _ = self._tree.query(p, k=1)
            if abs(d - self.threshold) > 0.5 * self.threshold:
                raise GeometryError("point is not on the cached boundary")
            idx = self._tree.query_ball_point(p, 3.0 * self.threshold)
            v = self.nodes[idx].mean(axis=0) - p
            n[i] = v / np.linalg.norm(v)
        return n

    def bounding_box(self):
        lo, hi = self.base.bounding_box()
        return lo - self.threshold, hi + self.threshold

    def volume(self, n_samples=1_000_000, seed=0):
        if self._vol is None:
            rng = np.random.default_rng(seed)
            lo, hi = self.bounding_box()
            box = float(np.prod(hi - lo))
            hits = self._contains(rng.uniform(lo, hi, size=(n_samples, self.dim)))
            p = hits.mean()
            self._vol = (box * p, box * math.sqrt(p * (1 - p) / n_samples))
        return self._vol[0]

    def volume_stderr(self):
        self.volume()
        return self._vol[1]

    def boundary_samples(self, n, rng):
        out = np.empty((n, self.dim))
        x_in = np.repeat(self.witness[None], n, axis=0)
        g = rng.standard_normal((n, self.dim))
        g /= np.linalg.norm(g, axis=1)[:, None]
        x_out = x_in + 2.5 * self.bounding_radius * g
        out[:], _ = self._bisect(x_in, x_out)
        return out


# -- stick breaking -------------------------------------------------------

def stick_breaking(x):
    """Map ``[0, 1)^d`` into the projected simplex: ``y_i = x_i * prod_{j>i} (1 - x_j)``."""
    x = np.asarray(x, dtype=float)
    if np.any((x < 0.0) | (x >= 1.0)):
        raise InputError("stick-breaking input must lie in [0, 1)")
    one_minus = 1.0 - x
    tail = np.cumprod(one_minus[..., ::-1], axis=-1)[..., ::-1]
    tail = np.concatenate([tail[..., 1:], np.ones_like(tail[..., :1])], axis=-1)
    return x * tail


def stick_breaking_inverse(y, floor=1e-12):
    y = np.asarray(y, dtype=float)
    tail = np.cumsum(y[..., ::-1], axis=-1)[..., ::-1]
    tail = np.concatenate([tail[..., 1:], np.zeros_like(tail[..., :1])], axis=-1)
    denom = 1.0 - tail
    if np.any(denom < floor):
        raise SingularityError("stick-breaking inverse denominator underflow")
    return y / denom


# -- construction from config ---------------------------------------------

def make_domain(spec) -> Domain:
    """Build a domain from a config mapping with a ``kind`` key."""
    spec = dict(spec)
    kind = spec.pop("kind")
    allowed = {
        "hypercube": {"lower", "upper", "dim"},
        "ball": {"center", "radius", "dim"},
        "flower": {"petals", "move_out"},
        "heart": set(),
        "octagon": {"vertices", "radius"},
        "simplex": {"dim"},
        "mesh": {"base", "resolution"},
    }
    if kind not in allowed:
        raise InputError(f"unknown domain kind {kind!r}")
    extra = set(spec) - allowed[kind]
    if extra:
        raise InputError(f"unknown keys for domain {kind!r}: {sorted(extra)}")
    if kind == "hypercube":
        dim = int(spec.get("dim", 1))
        lower = spec.get("lower", [0.0] * dim)
        upper = spec.get("upper", [1.0] * dim)
        if np.isscalar(lower):
            lower = [lower] * dim
        if np.isscalar(upper):
            upper = [upper] * dim
        return Hypercube(lower, upper)
    if kind == "ball":
        dim = int(spec.get("dim", 2))
        return Ball(spec.get("center", [0.0] * dim), spec.get("radius", 1.0))
    if kind == "flower":
        return CurveDomain(CurveParams("flower", petals=int(spec.get("petals", 5)),
                                       move_out=float(spec.get("move_out", 3.0))))
    if kind == "heart":
        return CurveDomain(CurveParams("heart"))
    if kind == "octagon":
        verts = spec.get("vertices")
        if verts is None:
            verts = regular_polygon(8, float(spec.get("radius", 1.0)))
        return CurveDomain(CurveParams("octagon", vertices=tuple(map(tuple, verts))))
    if kind == "simplex":
        return ProjectedSimplex(int(spec.get("dim", 2)))
    base = make_domain(spec.get("base", {"kind": "heart"}))
    return MeshDomain(base, int(spec.get("resolution", 200)))
