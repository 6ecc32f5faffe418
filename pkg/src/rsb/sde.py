"""Reflected forward/backward SDE simulation, Skorokhod decomposition and the probability-flow ODE.

Score arguments are callables ``score(x, t) -> (n, d)`` giving the gradient of a
log-potential (the forward one for ``simulate_forward_reflected``, the backward
one for ``simulate_backward_reflected``).  ``None`` means the zero field.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .domains import Domain, _as_batch
from .errors import InputError

log = logging.getLogger(__name__)

TRAJ_MAGIC = b"RSBTRAJ1"

# RNG stream tags, so forward, backward and corrector noise never overlap
STREAM_FORWARD = 1
STREAM_BACKWARD = 2
STREAM_CORRECTOR = 3
STREAM_PROBES = 4


def step_normals(seed, stream, step, n, d):
    """Standard normals for one step; row i depends only on (seed, stream, step, i)."""
    ss = np.random.SeedSequence([int(seed), int(stream), int(step)])
    return np.random.Generator(np.random.Philox(ss)).standard_normal((n, d))


@dataclass(frozen=True)
class TimeGrid:
    T: float = 1.0
    n_steps: int = 100

    def __post_init__(self):
        if not (self.T > 0) or int(self.n_steps) < 1:
            raise InputError("time grid needs T > 0 and at least one step")

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def timestamps(self):
        return np.linspace(0.0, self.T, int(self.n_steps) + 1)


@dataclass
class DriftSpec:
    """Reference drift ``f`` and scalar diffusion ``g`` of the reflected SDE.

    The noise enters as ``sqrt(2 eps) g dW``.  For ``rvp``/``rve`` the schedule is
    expressed in normalized time ``s = t / T``.
    """

    kind: str = "rve"
    epsilon: float = 0.5
    T: float = 1.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    sigma_min: float = 0.01
    sigma_max: float = 5.0
    g0: float = 1.0
    custom_f: Optional[Callable] = field(default=None, repr=False)
    custom_g: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("rvp", "rve", "reflected-ou", "custom"):
            raise InputError(f"unknown drift kind {self.kind!r}")
        if self.epsilon < 0 or (self.epsilon == 0 and self.kind != "custom"):
            raise InputError("epsilon must be positive")
        if self.kind == "rve" and not (0 < self.sigma_min < self.sigma_max):
            raise InputError("rve needs 0 < sigma_min < sigma_max")

    def beta(self, t):
        s = np.asarray(t, dtype=float) / self.T
        return self.beta_min + s * (self.beta_max - self.beta_min)

    def g(self, t):
        if self.kind == "rvp":
            return np.sqrt(self.beta(t) / (2.0 * self.epsilon))
        if self.kind == "rve":
            s = np.asarray(t, dtype=float) / self.T
            ratio = self.sigma_max / self.sigma_min
            sig = self.sigma_min * ratio**s
            return sig * math.sqrt(2.0 * math.log(ratio) / self.T) / math.sqrt(2.0 * self.epsilon)
        if self.kind == "custom" and self.custom_g is not None:
            return self.custom_g(t)
        return np.asarray(self.g0, dtype=float) + 0.0 * np.asarray(t, dtype=float)

    def f(self, x, t):
        if self.kind == "rvp":
            return -0.5 * self.beta(t) * x
        if self.kind == "rve":
            return np.zeros_like(x)
        if self.kind == "reflected-ou":
            # invariant law exp(-|x|^2 / 2) restricted to the domain
            return -self.epsilon * self.g(t) ** 2 * x
        if self.custom_f is not None:
            return self.custom_f(x, t)
        return np.zeros_like(x)

    def noise_scale(self, t):
        return math.sqrt(2.0 * self.epsilon) * float(self.g(t))

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("kind", "epsilon", "T", "beta_min", "beta_max", "sigma_min", "sigma_max", "g0")}


@dataclass
class Trajectories:
    """Batch of reflected paths stored as arrays, ``states[:, k]`` at ``times[k]``.

    Per-interval arrays (``dL``, ``hit``, ...) have one entry per step; for a
    backward run interval ``k`` is the step between ``t_k`` and ``t_{k+1}``.
    With terminal-only storage ``states`` holds just the start and end points.
    """

    states: np.ndarray
    times: np.ndarray
    direction: str
    dL: Optional[np.ndarray] = None
    dL_normal: Optional[np.ndarray] = None
    hit: Optional[np.ndarray] = None
    correction: Optional[np.ndarray] = None
    hit_point: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    n_fallback: int = 0
    full: bool = True

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def dim(self):
        return self.states.shape[2]

    @property
    def initial(self):
        return self.states[:, 0] if self.direction == "forward" else self.states[:, -1]

    @property
    def terminal(self):
        return self.states[:, -1] if self.direction == "forward" else self.states[:, 0]

    def hit_fraction(self):
        return float(self.hit.mean()) if self.hit is not None and self.hit.size else 0.0


def _zero_score(x, t):
    return np.zeros_like(x)


def euler_proposal(drift, score, x, t, dt, xi, direction="forward"):
    """Unreflected Euler-Maruyama proposal for one step of size ``dt`` away from time ``t``.

    Forward drift is ``f + 2 eps g^2 score``; backward steps run time in reverse
    with drift ``-(f - 2 eps g^2 score)``.
    """
    score = score or _zero_score
    g = float(drift.g(t))
    sgn = 1.0 if direction == "forward" else -1.0
    mean = sgn * drift.f(x, t) + 2.0 * drift.epsilon * g * g * score(x, t)
    return x + mean * dt + math.sqrt(2.0 * drift.epsilon) * g * math.sqrt(dt) * xi


def _simulate(drift, score, x_start, grid, domain, seed, direction, store):
    x, _ = _as_batch(x_start, domain.dim)
    x = x.copy()
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite starting points")
    if not np.all(domain._contains(x)):
        raise InputError("starting points must lie in the closed domain")
    score = score or _zero_score
    P, d = x.shape
    n = int(grid.n_steps)
    dt = grid.dt
    ts = grid.timestamps
    full = store == "full"
    if full:
        states = np.empty((P, n + 1, d))
        corr = np.zeros((P, n, d))
        hpt = np.full((P, n, d), np.nan)
        nrm = np.full((P, n, d), np.nan)
        hit = np.zeros((P, n), dtype=bool)
        dL = np.zeros((P, n))
    else:
        states = np.empty((P, 2, d))
        dL = np.zeros((P, 1))
        hit = np.zeros((P, 1), dtype=bool)
    stream = STREAM_FORWARD if direction == "forward" else STREAM_BACKWARD
    order = range(n) if direction == "forward" else range(n, 0, -1)
    k0 = 0 if direction == "forward" else (n if full else 1)
    states[:, k0] = x
    n_fallback = 0
    for count, k in enumerate(order):
        xi = step_normals(seed, stream, count, P, d)
        prop = euler_proposal(drift, score, x, ts[k], dt, xi, direction)
        out = domain.fold(x, prop, mode="reflect")
        n_fallback += out.n_fallback
        x = out.x
        inc = np.linalg.norm(out.correction, axis=1)
        if full:
            j = k if direction == "forward" else k - 1
            states[:, j + (1 if direction == "forward" else 0)] = x
            dL[:, j] = inc
            hit[:, j] = out.hit
            corr[:, j] = out.correction
            hpt[out.hit, j] = out.boundary_points[out.hit]
            nrm[out.hit, j] = out.normals[out.hit]
        else:
            dL[:, 0] += inc
            hit[:, 0] |= out.hit
    if not full:
        states[:, 1 if direction == "forward" else 0] = x
        times = np.array([0.0, grid.T])
        return Trajectories(states, times, direction, dL=dL, hit=hit,
                            n_fallback=n_fallback, full=False)
    dL_normal = np.where(hit, np.einsum("pkd,pkd->pk", corr, np.nan_to_num(nrm)), 0.0)
    if n_fallback:
        log.warning("%d reflection fallback event(s) during %s simulation", n_fallback, direction)
    return Trajectories(states, ts, direction, dL=dL, dL_normal=dL_normal, hit=hit,
                        correction=corr, hit_point=hpt, normal=nrm, n_fallback=n_fallback)


def simulate_forward_reflected(drift: DriftSpec, score, x0, grid: TimeGrid, domain: Domain,
                               seed=0, store="full") -> Trajectories:
    """Euler-Maruyama with reflection, from t=0 to T."""
    return _simulate(drift, score, x0, grid, domain, seed, "forward", store)


def simulate_backward_reflected(drift: DriftSpec, score, xT, grid: TimeGrid, domain: Domain,
                                seed=0, store="full") -> Trajectories:
    """Euler-Maruyama with reflection, from t=T down to 0.  States are returned in time order."""
    return _simulate(drift, score, xT, grid, domain, seed, "backward", store)


def skorokhod_decompose(path, domain: Domain):
    """Split a free path ``w`` into a confined path ``y`` and its cumulative correction ``L``.

    Uses the projection form of the reflection map so that ``y = w + L`` and ``L``
    only grows while ``y`` sits on the boundary.  In one dimension on ``[0, inf)``
    this is the running-minimum solution.  Accepts ``(n+1, d)`` or ``(P, n+1, d)``.
    """
    w = np.asarray(path, dtype=float)
    single = w.ndim == 2
    if w.ndim == 1:
        w = w[:, None]
        single = True
    if single:
        w = w[None]
    if not np.all(np.isfinite(w)):
        raise InputError("non-finite path")
    if not np.all(domain._contains(w[:, 0])):
        raise InputError("path must start inside the domain")
    y = np.empty_like(w)
    L = np.zeros_like(w)
    ell = np.zeros(w.shape[:2])
    y[:, 0] = w[:, 0]
    for k in range(w.shape[1] - 1):
        prop = y[:, k] + (w[:, k + 1] - w[:, k])
        out = domain.fold(y[:, k], prop, mode="project")
        y[:, k + 1] = out.x
        L[:, k + 1] = L[:, k] + out.correction
        ell[:, k + 1] = ell[:, k] + np.linalg.norm(out.correction, axis=1)
    if single:
        return y[0], L[0], ell[0]
    return y, L, ell


def flow_drift(drift: DriftSpec, score_fwd, score_bwd):
    """Probability-flow velocity ``f + eps g^2 (grad log psi - grad log phi)``."""
    sf = score_fwd or _zero_score
    sb = score_bwd or _zero_score

    def velocity(x, t):
        g = float(drift.g(t))
        return drift.f(x, t) + drift.epsilon * g * g * (sf(x, t) - sb(x, t))

    return velocity


def probability_flow_integrate(drift: DriftSpec, score_fwd, score_bwd, x, grid: TimeGrid,
                               domain: Domain, method="rk4", divergence=None):
    """Integrate the probability-flow ODE from 0 to T.

    ``divergence`` is an optional callable ``(velocity, x, t) -> (n,)``; when given,
    the integral of the velocity divergence along each path is accumulated with
    the same scheme and returned as the third element.
    Returns ``(Trajectories, guard_events, div_integral)``.
    """
    if method not in ("rk4", "euler"):
        raise InputError(f"unknown integrator {method!r}")
    x, _ = _as_batch(x, domain.dim)
    x = x.copy()
    if not np.all(domain._contains(x)):
        raise InputError("starting points must lie in the closed domain")
    v = flow_drift(drift, score_fwd, score_bwd)
    ts = grid.timestamps
    dt = grid.dt
    P, d = x.shape
    states = np.empty((P, len(ts), d))
    states[:, 0] = x
    guard = np.zeros(P, dtype=int)
    div_int = np.zeros(P)
    for k in range(grid.n_steps):
        t = ts[k]
        if method == "euler":
            x_new = x + dt * v(x, t)
            if divergence is not None:
                div_int += dt * divergence(v, x, t)
        else:
            k1 = v(x, t)
            x2 = x + 0.5 * dt * k1
            k2 = v(x2, t + 0.5 * dt)
            x3 = x + 0.5 * dt * k2
            k3 = v(x3, t + 0.5 * dt)
            x4 = x + dt * k3
            k4 = v(x4, t + dt)
            x_new = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if divergence is not None:
                div_int += dt / 6.0 * (divergence(v, x, t) + 2 * divergence(v, x2, t + 0.5 * dt)
                                       + 2 * divergence(v, x3, t + 0.5 * dt) + divergence(v, x4, t + dt))
        out = domain.fold(x, x_new, mode="reflect")
        guard += out.hit
        x = out.x
        states[:, k + 1] = x
    if guard.any():
        log.info("probability-flow guard reflections: %d", int(guard.sum()))
    traj = Trajectories(states, ts, "forward", hit=None, full=True)
    return traj, guard, div_int


# -- export ---------------------------------------------------------------

def write_csv(traj: Trajectories, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = traj.dim
        w.writerow(["path_id", "step", "t"] + [f"x_{i + 1}" for i in range(d)] + ["dL"])
        n = traj.n_steps
        for p in range(traj.n_paths):
            for k in range(n + 1):
                # dL on a row is the increment of the step that led into that state
                if traj.direction == "forward":
                    inc = traj.dL[p, k - 1] if k > 0 and traj.full else 0.0
                else:
                    inc = traj.dL[p, k] if k < n and traj.full else 0.0
                w.writerow([p, k, repr(float(traj.times[k]))]
                           + [repr(float(v)) for v in traj.states[p, k]] + [repr(float(inc))])


def write_binary(traj: Trajectories, path):
    """Header: magic ``RSBTRAJ1``, little-endian uint64 n_paths, n_steps, dim.

    Body (little-endian f64): timestamps ``(n_steps+1)``, states
    ``(n_paths, n_steps+1, dim)``, local-time increments ``(n_paths, n_steps)``.
    """
    P, n, d = traj.n_paths, traj.n_steps, traj.dim
    dL = traj.dL if traj.full else np.zeros((P, n))
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(struct.pack("<QQQ", P, n, d))
        fh.write(np.asarray(traj.times, dtype="<f8").tobytes())
        fh.write(np.asarray(traj.states, dtype="<f8").tobytes())
        fh.write(np.asarray(dL, dtype="<f8").tobytes())


def read_binary(path):
    with open(path, "rb") as fh:
        if fh.read(8) != TRAJ_MAGIC:
            raise InputError("not a trajectory file")
        P, n, d = struct.unpack("<QQQ", fh.read(24))
        times = np.frombuffer(fh.read(8 * (n + 1)), dtype="<f8")
        states = np.frombuffer(fh.read(8 * P * (n + 1) * d), dtype="<f8").reshape(P, n + 1, d)
        dL = np.frombuffer(fh.read(8 * P * n), dtype="<f8").reshape(P, n)
    return times.copy(), states.copy(), dL.copy()
