"""Generation by the backward reflected SDE, reflected Langevin correction, and flow-based NLL."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domains import Domain, Hypercube, MeshDomain, _as_batch
from .errors import InputError
from .metrics import truncated_gaussian_density
from .scorenet import divergence
from .sde import (
    STREAM_CORRECTOR,
    DriftSpec,
    TimeGrid,
    euler_proposal,
    probability_flow_integrate,
    step_normals,
)

R_SNR = 0.16
SKIP_NORM = 1e-12


@dataclass
class PriorSpec:
    """Terminal law: uniform on the domain or a Gaussian truncated to it."""

    kind: str = "uniform"
    mean: float = 0.0
    scale: float = 1.0
    max_rounds: int = 1000

    def __post_init__(self):
        if self.kind not in ("uniform", "truncated-gaussian"):
            raise InputError(f"unknown prior kind {self.kind!r}")
        if self.scale <= 0:
            raise InputError("prior scale must be positive")

    def sample(self, domain: Domain, n, rng):
        if self.kind == "uniform":
            return domain.sample_uniform(n, rng)
        out = np.empty((0, domain.dim))
        for _ in range(self.max_rounds):
            if len(out) >= n:
                break
            cand = rng.normal(self.mean, self.scale, size=(max(2 * (n - len(out)), 64), domain.dim))
            out = np.vstack([out, cand[domain._contains(cand)]])
        if len(out) < n:
            raise InputError("truncated-Gaussian rejection budget exhausted")
        return out[:n]

    def log_density(self, x, domain: Domain):
        """Log-density on the domain; the uniform case needs the domain volume."""
        x, _ = _as_batch(x, domain.dim)
        if self.kind == "uniform":
            return np.full(len(x), -math.log(domain.volume()))
        if isinstance(domain, Hypercube) and domain.dim == 1:
            lo, hi = domain.lower[0], domain.upper[0]
            return np.log(truncated_gaussian_density(x[:, 0], (lo, hi), self.mean, self.scale))
        raise InputError("truncated-Gaussian log-density is only available on intervals")

    def volume_stderr(self, domain: Domain):
        if self.kind != "uniform":
            return 0.0
        if isinstance(domain, MeshDomain):
            return domain.volume_stderr()
        return 0.0


def corrector_step(x, z_fwd, z_bwd, t, drift: DriftSpec, domain: Domain, seed=0, step=0,
                   r_snr=R_SNR, noise=None, noise_norm2=None):
    """One reflected Langevin correction with ``s = (z_fwd + z_bwd) / g``.

    Step size ``sigma = 2 r^2 g^2 |e|^2 / |s|^2`` where the norms are averaged
    over the batch before squaring, so points where ``s`` nearly vanishes do not
    take huge steps.  Rows with ``|s| < 1e-12`` are left unchanged.  ``noise`` and
    ``noise_norm2`` override the fresh standard normal draw and its squared norm
    (used by tests).
    """
    x, single = _as_batch(x, domain.dim)
    g = float(drift.g(t))
    zf = z_fwd(x, t) if z_fwd is not None else np.zeros_like(x)
    zb = z_bwd(x, t) if z_bwd is not None else np.zeros_like(x)
    s = (zf + zb) / g
    e = step_normals(seed, STREAM_CORRECTOR, step, *x.shape) if noise is None else np.broadcast_to(
        np.asarray(noise, dtype=float), x.shape)
    e2 = np.sum(e * e, axis=1) if noise_norm2 is None else np.broadcast_to(
        np.asarray(noise_norm2, dtype=float), (len(x),))
    sn = np.linalg.norm(s, axis=1)
    move = sn >= SKIP_NORM
    sigma = np.zeros(len(x))
    if move.any():
        ratio = np.mean(np.sqrt(e2[move])) / np.mean(sn[move])
        sigma[move] = 2.0 * r_snr**2 * g * g * ratio**2
    prop = x + sigma[:, None] * s + np.sqrt(2.0 * sigma)[:, None] * e
    out = x.copy()
    if move.any():
        out[move] = domain.fold(x[move], prop[move], mode="reflect").x
    return out[0] if single else out


def generate(prior: PriorSpec, z_bwd, drift: DriftSpec, grid: TimeGrid, domain: Domain, n, seed=0,
             z_fwd=None, corrector_steps=0, r_snr=R_SNR):
    """Backward reflected SDE from the prior; optional corrector steps after each predictor step.

    ``z_bwd``/``z_fwd`` are fields ``g * grad log`` (as trained); ``None`` means zero.
    """
    from .sde import STREAM_BACKWARD

    rng = np.random.default_rng([int(seed), 0])
    x = prior.sample(domain, n, rng)
    ts = grid.timestamps
    dt = grid.dt

    def score(xx, t):
        return z_bwd(xx, t) / float(drift.g(t)) if z_bwd is not None else np.zeros_like(xx)

    for count, k in enumerate(range(grid.n_steps, 0, -1)):
        xi = step_normals(seed, STREAM_BACKWARD, count, n, domain.dim)
        prop = euler_proposal(drift, score, x, ts[k], dt, xi, "backward")
        x = domain.fold(x, prop, mode="reflect").x
        for j in range(corrector_steps):
            x = corrector_step(x, z_fwd, z_bwd, ts[k - 1], drift, domain, seed=seed,
                               step=count * corrector_steps + j, r_snr=r_snr)
    if not np.all(domain._contains(x)):
        raise AssertionError("generated samples left the domain")
    return x


@dataclass
class NllReport:
    nats: np.ndarray
    bits_per_dim: np.ndarray
    mean_nats: float
    stderr: float
    volume_stderr: float
    flagged: int
    guard_events: np.ndarray

    def to_dict(self):
        return {"mean_nats": self.mean_nats, "bits_per_dim": float(np.mean(self.bits_per_dim)),
                "stderr": self.stderr, "volume_stderr": self.volume_stderr, "flagged": self.flagged}


def nll(x0, z_fwd, z_bwd, drift: DriftSpec, grid: TimeGrid, domain: Domain, prior: PriorSpec,
        div_mode=None, probes=1, seed=0, method="rk4", fields_are_scores=False):
    """Negative log-likelihood through the probability-flow ODE.

    ``log p_0(x_0) = log p_T(x_T) + int_0^T div(v) dt`` with the flow velocity
    ``v``.  Fields are ``g * grad log`` by default; pass ``fields_are_scores`` for
    raw ``grad log`` callables.  Samples whose flow needed a guard reflection are
    flagged.
    """
    x0, _ = _as_batch(x0, domain.dim)
    d = domain.dim
    if div_mode is None:
        div_mode = "exact" if d <= 8 else "hutchinson"

    def as_score(z):
        if z is None or fields_are_scores:
            return z
        return lambda x, t: z(x, t) / float(drift.g(t))

    calls = [0]

    def div(v, x, t):
        calls[0] += 1
        if div_mode == "exact":
            return divergence(v, x, t, "exact")
        return divergence(v, x, t, "hutchinson", probes=probes, seed=seed * 7919 + calls[0])

    traj, guard, div_int = probability_flow_integrate(drift, as_score(z_fwd), as_score(z_bwd), x0,
                                                      grid, domain, method=method, divergence=div)
    xT = traj.states[:, -1]
    logp0 = prior.log_density(xT, domain) + div_int
    nats = -logp0
    bpd = nats / (d * math.log(2.0))
    se = float(nats.std(ddof=1) / math.sqrt(len(nats))) if len(nats) > 1 else 0.0
    return NllReport(nats, bpd, float(nats.mean()), se, prior.volume_stderr(domain),
                     int(np.count_nonzero(guard)), guard)
