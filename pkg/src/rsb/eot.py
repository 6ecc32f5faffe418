"""Discrete entropic optimal transport: plain and centered Sinkhorn, dual objective, diagnostics.

All sums over atoms are taken in the log domain.  Potentials follow the sign
convention ``pi_ij = mu_i nu_j exp(phi_i + psi_j - c_ij)`` with ``c`` already
divided by the entropic regularizer.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import null_space
from scipy.special import logsumexp

from .errors import InputError, NumericError
from .metrics import exact_w1

log = logging.getLogger(__name__)

EXP_GUARD = 700.0


@dataclass
class DiscreteMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        if self.atoms.ndim == 1:
            self.atoms = self.atoms[:, None]
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) == 0:
            raise InputError("empty support")
        if self.weights.shape != (len(self.atoms),):
            raise InputError("one weight per atom required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise InputError("weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, atoms):
        atoms = np.asarray(atoms, dtype=float)
        return cls(atoms, np.full(len(atoms), 1.0 / len(atoms)))

    @classmethod
    def normalized(cls, atoms, weights):
        w = np.asarray(weights, dtype=float)
        return cls(atoms, w / w.sum())

    def __len__(self):
        return len(self.weights)


@dataclass
class CostMatrix:
    """Entropic cost ``c / epsilon``."""

    values: np.ndarray
    epsilon: float = 1.0
    kind: str = "squared-euclidean"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or not np.all(np.isfinite(self.values)):
            raise InputError("cost must be a finite matrix")

    @property
    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    @classmethod
    def squared_euclidean(cls, x, y, epsilon=1.0):
        x = np.atleast_2d(np.asarray(x, dtype=float).T).T
        y = np.atleast_2d(np.asarray(y, dtype=float).T).T
        c = 0.5 * np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2)
        return cls(c / epsilon, epsilon, "squared-euclidean")

    @classmethod
    def from_kernel(cls, kernel, epsilon=1.0, floor=1e-300):
        """``c_eps = -log K`` for a transition kernel matrix ``K``."""
        k = np.maximum(np.asarray(kernel, dtype=float), floor)
        return cls(-np.log(k), epsilon, "kernel")


def reflected_kernel_cost(domain, x, y, drift, grid, n_paths=256, bandwidth=None, seed=0):
    """Cost from a simulated reflected transition density, estimated with a Gaussian KDE."""
    from .sde import simulate_forward_reflected

    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    d = x.shape[1]
    if bandwidth is None:
        bandwidth = 0.1 * domain.diameter()
    K = np.empty((len(x), len(y)))
    for i, xi in enumerate(x):
        tr = simulate_forward_reflected(drift, None, np.repeat(xi[None], n_paths, axis=0),
                                        grid, domain, seed=seed + i, store="terminal")
        diff = tr.terminal[:, None, :] - y[None, :, :]
        dens = np.exp(-0.5 * np.sum(diff**2, axis=2) / bandwidth**2)
        K[i] = dens.mean(axis=0) / ((2 * math.pi) ** (d / 2) * bandwidth**d)
    return CostMatrix.from_kernel(K, epsilon=drift.epsilon)


@dataclass
class PotentialPair:
    phi: np.ndarray
    psi: np.ndarray
    centered: bool = False
    lambdas: list = field(default_factory=list)

    def copy(self):
        return PotentialPair(self.phi.copy(), self.psi.copy(), self.centered, list(self.lambdas))


def _w(m):
    return m.weights if isinstance(m, DiscreteMeasure) else np.asarray(m, dtype=float)


def _c(cost):
    return cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=float)


def _exponent(phi, psi, c):
    e = phi[:, None] + psi[None, :] - c
    if np.max(e) > EXP_GUARD:
        raise NumericError("potential exponent exceeds overflow guard")
    return e


def _log_mass(phi, psi, mu, nu, c):
    e = _exponent(phi, psi, c)
    with np.errstate(divide="ignore"):
        lw = np.log(mu)[:, None] + np.log(nu)[None, :]
    return logsumexp(e + lw)


def dual_objective(phi, psi, mu, nu, cost):
    """``mu(phi) + nu(psi) - sum_ij mu_i nu_j exp(phi_i + psi_j - c_ij) + 1``."""
    mu, nu, c = _w(mu), _w(nu), _c(cost)
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if phi.shape != mu.shape or psi.shape != nu.shape:
        raise InputError("potential lengths must match the atoms")
    return float(mu @ phi + nu @ psi - math.exp(_log_mass(phi, psi, mu, nu, c)) + 1.0)


def dual_partials(phi, psi, mu, nu, cost):
    """Per-atom partials ``1 - int exp(phi + psi - c) d nu`` and ``1 - int exp(phi + psi - c) d mu``."""
    mu, nu, c = _w(mu), _w(nu), _c(cost)
    e = _exponent(np.asarray(phi, float), np.asarray(psi, float), c)
    with np.errstate(divide="ignore"):
        d1 = 1.0 - np.exp(logsumexp(e + np.log(nu)[None, :], axis=1))
        d2 = 1.0 - np.exp(logsumexp(e + np.log(mu)[:, None], axis=0))
    return d1, d2


def coupling_from_potentials(phi, psi, mu, nu, cost):
    mu, nu, c = _w(mu), _w(nu), _c(cost)
    e = _exponent(np.asarray(phi, float), np.asarray(psi, float), c)
    return np.outer(mu, nu) * np.exp(e)


def psi_update(phi, mu, cost):
    """``psi(y) = -log int exp(phi - c(., y)) d mu``: fits the second marginal."""
    mu, c = _w(mu), _c(cost)
    if mu.size == 0:
        raise InputError("empty support")
    with np.errstate(divide="ignore"):
        return -logsumexp(np.log(mu)[:, None] + phi[:, None] - c, axis=0)


def phi_update(psi, nu, cost):
    """``phi(x) = -log int exp(psi - c(x, .)) d nu``: fits the first marginal."""
    nu, c = _w(nu), _c(cost)
    if nu.size == 0:
        raise InputError("empty support")
    with np.errstate(divide="ignore"):
        return -logsumexp(np.log(nu)[None, :] + psi[None, :] - c, axis=1)


def sinkhorn_step(state: PotentialPair, mu_k, nu_k, cost) -> PotentialPair:
    """One aIPF iteration: ``psi_k`` from ``phi_k``, then ``phi_{k+1}`` from ``psi_k``.

    The returned pair holds ``(phi_{k+1}, psi_k)``.
    """
    psi = psi_update(state.phi, mu_k, cost)
    phi = phi_update(psi, nu_k, cost)
    return PotentialPair(phi, psi, False, list(state.lambdas))


def centered_sinkhorn_step(state: PotentialPair, mu_k, nu_k, mu_star, cost) -> PotentialPair:
    """Centered iteration: the new ``phi`` is shifted by ``lambda_k`` so that ``mu_star(phi) = 0``."""
    psi = psi_update(state.phi, mu_k, cost)
    raw = phi_update(psi, nu_k, cost)
    lam = -float(_w(mu_star) @ raw)
    return PotentialPair(raw + lam, psi, True, list(state.lambdas) + [lam])


def perturb_marginal(measure: DiscreteMeasure, epsilon_pert, direction=None, seed=0):
    """Tilt the weights by ``exp(eps <a, x>)`` with a unit direction ``a``, then renormalize."""
    if epsilon_pert < 0:
        raise InputError("perturbation size must be nonnegative")
    if epsilon_pert == 0:
        return DiscreteMeasure(measure.atoms.copy(), measure.weights.copy())
    d = measure.atoms.shape[1]
    if direction is None:
        a = np.random.default_rng(seed).standard_normal(d)
    else:
        a = np.asarray(direction, dtype=float).reshape(d)
    a = a / np.linalg.norm(a)
    logw = np.log(measure.weights) + epsilon_pert * measure.atoms @ a
    logw -= logsumexp(logw)
    return DiscreteMeasure(measure.atoms.copy(), np.exp(logw) / np.exp(logw).sum())


def log_density_ratio_sup(a: DiscreteMeasure, b: DiscreteMeasure):
    """``sup_i |log(a_i / b_i)|`` over atoms with positive mass in both."""
    m = (a.weights > 0) & (b.weights > 0)
    return float(np.max(np.abs(np.log(a.weights[m]) - np.log(b.weights[m]))))


def kl_to_gibbs(pi, mu, nu, cost):
    """``sum pi log(pi / (mu_i nu_j exp(-c_ij)))`` with ``0 log 0 = 0``."""
    mu, nu, c = _w(mu), _w(nu), _c(cost)
    pi = np.asarray(pi, dtype=float)
    m = pi > 0
    log_g = (np.log(np.outer(mu, nu)[m]) - c[m])
    return float(np.sum(pi[m] * (np.log(pi[m]) - log_g)))


def marginal_residual(phi, psi, mu, nu, cost):
    pi = coupling_from_potentials(phi, psi, mu, nu, cost)
    return float(np.abs(pi.sum(axis=1) - _w(mu)).sum() + np.abs(pi.sum(axis=0) - _w(nu)).sum())


def reference_solution(mu, nu, cost, tol=1e-14, max_iters=100_000):
    """Exact-marginal Sinkhorn run to machine precision; returns a pair with ``mu(phi) = 0``."""
    mu_w, nu_w = _w(mu), _w(nu)
    phi = np.zeros(len(mu_w))
    best = np.inf
    stall = 0
    for _ in range(max_iters):
        psi = psi_update(phi, mu_w, cost)
        phi = phi_update(psi, nu_w, cost)
        psi = psi_update(phi, mu_w, cost)
        res = marginal_residual(phi, psi, mu_w, nu_w, cost)
        if res <= tol:
            break
        # floating-point floor: stop once the residual stops improving
        if res < 0.5 * best:
            best, stall = res, 0
        else:
            stall += 1
            if stall > 50:
                break
    shift = float(mu_w @ phi)
    return PotentialPair(phi - shift, psi + shift, True)


def brute_force_coupling(mu, nu, cost, tol=1e-13, max_iters=200):
    """Minimize ``KL(pi || G)`` over the coupling polytope by Newton's method in affine coordinates.

    Independent of Sinkhorn; intended for tiny instances.
    """
    mu, nu, c = _w(mu), _w(nu), _c(cost)
    m, n = c.shape
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A[m + j, j::n] = 1.0
    B = null_space(A)
    log_k = (np.log(np.outer(mu, nu)) - c).ravel()
    pi = np.outer(mu, nu).ravel()
    if B.shape[1] == 0:
        return pi.reshape(m, n)
    for _ in range(max_iters):
        grad = B.T @ (np.log(pi) - log_k)
        H = B.T @ (B / pi[:, None])
        step = -np.linalg.solve(H, grad)
        dpi = B @ step
        t = 1.0
        while np.any(pi + t * dpi <= 0):
            t *= 0.5
        pi = pi + t * dpi
        if np.linalg.norm(grad) < tol:
            break
    return pi.reshape(m, n)


class DiagnosticsLog(list):
    """Per-iteration records plus run-level summary fields."""

    def __init__(self, *args):
        super().__init__(*args)
        self.converged = False
        self.fitted_ratio = None
        self.plateau = None
        self.bound = None

    def column(self, key):
        return np.array([np.nan if r.get(key) is None else r[key] for r in self], dtype=float)

    def summary(self):
        return {"iterations": len(self), "converged": self.converged,
                "fitted_ratio": self.fitted_ratio, "plateau": self.plateau,
                "ratio_bound": self.bound}

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self:
                fh.write(json.dumps(r) + "\n")


def contraction_bound(cost):
    """``1 - exp(-24 ||c_eps||_inf)``."""
    return 1.0 - math.exp(-24.0 * (cost.sup_norm if isinstance(cost, CostMatrix) else float(np.max(np.abs(cost)))))


def fit_ratio(gaps, plateau_window=10, factor=100.0):
    """Least-squares geometric rate of a gap sequence and its plateau level.

    Plateau = median of the last ``plateau_window`` gaps; the fit uses the
    iterations whose gap exceeds ``factor`` times the plateau.
    """
    g = np.asarray(gaps, dtype=float)
    tail = g[-plateau_window:]
    plateau = float(np.median(np.maximum(tail, 0.0))) if len(tail) else 0.0
    floor = max(factor * plateau, 1e-300)
    idx = np.flatnonzero(g > floor)
    # only the leading geometric phase, before the first dip under the floor
    if idx.size:
        stop = np.flatnonzero(g <= floor)
        first_low = stop[0] if stop.size else len(g)
        idx = idx[idx < first_low]
    if idx.size == 1 and idx[0] + 1 < len(g):
        # converged in one step: bound the rate by the next gap, floored at the plateau
        i = idx[0]
        return float(max(g[i + 1], plateau) / g[i]), plateau
    if idx.size < 2:
        return None, plateau
    slope = np.polyfit(idx.astype(float), np.log(g[idx]), 1)[0]
    return float(math.exp(slope)), plateau


MeasureSeq = Union[np.ndarray, DiscreteMeasure, Sequence, Callable]


def _at(seq, k):
    if callable(seq):
        return _w(seq(k))
    if isinstance(seq, DiscreteMeasure):
        return seq.weights
    arr = seq
    if isinstance(arr, (list, tuple)):
        return _w(arr[min(k, len(arr) - 1)])
    return np.asarray(arr, dtype=float)


def _coupling_atoms(mu_atoms, nu_atoms):
    m, n = len(mu_atoms), len(nu_atoms)
    return np.hstack([np.repeat(mu_atoms, n, axis=0), np.tile(nu_atoms, (m, 1))])


def solve(mu_seq: MeasureSeq, nu_seq: MeasureSeq, cost, max_iters=500, tol=1e-12,
          centered=False, reference: Optional[PotentialPair] = None, mu_star=None, nu_star=None,
          atoms=None, track_w1=False, stop_on_tol=True):
    """Run plain or centered Sinkhorn and record diagnostics each iteration.

    ``mu_seq``/``nu_seq`` are weight vectors (exact marginals), lists, or
    callables ``k -> weights`` (perturbed marginals).  ``mu_star``/``nu_star``
    default to the iteration-0 marginals.  ``atoms=(x, y)`` enables coupling
    W1 against the reference when ``track_w1`` is set.
    """
    mu0 = _at(mu_seq, 0)
    nu0 = _at(nu_seq, 0)
    mu_s = _w(mu_star) if mu_star is not None else mu0
    nu_s = _w(nu_star) if nu_star is not None else nu0
    if mu0.size == 0 or nu0.size == 0:
        raise InputError("empty support")
    if reference is None:
        reference = reference_solution(mu_s, nu_s, cost)
    g_star = dual_objective(reference.phi, reference.psi, mu_s, nu_s, cost)
    ref_phi = reference.phi - mu_s @ reference.phi
    ref_psi = reference.psi + mu_s @ reference.phi
    pi_star = coupling_from_potentials(reference.phi, reference.psi, mu_s, nu_s, cost)
    prod_atoms = None
    if track_w1 and atoms is not None:
        prod_atoms = _coupling_atoms(np.atleast_2d(np.asarray(atoms[0], float).T).T,
                                     np.atleast_2d(np.asarray(atoms[1], float).T).T)
    state = PotentialPair(np.zeros(len(mu0)), np.zeros(len(nu0)), centered)
    diag = DiagnosticsLog()
    prev_gap = None
    for k in range(max_iters):
        mu_k, nu_k = _at(mu_seq, k), _at(nu_seq, k)
        psi = psi_update(state.phi, mu_k, cost)
        phi = state.phi
        G = dual_objective(phi, psi, mu_s, nu_s, cost)
        gap = g_star - G
        shift = float(mu_s @ phi)
        phi_err = math.sqrt(mu_s @ (phi - shift - ref_phi) ** 2)
        psi_err = math.sqrt(nu_s @ (psi + shift - ref_psi) ** 2)
        res = float(np.abs(coupling_from_potentials(phi, psi, mu_k, nu_k, cost).sum(axis=1) - mu_k).sum())
        rec = {"k": k, "G": G, "gap": gap, "phi_err": phi_err, "psi_err": psi_err,
               "residual": res, "w1": None, "ratio": None,
               "phi_sup": float(np.max(np.abs(phi))), "psi_sup": float(np.max(np.abs(psi)))}
        if centered:
            rec["lambda"] = state.lambdas[-1] if state.lambdas else None
        if prev_gap is not None and prev_gap > 0 and gap > 0:
            rec["ratio"] = gap / prev_gap
        if prod_atoms is not None:
            pi_k = coupling_from_potentials(phi, psi, mu_s, nu_s, cost)
            rec["w1"] = exact_w1(prod_atoms, prod_atoms, pi_k.ravel() / pi_k.sum(), pi_star.ravel())
        diag.append(rec)
        prev_gap = gap
        if stop_on_tol and res <= tol:
            diag.converged = True
            state = PotentialPair(phi, psi, centered, list(state.lambdas))
            break
        raw = phi_update(psi, nu_k, cost)
        if centered:
            lam = -float(mu_s @ raw)
            state = PotentialPair(raw + lam, psi, True, list(state.lambdas) + [lam])
        else:
            state = PotentialPair(raw, psi, False, list(state.lambdas))
    else:
        state = PotentialPair(state.phi, psi_update(state.phi, _at(mu_seq, max_iters), cost),
                              centered, list(state.lambdas))
        if stop_on_tol:
            log.warning("sinkhorn stopped at max_iters=%d without reaching tol=%g", max_iters, tol)
    diag.fitted_ratio, diag.plateau = fit_ratio(diag.column("gap"))
    diag.bound = contraction_bound(cost)
    return state, diag
