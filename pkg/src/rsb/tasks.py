"""Built-in data sets: a domain, a reference drift and a sampler for the data law."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domains import Domain, make_domain
from .errors import InputError
from .sde import DriftSpec


@dataclass
class Task:
    name: str
    domain_spec: dict
    drift_kwargs: dict
    sampler: Callable = field(repr=False)
    T: float = 1.0

    def domain(self) -> Domain:
        return make_domain(self.domain_spec)

    def drift(self, **overrides) -> DriftSpec:
        kw = dict(self.drift_kwargs)
        kw.update(overrides)
        return DriftSpec(**kw)

    def sample(self, domain: Domain, n, rng):
        return self.sampler(domain, n, rng)


def _reject(domain, n, rng, propose, max_rounds=1000):
    out = np.empty((0, domain.dim))
    for _ in range(max_rounds):
        if len(out) >= n:
            return out[:n]
        cand = propose(max(2 * (n - len(out)), 256))
        out = np.vstack([out, cand[domain._contains(cand)]])
    raise InputError("data sampler rejection budget exhausted")


def checkerboard_in(domain, n, rng, cell=6.0):
    lo, hi = domain.bounding_box()

    def propose(m):
        x = rng.uniform(lo, hi, size=(m, 2))
        keep = (np.floor(x[:, 0] / cell) + np.floor(x[:, 1] / cell)) % 2 == 0
        return x[keep]

    return _reject(domain, n, rng, propose)


def spiral_in(domain, n, rng, r_max=1.9, turns=1.5, noise=0.05):
    def propose(m):
        s = np.sqrt(rng.uniform(0.05, 1.0, size=m))
        theta = 2 * math.pi * turns * s
        r = r_max * s
        x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        return x + noise * rng.standard_normal(x.shape)

    return _reject(domain, n, rng, propose)


def gaussian_mixture_in(domain, n, rng, modes=8, ring=3.0, std=0.35):
    ang = 2 * math.pi * np.arange(modes) / modes
    centers = ring * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def propose(m):
        k = rng.integers(0, modes, size=m)
        return centers[k] + std * rng.standard_normal((m, 2))

    return _reject(domain, n, rng, propose)


def truncated_gaussian_1d(domain, n, rng, mean=0.0, scale=1.0):
    def propose(m):
        return rng.normal(mean, scale, size=(m, 1))

    return _reject(domain, n, rng, propose)


TASKS = {
    "checkerboard-heart": Task("checkerboard-heart", {"kind": "heart"},
                               {"kind": "rve", "sigma_min": 0.01, "sigma_max": 20.0}, checkerboard_in),
    "spiral-flower": Task("spiral-flower", {"kind": "flower", "petals": 5, "move_out": 3.0},
                          {"kind": "rve", "sigma_min": 0.01, "sigma_max": 6.0}, spiral_in),
    "mixture-octagon": Task("mixture-octagon", {"kind": "octagon", "radius": 5.0},
                            {"kind": "rve", "sigma_min": 0.01, "sigma_max": 8.0}, gaussian_mixture_in),
    "truncated-gaussian-1d": Task("truncated-gaussian-1d", {"kind": "hypercube", "dim": 1, "lower": -1.0,
                                                            "upper": 1.0},
                                  {"kind": "rve", "sigma_min": 0.01, "sigma_max": 5.0}, truncated_gaussian_1d),
}


def get_task(name) -> Task:
    if name not in TASKS:
        raise InputError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name]
