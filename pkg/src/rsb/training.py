"""Divergence-based likelihood losses with local-time boundary terms, and the alternating trainer.

A trained field ``z`` stands for ``g * grad log(potential)``.  The forward loss
trains the backward field on forward trajectories and the backward loss trains
the forward field on backward trajectories:

    sum_k (|z|^2 / 2 + g div z + <z_frozen, z>) dt  +  (w / g) sum_hits <z(b), dx_reflect>

averaged over paths.  ``dx_reflect`` is the reflection correction, so its size is
the local-time increment and its direction the inward normal.  The boundary
weight ``w`` defaults to ``1 / epsilon``, which is what makes a zero field a
stationary point when the data already follow the reference's invariant law.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .domains import Domain
from .errors import InputError, NumericError
from .scorenet import Adam, Ema, Mlp, ScoreField, fd_step
from .sde import DriftSpec, TimeGrid, Trajectories, simulate_backward_reflected, simulate_forward_reflected

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    stages: int = 4
    steps_per_stage: int = 250
    warmup_steps: int = 1000
    lr: float = 1e-3
    time_samples: int = 32
    boundary_weight: Optional[float] = None
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    cache_paths: int = 4096
    ema_decay: float = 0.99
    grad_clip: float = 10.0
    warmup: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "steps_per_stage", "cache_paths", "time_samples"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be positive")
        if self.stages < 0 or self.warmup_steps < 0:
            raise InputError("stage counts must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def default_boundary_weight(drift: DriftSpec):
    return 1.0 / drift.epsilon


# -- loss core --------------------------------------------------------------

@dataclass
class LossBatch:
    """Evaluation points for one loss evaluation, already weighted.

    ``w`` carries ``dt`` and the path/time averaging.  Boundary rows carry the
    reflection correction and the boundary weight divided by ``g``.
    """

    x: np.ndarray
    t: np.ndarray
    zf: np.ndarray
    g: np.ndarray
    w: np.ndarray
    bx: np.ndarray
    bt: np.ndarray
    bcorr: np.ndarray
    bcoef: np.ndarray


def loss_and_grad(model: Mlp, params, batch: LossBatch, need_grad=True):
    """Value and parameter gradient of the weighted loss on ``batch``.

    The divergence is a central difference, so the loss is a linear-quadratic
    function of the network outputs at stacked points and its gradient is exact.
    """
    x, t = batch.x, batch.t
    n, d = x.shape
    h = fd_step(x)
    stacks = [x]
    times = [t]
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        stacks += [x + h[:, i:i + 1] * e, x - h[:, i:i + 1] * e]
        times += [t, t]
    stacks.append(batch.bx)
    times.append(batch.bt)
    X = np.vstack(stacks)
    Tt = np.concatenate(times)
    Z, cache = model.forward(X, Tt, params)
    dZ = np.zeros_like(Z)
    zb = Z[:n]
    w = batch.w[:, None]
    L = float(np.sum(w * (0.5 * zb * zb + batch.zf * zb)))
    dZ[:n] = w * (zb + batch.zf)
    div = np.zeros(n)
    for i in range(d):
        lo = n * (1 + 2 * i)
        coef = batch.w * batch.g / (2.0 * h[:, i])
        div += (Z[lo:lo + n, i] - Z[lo + n:lo + 2 * n, i]) / (2.0 * h[:, i])
        dZ[lo:lo + n, i] = coef
        dZ[lo + n:lo + 2 * n, i] = -coef
    L += float(np.sum(batch.w * batch.g * div))
    nb = len(batch.bx)
    if nb:
        zh = Z[-nb:]
        L += float(np.sum(batch.bcoef * np.sum(zh * batch.bcorr, axis=1)))
        dZ[-nb:] = batch.bcoef[:, None] * batch.bcorr
    if not np.isfinite(L):
        raise NumericError("non-finite training loss")
    if not need_grad:
        return L, None
    return L, model.backward(cache, dZ, params)


def _field_values(field_fn, x, t):
    if field_fn is None:
        return np.zeros_like(x)
    return field_fn(x, t)


def build_batch(traj: Trajectories, frozen, drift: DriftSpec, boundary_weight=None,
                paths=None, time_idx=None, frozen_values=None, T=None, truncate=False) -> LossBatch:
    """Collect weighted evaluation points from a batch of trajectories.

    Forward trajectories are evaluated at ``t_0 .. t_{n-1}``, backward ones at
    ``t_1 .. t_n`` (the time each step starts from).  With ``truncate`` the
    points at ``t = 0`` or ``t = T`` are dropped, matching fields that are pinned
    to zero there.  ``time_idx`` is an
    optional ``(P, m)`` array of evaluation indices; the weights are rescaled so
    the subsample is unbiased.  ``frozen_values`` may hold precomputed frozen
    field values with shape ``(P, n+1, d)``.
    """
    if not traj.full:
        raise InputError("training needs full trajectories")
    bw = default_boundary_weight(drift) if boundary_weight is None else boundary_weight
    P_all, n1, d = traj.states.shape
    n = n1 - 1
    T = traj.times[-1] if T is None else T
    paths = np.arange(P_all) if paths is None else np.asarray(paths)
    P = len(paths)
    ts = traj.times
    dt = ts[1] - ts[0]
    offset = 0 if traj.direction == "forward" else 1
    full = np.arange(offset, n + offset)
    if time_idx is None:
        ki = np.broadcast_to(full, (P, n))
        scale = 1.0
    else:
        ki = np.asarray(time_idx)
        scale = n / ki.shape[1]
    tol = 1e-12 * max(1.0, T) if truncate else -np.inf
    g_all = np.broadcast_to(np.asarray(drift.g(ts), dtype=float), ts.shape)
    rows = np.repeat(paths, ki.shape[1])
    cols = ki.ravel()
    keep = (ts[cols] > tol) & (ts[cols] < T - tol)
    rows, cols = rows[keep], cols[keep]
    x = traj.states[rows, cols]
    t = ts[cols]
    if frozen_values is not None:
        zf = frozen_values[rows, cols]
    else:
        zf = _field_values(frozen, x, t) if len(x) else np.zeros((0, d))
    g = g_all[cols]
    w = np.full(len(x), dt * scale / P)
    # boundary terms over every interval of the selected paths
    pi, ii = np.nonzero(traj.hit[paths])
    kk = ii + offset
    live = (ts[kk] > tol) & (ts[kk] < T - tol)
    pi, ii, kk = pi[live], ii[live], kk[live]
    prow = paths[pi]
    bx = traj.hit_point[prow, ii]
    bt = ts[kk]
    bcorr = traj.correction[prow, ii]
    bcoef = bw / g_all[kk] / P
    return LossBatch(x, t, zf, g, w, bx, bt, bcorr, bcoef)


def forward_loss(traj: Trajectories, z_fwd, model_bwd: Mlp, params_bwd, drift: DriftSpec,
                 boundary_weight=None, need_grad=False, **kw):
    """Loss for the backward field on forward trajectories (``z_fwd`` frozen)."""
    if traj.direction != "forward":
        raise InputError("forward_loss needs forward trajectories")
    batch = build_batch(traj, z_fwd, drift, boundary_weight, **kw)
    L, g = loss_and_grad(model_bwd, params_bwd, batch, need_grad)
    return (L, g) if need_grad else L


def backward_loss(traj: Trajectories, z_bwd, model_fwd: Mlp, params_fwd, drift: DriftSpec,
                  boundary_weight=None, need_grad=False, **kw):
    """Loss for the forward field on backward trajectories (``z_bwd`` frozen)."""
    if traj.direction != "backward":
        raise InputError("backward_loss needs backward trajectories")
    batch = build_batch(traj, z_bwd, drift, boundary_weight, **kw)
    L, g = loss_and_grad(model_fwd, params_fwd, batch, need_grad)
    return (L, g) if need_grad else L


# -- trainer ------------------------------------------------------------------

def field_to_score(z, drift: DriftSpec):
    """Turn ``z = g grad log`` into the ``grad log`` callable the simulators expect."""
    if z is None:
        return None

    def score(x, t):
        return z(x, t) / float(drift.g(t))

    return score


@dataclass
class TrajectoryCache:
    traj: Trajectories
    frozen_values: np.ndarray
    snapshot: int


@dataclass
class TrainState:
    drift: DriftSpec
    grid: TimeGrid
    domain: Domain
    config: TrainConfig
    data_sampler: Callable
    prior_sampler: Callable
    model_fwd: Mlp = None
    model_bwd: Mlp = None
    opt_fwd: Adam = None
    opt_bwd: Adam = None
    ema_fwd: Ema = None
    ema_bwd: Ema = None
    version_fwd: int = 0
    version_bwd: int = 0
    stage: int = 0
    warmup_params: np.ndarray = None
    summaries: list = field(default_factory=list)
    rng: np.random.Generator = None
    sim_counter: int = 0

    def field(self, which, use_ema=True):
        model = self.model_fwd if which == "fwd" else self.model_bwd
        ema = self.ema_fwd if which == "fwd" else self.ema_bwd
        params = ema.shadow if (use_ema and ema.shadow is not None) else model.params
        return ScoreField(model, params, T=self.grid.T)

    def is_zero_fwd(self):
        return self.version_fwd == 0


def init_state(drift, grid, domain, config: TrainConfig, data_sampler, prior_sampler=None):
    d = domain.dim
    widths = [d + 1, *config.hidden, d]
    lo, hi = domain.bounding_box()
    x_scale = float(np.max(np.abs(np.concatenate([lo, hi]))))
    x_scale = x_scale if np.isfinite(x_scale) and x_scale > 0 else 1.0
    if prior_sampler is None:
        prior_sampler = domain.sample_uniform
    st = TrainState(drift, grid, domain, config, data_sampler, prior_sampler)
    st.model_fwd = Mlp(widths, config.activation, seed=config.seed + 1, x_scale=x_scale, zero_last=True)
    st.model_bwd = Mlp(widths, config.activation, seed=config.seed + 2, x_scale=x_scale)
    st.opt_fwd, st.opt_bwd = Adam(config.lr), Adam(config.lr)
    st.ema_fwd, st.ema_bwd = Ema(config.ema_decay), Ema(config.ema_decay)
    st.ema_fwd.update(st.model_fwd.params)
    st.ema_bwd.update(st.model_bwd.params)
    st.rng = np.random.default_rng(config.seed)
    return st


def _refresh(st: TrainState, direction) -> TrajectoryCache:
    n = st.config.cache_paths
    st.sim_counter += 1
    seed = st.config.seed * 1_000_003 + st.sim_counter
    if direction == "forward":
        x0 = st.data_sampler(n, st.rng)
        zf = None if st.is_zero_fwd() else st.field("fwd")
        traj = simulate_forward_reflected(st.drift, field_to_score(zf, st.drift), x0, st.grid,
                                          st.domain, seed=seed)
        snap = st.version_fwd
    else:
        xT = st.prior_sampler(n, st.rng)
        zf = st.field("bwd")
        traj = simulate_backward_reflected(st.drift, field_to_score(zf, st.drift), xT, st.grid,
                                           st.domain, seed=seed)
        snap = st.version_bwd
    P, n1, d = traj.states.shape
    if zf is None:
        vals = np.zeros_like(traj.states)
    else:
        flat = traj.states.reshape(-1, d)
        tt = np.tile(traj.times, P)
        vals = zf(flat, tt).reshape(P, n1, d)
    if not np.all(st.domain._contains(traj.states.reshape(-1, d))):
        raise AssertionError("cached trajectory left the domain")
    return TrajectoryCache(traj, vals, snap)


def _optimize(st: TrainState, direction, steps):
    """Train the backward field on forward paths (``direction='forward'``) or vice versa."""
    cfg = st.config
    if direction == "forward":
        model, opt, ema = st.model_bwd, st.opt_bwd, st.ema_bwd
    else:
        model, opt, ema = st.model_fwd, st.opt_fwd, st.ema_fwd
    cache = _refresh(st, direction)
    n = st.grid.n_steps
    losses = []
    hits = []
    order = st.rng.permutation(cfg.cache_paths)
    pos = 0
    for step in range(steps):
        if pos + cfg.batch_size > cfg.cache_paths:
            cache = _refresh(st, direction)
            order = st.rng.permutation(cfg.cache_paths)
            pos = 0
        current = st.version_fwd if direction == "forward" else st.version_bwd
        if cache.snapshot != current:
            warnings.warn("trajectory cache is stale", RuntimeWarning, stacklevel=2)
        paths = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        lo = 0 if direction == "forward" else 1
        m = min(cfg.time_samples, n)
        tidx = st.rng.integers(lo, lo + n, size=(len(paths), m))
        batch = build_batch(cache.traj, None, st.drift, cfg.boundary_weight, paths=paths,
                            time_idx=tidx, frozen_values=cache.frozen_values, T=st.grid.T,
                            truncate=True)
        L, grad = loss_and_grad(model, model.params, batch)
        gn = np.linalg.norm(grad)
        if not np.isfinite(gn):
            raise NumericError(f"non-finite gradient at step {step} ({direction})")
        if cfg.grad_clip and gn > cfg.grad_clip:
            grad = grad * (cfg.grad_clip / gn)
        model.params = opt.step(model.params, grad)
        ema.update(model.params)
        losses.append(L)
        hits.append(cache.traj.hit[paths].mean())
    if direction == "forward":
        st.version_bwd += 1
    else:
        st.version_fwd += 1
    return np.array(losses), float(np.mean(hits)) if hits else 0.0


def _summary(st, direction, losses, hits, label):
    k = max(1, len(losses) // 10)
    rec = {"stage": label, "direction": direction,
           "loss_start": float(np.mean(losses[:k])), "loss_end": float(np.mean(losses[-k:])),
           "hits_frac": hits}
    st.summaries.append(rec)
    log.info("stage %s %s: loss %.4f -> %.4f", label, direction, rec["loss_start"], rec["loss_end"])
    return rec


def warmup(st: TrainState, steps=None):
    """Train the backward field with the forward field pinned to zero; returns the EMA weights."""
    if st.drift.kind not in ("rve", "rvp", "reflected-ou", "custom"):
        raise InputError("warm-up needs a reference drift")
    steps = st.config.warmup_steps if steps is None else steps
    if steps:
        losses, hits = _optimize(st, "forward", steps)
        _summary(st, "forward", losses, hits, "warmup")
    st.warmup_params = st.ema_bwd.shadow.copy()
    return st.warmup_params


def alternate_stage(st: TrainState, steps=None):
    """One stage: backward field on fresh forward paths, then forward field on fresh backward paths."""
    steps = st.config.steps_per_stage if steps is None else steps
    st.stage += 1
    losses, hits = _optimize(st, "forward", steps)
    _summary(st, "forward", losses, hits, st.stage)
    losses, hits = _optimize(st, "backward", steps)
    _summary(st, "backward", losses, hits, st.stage)
    return st


def train(st: TrainState):
    if st.config.warmup:
        warmup(st)
    for _ in range(st.config.stages):
        alternate_stage(st)
    return st


def write_summaries(st: TrainState, path):
    with open(path, "w") as fh:
        for rec in st.summaries:
            fh.write(json.dumps(rec) + "\n")


def loss_stderr(values):
    v = np.asarray(values, dtype=float)
    return float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("inf")
