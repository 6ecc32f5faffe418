"""Command-line entry point: ``rsb simulate | sinkhorn | train | generate | nll | diagnose``.

Every command reads an optional JSON config (``--config``), applies flag
overrides, writes the resolved config to ``<out>/config.json`` and then its
outputs.  Re-running on the resolved config reproduces the outputs.
Exit codes: 0 success, 2 input error, 3 non-convergence.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .domains import Hypercube, make_domain
from .errors import GeometryError, InputError, NumericError, SingularityError
from .metrics import (
    ks_statistic,
    l1_hist_distance,
    sliced_w1,
    truncated_gaussian_cdf,
)
from .sde import DriftSpec, TimeGrid

log = logging.getLogger("rsb")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3

DOMAIN_ALIASES = {
    "heart": {"kind": "heart"},
    "flower": {"kind": "flower", "petals": 5, "move_out": 3.0},
    "octagon": {"kind": "octagon", "radius": 5.0},
    "interval": {"kind": "hypercube", "dim": 1, "lower": -1.0, "upper": 1.0},
    "unit-interval": {"kind": "hypercube", "dim": 1, "lower": 0.0, "upper": 1.0},
    "square": {"kind": "hypercube", "dim": 2, "lower": 0.0, "upper": 1.0},
    "disk": {"kind": "ball", "dim": 2, "radius": 1.0},
    "simplex": {"kind": "simplex", "dim": 2},
}

DRIFT_KEYS = {"kind", "epsilon", "T", "beta_min", "beta_max", "sigma_min", "sigma_max", "g0"}

DEFAULTS = {
    "simulate": {
        "seed": 0, "out": "runs/simulate", "workers": 1, "figures": False,
        "domain": "heart", "drift": {"kind": "rve"}, "grid": {"T": 1.0, "n_steps": 100},
        "paths": 1000, "direction": "forward", "start": "uniform", "store": "full",
        "format": "csv",
    },
    "sinkhorn": {
        "seed": 0, "out": "runs/sinkhorn", "workers": 1, "figures": False,
        "m": 30, "n": 30, "dim": 2, "cost_sup": 0.05, "epsilon": 1.0,
        "centered": False, "perturb": 0.0, "max_iters": 500, "tol": 1e-12,
        "mu_csv": None, "nu_csv": None, "track_w1": False,
    },
    "train": {
        "seed": 0, "out": "runs/train", "workers": 1, "figures": False,
        "task": "checkerboard-heart", "drift": {}, "grid": {"n_steps": 100},
        "training": {},
    },
    "generate": {
        "seed": 0, "out": "runs/generate", "workers": 1, "figures": False,
        "ckpt": "runs/train", "n": 10000, "nfe": None, "corrector_steps": 0,
        "use_warmup": False, "compare_warmup": None, "data_seed": 12345,
    },
    "nll": {
        "seed": 0, "out": "runs/nll", "workers": 1, "figures": False,
        "ckpt": None, "scores": "checkpoint", "domain": "unit-interval", "drift": {"kind": "rve"},
        "n": 256, "nfe": 100, "div": None, "probes": 1, "method": "rk4", "data_seed": 12345,
    },
    "diagnose": {
        "seed": 0, "out": "runs/diagnose", "workers": 1, "figures": False,
        "domain": "heart", "points": 2000, "paths": 256, "steps": 50,
    },
}

TRAIN_KEYS = {"batch_size", "stages", "steps_per_stage", "warmup_steps", "lr", "time_samples",
              "boundary_weight", "hidden", "activation", "cache_paths", "ema_decay", "grad_clip",
              "warmup"}


# -- configuration ----------------------------------------------------------

def _check_keys(cfg, allowed, where):
    extra = set(cfg) - set(allowed)
    if extra:
        raise InputError(f"unknown keys in {where}: {sorted(extra)}")


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object")
    return cfg


def resolve_config(command, file_cfg=None, overrides=None):
    """Defaults, then file values, then flag overrides; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS[command])
    file_cfg = dict(file_cfg or {})
    file_cfg.pop("command", None)
    _check_keys(file_cfg, cfg, f"{command} config")
    for key, val in list(file_cfg.items()) + list((overrides or {}).items()):
        if val is None:
            continue
        if isinstance(cfg.get(key), dict) and isinstance(val, dict) and key != "domain":
            cfg[key] = {**cfg[key], **val}
        else:
            cfg[key] = val
    if "drift" in cfg:
        _check_keys(cfg["drift"], DRIFT_KEYS, "drift")
    if "grid" in cfg:
        _check_keys(cfg["grid"], {"T", "n_steps"}, "grid")
    if "training" in cfg:
        _check_keys(cfg["training"], TRAIN_KEYS, "training")
    cfg["command"] = command
    return cfg


def domain_spec(value):
    if isinstance(value, str):
        if value not in DOMAIN_ALIASES:
            raise InputError(f"unknown domain {value!r}; choose from {sorted(DOMAIN_ALIASES)}")
        return dict(DOMAIN_ALIASES[value])
    if isinstance(value, dict):
        if "kind" not in value:
            raise InputError("domain mapping needs a 'kind'")
        return dict(value)
    raise InputError("domain must be a name or a mapping")


def _drift(cfg_drift, T=None):
    kw = dict(cfg_drift)
    if T is not None:
        kw.setdefault("T", T)
    return DriftSpec(**kw)


def _out_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_points(path, x, header=True):
    x = np.atleast_2d(x)
    with open(path, "w") as fh:
        if header:
            fh.write(",".join(f"x{i}" for i in range(x.shape[1])) + "\n")
        for row in x:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _write_gnuplot(path, x):
    with open(path, "w") as fh:
        fh.write("# " + " ".join(f"x{i}" for i in range(x.shape[1])) + "\n")
        for row in x:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _reference_law(drift, domain):
    """Invariant law of the reference dynamics on an interval, if known."""
    if not (isinstance(domain, Hypercube) and domain.dim == 1):
        return None
    lo, hi = float(domain.lower[0]), float(domain.upper[0])
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return None
    if drift.kind in ("reflected-ou", "rvp"):
        return "truncated-gaussian", (lo, hi)
    if drift.kind == "rve" or (drift.kind == "custom" and drift.custom_f is None):
        return "uniform", (lo, hi)
    return None


# -- commands ---------------------------------------------------------------

def cmd_simulate(cfg):
    from .sde import simulate_backward_reflected, simulate_forward_reflected, write_binary, write_csv

    out = _out_dir(cfg)
    spec = domain_spec(cfg["domain"])
    domain = make_domain(spec)
    grid = TimeGrid(**cfg["grid"])
    drift = _drift(cfg["drift"], grid.T)
    n = int(cfg["paths"])
    if n < 1:
        raise InputError("paths must be positive")
    rng = np.random.default_rng([int(cfg["seed"]), 17])
    start = cfg["start"]
    if start == "uniform":
        x0 = domain.sample_uniform(n, rng)
    else:
        x0 = np.broadcast_to(np.asarray(start, dtype=float).reshape(1, -1), (n, domain.dim)).copy()
        if not np.all(domain._contains(x0)):
            raise InputError("start point lies outside the domain")
    if cfg["store"] not in ("full", "terminal"):
        raise InputError("store must be 'full' or 'terminal'")
    sim = simulate_forward_reflected if cfg["direction"] == "forward" else simulate_backward_reflected
    if cfg["direction"] not in ("forward", "backward"):
        raise InputError("direction must be 'forward' or 'backward'")
    traj = sim(drift, None, x0, grid, domain, seed=int(cfg["seed"]), store=cfg["store"])
    inside = bool(np.all(domain._contains(traj.states.reshape(-1, domain.dim))))
    fmt = cfg["format"]
    if fmt not in ("csv", "binary", "both"):
        raise InputError("format must be csv, binary or both")
    if fmt in ("csv", "both"):
        write_csv(traj, out / "trajectories.csv")
    if fmt in ("binary", "both"):
        write_binary(traj, out / "trajectories.bin")
    summary = {"hit_fraction": traj.hit_fraction(), "all_inside": inside, "paths": n,
               "n_steps": grid.n_steps, "terminal_ks_vs_reference": None,
               "terminal_l1_vs_reference": None, "reference": None}
    ref = _reference_law(drift, domain)
    if ref is not None:
        kind, (lo, hi) = ref
        xt = traj.terminal[:, 0]
        if kind == "uniform":
            cdf = lambda v: np.clip((np.asarray(v) - lo) / (hi - lo), 0.0, 1.0)  # noqa: E731
        else:
            cdf = lambda v: truncated_gaussian_cdf(v, (lo, hi))  # noqa: E731
        summary["reference"] = kind
        summary["terminal_ks_vs_reference"] = ks_statistic(xt, cdf)
        summary["terminal_l1_vs_reference"] = l1_hist_distance(xt, bins=40, range=(lo, hi), cdf=cdf)
    _write_json(out / "summary.json", summary)
    if cfg["figures"] and traj.full:
        from . import plotting

        plotting.paths(out / "paths.png", traj.states, domain)
    return EXIT_OK if inside else EXIT_NONCONVERGED


def _read_measure_csv(path, dim=None):
    """Rows ``x_1, ..., x_d, weight``; a header line is allowed."""
    from .eot import DiscreteMeasure

    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    except FileNotFoundError as exc:
        raise InputError(f"measure file {path} not found") from exc
    rows = []
    for i, ln in enumerate(lines):
        parts = ln.split(",")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            if i == 0:
                continue
            raise InputError(f"{path}: line {i + 1} is not numeric") from None
    if not rows or len({len(r) for r in rows}) != 1 or len(rows[0]) < 2:
        raise InputError(f"{path}: need rows of coordinates followed by a weight")
    arr = np.asarray(rows)
    w = arr[:, -1]
    if not np.all(np.isfinite(arr)) or np.any(w < 0) or w.sum() <= 0:
        raise InputError(f"{path}: weights must be finite, nonnegative and not all zero")
    return DiscreteMeasure.normalized(arr[:, :-1], w)


def cmd_sinkhorn(cfg):
    from . import eot

    out = _out_dir(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    if cfg["mu_csv"] or cfg["nu_csv"]:
        if not (cfg["mu_csv"] and cfg["nu_csv"]):
            raise InputError("give both mu_csv and nu_csv")
        mu = _read_measure_csv(cfg["mu_csv"])
        nu = _read_measure_csv(cfg["nu_csv"])
        if mu.atoms.shape[1] != nu.atoms.shape[1]:
            raise InputError("measures live in different dimensions")
    else:
        m, n, d = int(cfg["m"]), int(cfg["n"]), int(cfg["dim"])
        if min(m, n, d) < 1:
            raise InputError("sizes must be positive")
        mu = eot.DiscreteMeasure.normalized(rng.uniform(size=(m, d)), rng.dirichlet(np.ones(m)))
        nu = eot.DiscreteMeasure.normalized(rng.uniform(size=(n, d)), rng.dirichlet(np.ones(n)))
    cost = eot.CostMatrix.squared_euclidean(mu.atoms, nu.atoms, epsilon=float(cfg["epsilon"]))
    if cfg["cost_sup"] is not None and cost.sup_norm > 0:
        cost.values *= float(cfg["cost_sup"]) / cost.sup_norm
    pert = float(cfg["perturb"])
    if pert < 0:
        raise InputError("perturb must be nonnegative")
    if pert > 0:
        mu_seq = lambda k: eot.perturb_marginal(mu, pert, seed=int(cfg["seed"]) * 7919 + k)  # noqa: E731
    else:
        mu_seq = mu
    track = bool(cfg["track_w1"]) and len(mu) * len(nu) * 2 <= 512
    state, diag = eot.solve(mu_seq, nu.weights, cost, max_iters=int(cfg["max_iters"]),
                            tol=float(cfg["tol"]), centered=bool(cfg["centered"]),
                            mu_star=mu.weights, atoms=(mu.atoms, nu.atoms), track_w1=track,
                            stop_on_tol=pert == 0)
    diag.write_jsonl(out / "diagnostics.jsonl")
    pi = eot.coupling_from_potentials(state.phi, state.psi, mu.weights, nu.weights, cost)
    with open(out / "coupling.csv", "w") as fh:
        for row in pi:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    summary = diag.summary()
    summary.update({"cost_sup": cost.sup_norm, "perturb": pert, "centered": bool(cfg["centered"]),
                    "final_gap": diag[-1]["gap"], "final_residual": diag[-1]["residual"]})
    if pert > 0:
        # perturbed marginals never reach the tolerance; the plateau is the outcome
        summary["converged"] = None
    _write_json(out / "summary.json", summary)
    if cfg["figures"]:
        from . import plotting

        gaps = np.maximum(diag.column("gap"), 1e-300)
        plotting.curves(out / "gap.png", {"gap": gaps}, ylabel="dual gap")
    if pert == 0 and not diag.converged:
        log.warning("sinkhorn did not reach tol=%g in %d iterations", cfg["tol"], cfg["max_iters"])
        return EXIT_NONCONVERGED
    return EXIT_OK


def _task_setup(cfg):
    from .tasks import get_task

    task = get_task(cfg["task"])
    domain = task.domain()
    grid = TimeGrid(cfg["grid"].get("T", task.T), cfg["grid"].get("n_steps", 100))
    drift = task.drift(**{**cfg["drift"], "T": grid.T})
    return task, domain, grid, drift


def cmd_train(cfg):
    from .scorenet import save_checkpoint
    from .training import TrainConfig, alternate_stage, init_state, warmup, write_summaries

    out = _out_dir(cfg)
    task, domain, grid, drift = _task_setup(cfg)
    tc = dict(cfg["training"])
    if "hidden" in tc:
        tc["hidden"] = tuple(int(h) for h in tc["hidden"])
    config = TrainConfig(seed=int(cfg["seed"]), **tc)
    st = init_state(drift, grid, domain, config, lambda n, r: task.sample(domain, n, r))
    meta = {"task": task.name, "drift": drift.to_dict(), "grid": {"T": grid.T, "n_steps": grid.n_steps},
            "training": config.to_dict()}
    if config.warmup:
        warmup(st)
    else:
        st.warmup_params = st.ema_bwd.shadow.copy()
    save_checkpoint(out / "z_bwd_warmup.ckpt", st.model_bwd, st.warmup_params, None, 0,
                    {**meta, "field": "bwd", "stage": "warmup"})
    for _ in range(config.stages):
        alternate_stage(st)
    save_checkpoint(out / "z_fwd.ckpt", st.model_fwd, st.model_fwd.params, st.ema_fwd.shadow,
                    st.stage, {**meta, "field": "fwd"})
    save_checkpoint(out / "z_bwd.ckpt", st.model_bwd, st.model_bwd.params, st.ema_bwd.shadow,
                    st.stage, {**meta, "field": "bwd"})
    write_summaries(st, out / "training.jsonl")
    _write_json(out / "summary.json", {"task": task.name, "stages": st.stage, "summaries": st.summaries})
    return EXIT_OK


def _load_field(path, T):
    from .scorenet import ScoreField, load_checkpoint

    if not Path(path).is_file():
        raise InputError(f"checkpoint {path} not found")
    model, ema, header = load_checkpoint(path)
    params = ema if ema is not None else model.params
    return ScoreField(model, params, T=T), header


def _ckpt_dir(cfg):
    d = Path(cfg["ckpt"]) if cfg["ckpt"] else None
    if d is None or not (d / "z_bwd.ckpt").is_file():
        raise InputError(f"no checkpoint found in {d}")
    return d


def _setup_from_ckpt(d):
    from .tasks import get_task

    from .scorenet import load_checkpoint

    meta = load_checkpoint(d / "z_bwd.ckpt")[2]["meta"]
    task = get_task(meta["task"])
    drift = DriftSpec(**meta["drift"])
    return task, task.domain(), drift, meta


def cmd_generate(cfg):
    from .sampling import PriorSpec, generate

    d = _ckpt_dir(cfg)
    task, domain, drift, meta = _setup_from_ckpt(d)
    out = _out_dir(cfg)
    T = meta["grid"]["T"]
    nfe = int(cfg["nfe"]) if cfg["nfe"] else int(meta["grid"]["n_steps"])
    grid = TimeGrid(T, nfe)
    n = int(cfg["n"])
    seed = int(cfg["seed"])
    z_bwd, _ = _load_field(d / ("z_bwd_warmup.ckpt" if cfg["use_warmup"] else "z_bwd.ckpt"), T)
    z_fwd = None
    if int(cfg["corrector_steps"]) > 0 and not cfg["use_warmup"]:
        z_fwd, _ = _load_field(d / "z_fwd.ckpt", T)
    x = generate(PriorSpec(), z_bwd, drift, grid, domain, n, seed=seed, z_fwd=z_fwd,
                 corrector_steps=int(cfg["corrector_steps"]))
    _write_points(out / "samples.csv", x)
    _write_gnuplot(out / "samples.dat", x)
    data = task.sample(domain, n, np.random.default_rng(int(cfg["data_seed"])))
    diam = domain.diameter()
    sw = sliced_w1(x, data, seed=seed)
    summary = {"task": task.name, "n": n, "nfe": nfe, "sliced_w1": sw, "diameter": diam,
               "sliced_w1_over_diameter": sw / diam, "threshold": 0.15 * diam,
               "all_inside": bool(np.all(domain._contains(x)))}
    _write_json(out / "summary.json", summary)
    compare = cfg["compare_warmup"]
    if compare is None:
        compare = cfg["nfe"] is not None
    if compare and not cfg["use_warmup"]:
        zw, _ = _load_field(d / "z_bwd_warmup.ckpt", T)
        xw = generate(PriorSpec(), zw, drift, grid, domain, n, seed=seed)
        sw_w = sliced_w1(xw, data, seed=seed)
        _write_json(out / "comparison.json", {"nfe": nfe, "sliced_w1_trained": sw,
                                              "sliced_w1_warmup": sw_w,
                                              "trained_not_worse": bool(sw <= sw_w)})
    if cfg["figures"]:
        from . import plotting

        plotting.scatter(out / "samples.png", x, domain, reference=data[:2000],
                         title=f"{task.name}, {nfe} steps")
    return EXIT_OK


def cmd_nll(cfg):
    from .sampling import PriorSpec, nll

    mode = cfg["scores"]
    rng = np.random.default_rng(int(cfg["data_seed"]))
    n = int(cfg["n"])
    if mode == "checkpoint":
        d = _ckpt_dir(cfg)
        task, domain, drift, meta = _setup_from_ckpt(d)
        T = meta["grid"]["T"]
        z_fwd, _ = _load_field(d / "z_fwd.ckpt", T)
        z_bwd, _ = _load_field(d / "z_bwd.ckpt", T)
        x0 = task.sample(domain, n, rng)
        prior, as_scores = PriorSpec(), False
    elif mode in ("zero", "analytic-ou"):
        domain = make_domain(domain_spec(cfg["domain"]))
        drift = _drift(cfg["drift"])
        T = drift.T
        if mode == "zero":
            z_fwd = z_bwd = None
            prior = PriorSpec()
            x0 = domain.sample_uniform(n, rng)
        else:
            ref = _reference_law(drift, domain)
            if ref is None or ref[0] != "truncated-gaussian":
                raise InputError("analytic-ou needs an OU-type drift on an interval")

            # stationary bridge: the forward potential is constant, the backward one is the density
            z_fwd = None

            def z_bwd(x, t):
                return -np.asarray(x, dtype=float)

            prior = PriorSpec("truncated-gaussian")
            x0 = np.linspace(domain.lower[0], domain.upper[0], n + 2)[1:-1, None]
        as_scores = mode == "analytic-ou"
    else:
        raise InputError("scores must be checkpoint, zero or analytic-ou")
    out = _out_dir(cfg)
    grid = TimeGrid(T, int(cfg["nfe"]))
    rep = nll(x0, z_fwd, z_bwd, drift, grid, domain, prior, div_mode=cfg["div"],
              probes=int(cfg["probes"]), seed=int(cfg["seed"]), method=cfg["method"],
              fields_are_scores=as_scores)
    _write_json(out / "nll.json", {**rep.to_dict(), "n": len(x0), "scores": mode})
    with open(out / "nll.csv", "w") as fh:
        fh.write(",".join([f"x{i}" for i in range(x0.shape[1])] + ["nats", "guard"]) + "\n")
        for xi, v, gflag in zip(x0, rep.nats, rep.guard_events):
            fh.write(",".join([repr(float(c)) for c in xi] + [repr(float(v)), str(int(gflag))]) + "\n")
    return EXIT_OK


def cmd_diagnose(cfg):
    """Quick health checks of a domain and the solver: normals, folding, Sinkhorn rate."""
    from . import eot

    out = _out_dir(cfg)
    domain = make_domain(domain_spec(cfg["domain"]))
    rng = np.random.default_rng(int(cfg["seed"]))
    checks = {}
    b = domain.boundary_samples(int(cfg["points"]), rng)
    nrm = domain.inward_normal(b)
    delta = 1e-9 * domain.diameter()
    checks["normals_point_inward"] = bool(np.all(domain._contains(b + delta * nrm)))
    x = domain.sample_uniform(int(cfg["paths"]), rng)
    scale = 0.2 * domain.diameter()
    ok = True
    for _ in range(int(cfg["steps"])):
        prop = x + scale * rng.standard_normal(x.shape)
        x = domain.fold(x, prop, mode="reflect").x
        ok &= bool(np.all(domain._contains(x)))
    checks["fold_confinement"] = ok
    m = 20
    mu = rng.dirichlet(np.ones(m))
    nu = rng.dirichlet(np.ones(m))
    c = eot.CostMatrix(rng.uniform(size=(m, m)))
    c.values *= 0.05 / c.sup_norm
    _, diag = eot.solve(mu, nu, c, tol=1e-12)
    checks["sinkhorn_converged"] = bool(diag.converged)
    checks["sinkhorn_ratio_within_bound"] = bool(diag.fitted_ratio is None
                                                 or diag.fitted_ratio <= diag.bound)
    report = {"domain": cfg["domain"], "volume": domain.volume(), "diameter": domain.diameter(),
              "checks": checks, "ok": all(checks.values())}
    _write_json(out / "diagnose.json", report)
    return EXIT_OK if report["ok"] else EXIT_NONCONVERGED


COMMANDS = {"simulate": cmd_simulate, "sinkhorn": cmd_sinkhorn, "train": cmd_train,
            "generate": cmd_generate, "nll": cmd_nll, "diagnose": cmd_diagnose}


# -- argument parsing -------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker count (outputs do not depend on it)")
    p.add_argument("--figures", action="store_true", default=None, help="also write PNG figures")


def build_parser():
    ap = argparse.ArgumentParser(prog="rsb", description="Reflected Schrodinger bridge toolkit")
    ap.add_argument("--version", action="version", version=f"rsb {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate reflected reference paths")
    _common(p)
    p.add_argument("--domain")
    p.add_argument("--drift", help="rve | rvp | reflected-ou | custom")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--T", type=float)
    p.add_argument("--direction", choices=["forward", "backward"])
    p.add_argument("--store", choices=["full", "terminal"])
    p.add_argument("--format", choices=["csv", "binary", "both"])

    p = sub.add_parser("sinkhorn", help="run (centered) Sinkhorn with diagnostics")
    _common(p)
    p.add_argument("--atoms", type=int, help="atoms in each marginal")
    p.add_argument("--dim", type=int)
    p.add_argument("--cost-sup", type=float)
    p.add_argument("--centered", action="store_true", default=None)
    p.add_argument("--perturb", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--mu-csv")
    p.add_argument("--nu-csv")
    p.add_argument("--track-w1", action="store_true", default=None)

    p = sub.add_parser("train", help="warm-up plus alternating training on a built-in task")
    _common(p)
    p.add_argument("--task")
    p.add_argument("--stages", type=int)
    p.add_argument("--steps-per-stage", type=int)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int, help="time grid steps")
    p.add_argument("--sigma-max", type=float)

    p = sub.add_parser("generate", help="sample with the backward reflected SDE")
    _common(p)
    p.add_argument("--ckpt", help="training output directory")
    p.add_argument("-n", type=int)
    p.add_argument("--nfe", type=int, help="integration steps; also writes comparison.json")
    p.add_argument("--corrector-steps", type=int)
    p.add_argument("--use-warmup", action="store_true", default=None)

    p = sub.add_parser("nll", help="probability-flow negative log-likelihood")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--scores", choices=["checkpoint", "zero", "analytic-ou"])
    p.add_argument("--domain")
    p.add_argument("--drift")
    p.add_argument("-n", type=int)
    p.add_argument("--nfe", type=int)
    p.add_argument("--div", choices=["exact", "hutchinson"])
    p.add_argument("--probes", type=int)

    p = sub.add_parser("diagnose", help="domain and solver health checks")
    _common(p)
    p.add_argument("--domain")
    return ap


def _overrides(args):
    a = vars(args)
    o = {k: a.get(k) for k in ("seed", "out", "workers", "figures")}
    cmd = args.command
    if cmd == "simulate":
        o.update({k: a[k] for k in ("domain", "paths", "direction", "store", "format")})
        drift = {k: v for k, v in (("kind", a["drift"]), ("epsilon", a["epsilon"])) if v is not None}
        o["drift"] = drift or None
        grid = {k: v for k, v in (("n_steps", a["steps"]), ("T", a["T"])) if v is not None}
        o["grid"] = grid or None
    elif cmd == "sinkhorn":
        o.update({"m": a["atoms"], "n": a["atoms"], "dim": a["dim"], "cost_sup": a["cost_sup"],
                  "centered": a["centered"], "perturb": a["perturb"], "max_iters": a["max_iters"],
                  "tol": a["tol"], "mu_csv": a["mu_csv"], "nu_csv": a["nu_csv"],
                  "track_w1": a["track_w1"]})
    elif cmd == "train":
        o["task"] = a["task"]
        tr = {k: a[k] for k in ("stages", "steps_per_stage", "warmup_steps", "batch_size")
              if a[k] is not None}
        o["training"] = tr or None
        o["grid"] = {"n_steps": a["steps"]} if a["steps"] is not None else None
        o["drift"] = {"sigma_max": a["sigma_max"]} if a["sigma_max"] is not None else None
    elif cmd == "generate":
        o.update({"ckpt": a["ckpt"], "n": a["n"], "nfe": a["nfe"],
                  "corrector_steps": a["corrector_steps"], "use_warmup": a["use_warmup"]})
    elif cmd == "nll":
        o.update({"ckpt": a["ckpt"], "scores": a["scores"], "domain": a["domain"], "n": a["n"],
                  "nfe": a["nfe"], "div": a["div"], "probes": a["probes"]})
        o["drift"] = {"kind": a["drift"]} if a["drift"] else None
    elif cmd == "diagnose":
        o["domain"] = a["domain"]
    return o


def _setup_logging():
    level = os.environ.get("RSB_LOG", "WARNING").upper()
    if level.isdigit():
        level = int(level)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        file_cfg = load_config(args.config) if args.config else {}
        if file_cfg.get("command", args.command) != args.command:
            raise InputError(f"config is for {file_cfg['command']!r}, not {args.command!r}")
        cfg = resolve_config(args.command, file_cfg, _overrides(args))
        return COMMANDS[args.command](cfg)
    except (InputError, GeometryError, SingularityError) as exc:
        print(f"rsb {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"rsb {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
