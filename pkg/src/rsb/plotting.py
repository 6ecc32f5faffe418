"""Optional PNG figures; matplotlib is imported only when a figure is requested."""
from __future__ import annotations

import numpy as np

from .errors import InputError


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise InputError("figures need matplotlib (pip install 'artifact[plot]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _outline(ax, domain):
    verts = getattr(domain, "vertices", None)
    if verts is not None and domain.dim == 2:
        v = np.vstack([verts, verts[:1]])
        ax.plot(v[:, 0], v[:, 1], "k-", lw=0.8)


def scatter(path, points, domain=None, title=None, reference=None):
    plt = _pyplot()
    pts = np.atleast_2d(points)
    fig, ax = plt.subplots(figsize=(5, 5))
    if pts.shape[1] == 1:
        ax.hist(pts[:, 0], bins=60, density=True, alpha=0.7, label="samples")
        if reference is not None:
            ax.hist(np.ravel(reference), bins=60, density=True, histtype="step", label="data")
            ax.legend()
    else:
        if reference is not None:
            ref = np.atleast_2d(reference)
            ax.scatter(ref[:, 0], ref[:, 1], s=1, c="0.7", label="data")
        ax.scatter(pts[:, 0], pts[:, 1], s=1, label="samples")
        if domain is not None:
            _outline(ax, domain)
        ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def paths(path, states, domain=None, max_paths=20, title=None):
    """A few sample paths: coordinate 0 against time in 1D, planar curves in 2D."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    s = states[:max_paths]
    if s.shape[2] == 1:
        ax.plot(np.arange(s.shape[1]), s[:, :, 0].T, lw=0.6)
        ax.set_xlabel("step")
    else:
        for p in s:
            ax.plot(p[:, 0], p[:, 1], lw=0.6)
        if domain is not None:
            _outline(ax, domain)
        ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def curves(path, series, xlabel="iteration", ylabel="value", logy=True, title=None):
    """``series`` maps a label to a 1D array."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, y in series.items():
        y = np.asarray(y, dtype=float)
        ax.plot(np.arange(len(y)), y, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
