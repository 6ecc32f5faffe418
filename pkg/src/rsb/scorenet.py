"""Small numpy MLP vector fields z(x, t) with hand-written reverse mode, divergence, Adam and EMA."""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError


CKPT_MAGIC = b"RSBCKPT1"

_ACT = {
    "tanh": (np.tanh, lambda a, y: 1.0 - y * y),
    "softplus": (lambda a: np.logaddexp(0.0, a), lambda a, y: 1.0 / (1.0 + np.exp(-a))),
    "silu": (lambda a: a / (1.0 + np.exp(-a)),
             lambda a, y: (1.0 + np.exp(-a) + a * np.exp(-a)) / (1.0 + np.exp(-a)) ** 2),
}


class Mlp:
    """Fully connected net on the concatenated input ``(x, t)``; linear last layer.

    ``widths`` lists every layer size, input first, so a 2D field with two hidden
    layers of 64 has ``widths = [3, 64, 64, 2]``.  Parameters live in one flat
    vector; per-layer ``(W, b)`` are views into it.
    """

    def __init__(self, widths, activation="tanh", seed=0, params=None, x_scale=1.0, zero_last=False):
        self.widths = [int(w) for w in widths]
        # inputs are divided by x_scale so large domains do not saturate the activations
        self.x_scale = float(x_scale)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise InputError("an MLP needs at least input and output widths")
        if activation not in _ACT:
            raise InputError(f"unknown activation {activation!r}")
        self.activation = activation
        self.shapes = [(a, b) for a, b in zip(self.widths[:-1], self.widths[1:])]
        self.n_params = sum(a * b + b for a, b in self.shapes)
        if params is None:
            params = self.init_params(seed)
            if zero_last:
                a, b = self.shapes[-1]
                params[self.n_params - a * b - b:] = 0.0
        self.params = np.asarray(params, dtype=float).copy()
        if self.params.shape != (self.n_params,):
            raise InputError("parameter vector has the wrong length")

    @property
    def in_dim(self):
        return self.widths[0] - 1

    @property
    def out_dim(self):
        return self.widths[-1]

    def init_params(self, seed):
        rng = np.random.default_rng(seed)
        chunks = []
        for i, (a, b) in enumerate(self.shapes):
            scale = np.sqrt(1.0 / a)
            if i == len(self.shapes) - 1:
                scale *= 0.1
            chunks.append(rng.normal(0.0, scale, size=a * b))
            chunks.append(np.zeros(b))
        return np.concatenate(chunks)

    def layers(self, params=None):
        p = self.params if params is None else params
        out, off = [], 0
        for a, b in self.shapes:
            W = p[off:off + a * b].reshape(a, b)
            off += a * b
            out.append((W, p[off:off + b]))
            off += b
        return out

    def _inputs(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None]
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (len(x), 1))
        return np.hstack([x / self.x_scale, t])

    def forward(self, x, t, params=None):
        """Returns ``(output, cache)``."""
        act, _ = _ACT[self.activation]
        h = self._inputs(x, t)
        cache = [h]
        layers = self.layers(params)
        for i, (W, b) in enumerate(layers):
            a = h @ W + b
            if i < len(layers) - 1:
                h = act(a)
                cache.append((a, h))
            else:
                h = a
        return h, cache

    def __call__(self, x, t, params=None):
        return self.forward(x, t, params)[0]

    def backward(self, cache, d_out, params=None):
        """Parameter gradient of ``sum(d_out * output)``."""
        _, dact = _ACT[self.activation]
        layers = self.layers(params)
        grads = []
        delta = np.asarray(d_out, dtype=float)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            h_in = cache[0] if i == 0 else cache[i][1]
            grads.append((h_in.T @ delta, delta.sum(axis=0)))
            if i > 0:
                a, y = cache[i]
                delta = (delta @ W.T) * dact(a, y)
        flat = []
        for gW, gb in reversed(grads):
            flat.append(gW.ravel())
            flat.append(gb)
        return np.concatenate(flat)

    def value_and_grad(self, x, t, loss_of_outputs, params=None):
        """``loss_of_outputs(Z) -> (L, dL/dZ)``; returns ``(L, dL/dparams)``."""
        out, cache = self.forward(x, t, params)
        L, dZ = loss_of_outputs(out)
        if not np.isfinite(L):
            raise NumericError("non-finite loss")
        return float(L), self.backward(cache, dZ, params)

    def copy(self):
        return Mlp(self.widths, self.activation, params=self.params, x_scale=self.x_scale)


@dataclass
class ScoreField:
    """Callable ``z(x, t)`` wrapping a model, zeroed at the endpoints of ``[0, T]``."""

    model: Mlp
    params: np.ndarray = None
    T: float = None
    truncate: bool = True
    tol: float = 1e-12

    def __post_init__(self):
        if self.params is None:
            self.params = self.model.params

    def __call__(self, x, t):
        z = self.model(x, t, self.params)
        if self.truncate and self.T is not None:
            tt = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (len(z),))
            ends = (tt <= self.tol) | (tt >= self.T - self.tol * max(1.0, self.T))
            if np.any(ends):
                z = np.where(ends[:, None], 0.0, z)
        return z


def zero_field(x, t):
    return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))


def fd_step(x, rel=1e-5):
    """Finite-difference step tied to the input scale."""
    return rel * np.maximum(1.0, np.abs(np.asarray(x, dtype=float)))


def divergence(fn, x, t, mode="exact", probes=1, seed=0, return_stderr=False):
    """Divergence of ``fn(x, t)`` at each row of ``x``.

    ``exact`` sums central differences over coordinates; ``hutchinson`` averages
    ``v . (J v)`` over Rademacher probes, with ``J v`` from a central difference.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    if mode == "exact":
        if d > 64:
            warnings.warn(f"exact divergence in dimension {d} costs {2 * d} field evaluations",
                          RuntimeWarning, stacklevel=2)
        h = fd_step(x)
        div = np.zeros(n)
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            hp = h[:, i:i + 1]
            div += (fn(x + hp * e, t)[:, i] - fn(x - hp * e, t)[:, i]) / (2.0 * h[:, i])
        return (div, np.zeros(n)) if return_stderr else div
    if mode != "hutchinson":
        raise InputError(f"unknown divergence mode {mode!r}")
    rng = np.random.default_rng(seed)
    h = 1e-5 * np.maximum(1.0, np.abs(x).max(axis=1, keepdims=True))
    samples = np.empty((probes, n))
    for k in range(probes):
        v = rng.choice([-1.0, 1.0], size=(n, d))
        jv = (fn(x + h * v, t) - fn(x - h * v, t)) / (2.0 * h)
        samples[k] = np.sum(v * jv, axis=1)
    mean = samples.mean(axis=0)
    if return_stderr:
        se = samples.std(axis=0, ddof=1) / np.sqrt(probes) if probes > 1 else np.full(n, np.inf)
        return mean, se
    return mean


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    step_count: int = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if grad.shape != params.shape:
            raise InputError("gradient shape does not match parameters")
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1**self.step_count)
        vh = self.v / (1 - self.beta2**self.step_count)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class Ema:
    decay: float = 0.99
    shadow: np.ndarray = None

    def __post_init__(self):
        if not (0.0 < self.decay < 1.0):
            raise InputError("EMA decay must lie in (0, 1)")

    def update(self, params):
        if self.shadow is None:
            self.shadow = np.array(params, dtype=float, copy=True)
        else:
            self.shadow = self.decay * self.shadow + (1.0 - self.decay) * params
        return self.shadow


def save_checkpoint(path, model: Mlp, params=None, ema=None, step=0, meta=None):
    """Magic ``RSBCKPT1``, little-endian uint64 header length, JSON header, f64 params, optional f64 EMA."""
    p = model.params if params is None else params
    header = {"widths": model.widths, "activation": model.activation, "step": int(step),
              "x_scale": model.x_scale,
              "n_params": model.n_params, "has_ema": ema is not None, "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(np.asarray(p, dtype="<f8").tobytes())
        if ema is not None:
            fh.write(np.asarray(ema, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(model, ema_params or None, header)``."""
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise InputError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode())
        k = header["n_params"]
        params = np.frombuffer(fh.read(8 * k), dtype="<f8").copy()
        ema = np.frombuffer(fh.read(8 * k), dtype="<f8").copy() if header["has_ema"] else None
    if len(params) != k or (ema is not None and len(ema) != k):
        raise InputError(f"{path} is truncated")
    model = Mlp(header["widths"], header["activation"], params=params,
                x_scale=header.get("x_scale", 1.0))
    return model, ema, header
