import numpy as np
import pytest

from rsb.errors import InputError, NumericError
from rsb.scorenet import (
    Adam,
    Ema,
    Mlp,
    ScoreField,
    divergence,
    load_checkpoint,
    save_checkpoint,
    zero_field,
)


def naive_forward(widths, params, x, t):
    # plain loop evaluator, one point at a time
    out = []
    for xi, ti in zip(x, t):
        h = list(xi) + [ti]
        off = 0
        for li, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            W = params[off:off + a * b]
            off += a * b
            bias = params[off:off + b]
            off += b
            new = []
            for j in range(b):
                s = bias[j]
                for i in range(a):
                    s += h[i] * W[i * b + j]
                new.append(np.tanh(s) if li < len(widths) - 2 else s)
            h = new
        out.append(h)
    return np.array(out)


def test_zero_weights_give_zero():
    m = Mlp([3, 8, 2], params=np.zeros(Mlp([3, 8, 2]).n_params))
    assert np.all(m(np.ones((4, 2)), 0.3) == 0)


def test_identity_linear_layer():
    m = Mlp([3, 2])
    W = np.zeros((3, 2))
    W[0, 0] = W[1, 1] = 1.0
    m.params = np.concatenate([W.ravel(), np.zeros(2)])
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.array_equal(m(x, 0.7), x)


def test_forward_matches_independent_evaluator():
    m = Mlp([3, 4, 2], seed=42)
    m.params = np.random.default_rng(1).normal(size=m.n_params)
    rng = np.random.default_rng(2)
    x, t = rng.normal(size=(6, 2)), rng.uniform(size=6)
    assert np.max(np.abs(m(x, t) - naive_forward(m.widths, m.params, x, t))) <= 1e-12


def test_parameter_count_and_validation():
    assert Mlp([3, 64, 64, 2]).n_params == 3 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2
    with pytest.raises(InputError):
        Mlp([3])
    with pytest.raises(InputError):
        Mlp([3, 2], activation="relu")
    with pytest.raises(InputError):
        Mlp([3, 2], params=np.zeros(3))


def quad_loss(target):
    def f(Z):
        r = Z - target
        return 0.5 * np.sum(r * r), r
    return f


def fd_grad(m, x, t, loss, h=1e-5):
    g = np.zeros(m.n_params)
    for i in range(m.n_params):
        p = m.params.copy()
        p[i] += h
        lp = loss(m(x, t, p))[0]
        p[i] -= 2 * h
        lm = loss(m(x, t, p))[0]
        g[i] = (lp - lm) / (2 * h)
    return g


def test_gradient_zero_weights():
    m = Mlp([3, 5, 2], params=np.zeros(Mlp([3, 5, 2]).n_params))
    _, g = m.value_and_grad(np.ones((3, 2)), 0.5, quad_loss(0.0))
    assert np.all(g == 0)


def test_gradient_linear_model_closed_form():
    rng = np.random.default_rng(3)
    m = Mlp([4, 2])
    m.params = rng.normal(size=m.n_params)
    x, t, y = rng.normal(size=(10, 3)), rng.uniform(size=10), rng.normal(size=(10, 2))
    X = np.hstack([x, t[:, None]])
    W, b = m.layers()[0]
    R = X @ W + b - y
    expect = np.concatenate([(X.T @ R).ravel(), R.sum(axis=0)])
    _, g = m.value_and_grad(x, t, quad_loss(y))
    assert np.max(np.abs(g - expect)) <= 1e-10


@pytest.mark.parametrize("seed", range(50))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    act = ["tanh", "softplus", "silu"][seed % 3]
    d = 1 + seed % 3
    m = Mlp([d + 1, 5, 4, d], activation=act, seed=seed)
    m.params = rng.normal(0, 0.7, size=m.n_params)
    x, t, y = rng.normal(size=(7, d)), rng.uniform(size=7), rng.normal(size=(7, d))
    loss = quad_loss(y)
    _, g = m.value_and_grad(x, t, loss)
    fd = fd_grad(m, x, t, loss)
    assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


def test_nonfinite_loss_raises():
    m = Mlp([2, 2])
    with pytest.raises(NumericError):
        m.value_and_grad(np.ones((1, 1)), 0.0, lambda Z: (np.nan, np.zeros_like(Z)))


def test_score_field_zero_at_endpoints():
    m = Mlp([2, 4, 1], seed=0)
    m.params = np.ones(m.n_params)
    f = ScoreField(m, T=2.0)
    x = np.ones((3, 1))
    assert np.all(f(x, 0.0) == 0) and np.all(f(x, 2.0) == 0)
    assert np.all(f(x, 1.0) != 0)
    assert np.all(ScoreField(m, T=2.0, truncate=False)(x, 0.0) != 0)


# divergence

def test_divergence_identity_and_rotation():
    x = np.random.default_rng(0).normal(size=(10, 4))
    assert np.allclose(divergence(lambda y, t: y, x, 0.0), 4.0, atol=1e-8)
    rot = lambda y, t: np.stack([y[:, 1], -y[:, 0]], axis=1)  # noqa: E731
    assert np.allclose(divergence(rot, x[:, :2], 0.0), 0.0, atol=1e-8)
    assert np.allclose(divergence(zero_field, x, 0.0), 0.0)


def test_divergence_polynomial_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 3))

    def f(y, t):
        return np.stack([y[:, 0] ** 3 + y[:, 1], y[:, 1] ** 2 * y[:, 2], t * y[:, 2] ** 2 - y[:, 0]], axis=1)

    exact = 3 * x[:, 0] ** 2 + 2 * x[:, 1] * x[:, 2] + 2 * 0.5 * x[:, 2]
    assert np.max(np.abs(divergence(f, x, 0.5) - exact)) <= 1e-6


def test_hutchinson_within_three_stderr():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(3, 3))
    B = rng.normal(size=(3, 3, 3))

    def f(y, t):
        return y @ A.T + np.einsum("ijk,nj,nk->ni", B, y, y)

    x = rng.normal(size=(4, 3))
    exact = divergence(f, x, 0.0)
    est, se = divergence(f, x, 0.0, mode="hutchinson", probes=10000, seed=3, return_stderr=True)
    assert np.all(np.abs(est - exact) <= 3 * se)


def test_divergence_errors_and_warning():
    with pytest.raises(InputError):
        divergence(zero_field, np.ones((1, 2)), 0.0, mode="magic")
    with pytest.warns(RuntimeWarning):
        divergence(zero_field, np.ones((1, 65)), 0.0)


# optimizer and averaging

def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    assert np.array_equal(Adam().step(p, np.zeros(2)), p)


def test_adam_two_identical_gradients():
    opt = Adam(lr=0.1)
    p = np.zeros(3)
    g = np.array([0.5, -2.0, 1e-3])
    p1 = opt.step(p, g)
    p2 = opt.step(p1, g)
    for k, prev, cur in ((1, p, p1), (2, p1, p2)):
        m = (1 - 0.9**k) * g
        v = (1 - 0.999**k) * g * g
        mh, vh = m / (1 - 0.9**k), v / (1 - 0.999**k)
        assert np.allclose(cur - prev, -0.1 * mh / (np.sqrt(vh) + 1e-8), rtol=1e-12, atol=0)
    # bias correction makes each step close to -lr * sign(grad)
    assert np.allclose(p1, -0.1 * np.sign(g), rtol=1e-4)


def test_adam_shape_mismatch():
    with pytest.raises(InputError):
        Adam().step(np.zeros(2), np.zeros(3))


def test_ema():
    e = Ema(0.99, shadow=np.zeros(2))
    assert np.allclose(e.update(np.ones(2)), 0.01)
    with pytest.raises(InputError):
        Ema(1.0)


def test_checkpoint_round_trip(tmp_path):
    m = Mlp([3, 6, 2], activation="silu", seed=5, x_scale=4.0)
    ema = m.params * 0.5
    save_checkpoint(tmp_path / "m.ckpt", m, ema=ema, step=17, meta={"task": "x"})
    m2, ema2, hdr = load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(m2.params, m.params) and np.array_equal(ema2, ema)
    assert hdr["step"] == 17 and hdr["widths"] == [3, 6, 2] and hdr["meta"] == {"task": "x"}
    x = np.ones((2, 2))
    assert np.array_equal(m2(x, 0.1), m(x, 0.1))
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "bad.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-16])
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_determinism():
    a, b = Mlp([3, 8, 2], seed=9), Mlp([3, 8, 2], seed=9)
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, Mlp([3, 8, 2], seed=10).params)
