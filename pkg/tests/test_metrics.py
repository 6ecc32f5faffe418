import math

import numpy as np
import pytest

from rsb.errors import InputError
from rsb.metrics import (
    exact_w1,
    ks_statistic,
    l1_hist_distance,
    sliced_w1,
    truncated_gaussian_cdf,
    truncated_gaussian_density,
)


def test_exact_w1_examples():
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert exact_w1(x, x) == pytest.approx(0.0, abs=1e-12)
    assert exact_w1([[0.0]], [[1.0]]) == pytest.approx(1.0)
    assert exact_w1([[0.0], [1.0]], [[0.5]]) == pytest.approx(0.5)


def test_exact_w1_weighted_one_dimensional_oracle():
    # in 1D W1 is the L1 distance between cdfs
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.normal(size=7), rng.normal(size=9)
        wa, wb = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(9))
        assert exact_w1(a, b, wa, wb) == pytest.approx(sliced_w1(a, b, wa=wa, wb=wb), abs=1e-9)


def test_exact_w1_symmetric_and_triangle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b, c = (rng.normal(size=(rng.integers(3, 12), 2)) for _ in range(3))
        ab, bc, ac = exact_w1(a, b), exact_w1(b, c), exact_w1(a, c)
        assert ab == pytest.approx(exact_w1(b, a), abs=1e-9)
        assert ac <= ab + bc + 1e-9


def test_exact_w1_translation_equivariance():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    shift = np.array([3.0, -1.0])
    assert exact_w1(a + shift, b + shift) == pytest.approx(exact_w1(a, b), abs=1e-9)
    # a pure translation moves every atom by |shift|
    assert exact_w1(a, a + shift) == pytest.approx(np.linalg.norm(shift), abs=1e-9)


def test_exact_w1_guards():
    with pytest.raises(InputError):
        exact_w1(np.zeros((300, 2)), np.zeros((300, 2)))
    with pytest.raises(InputError):
        exact_w1(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(InputError):
        exact_w1([[np.nan]], [[0.0]])
    with pytest.raises(InputError):
        exact_w1([[0.0]], [[1.0]], wa=[-1.0])


def test_sliced_examples():
    x = np.random.default_rng(4).normal(size=(20, 3))
    assert sliced_w1(x, x) == pytest.approx(0.0, abs=1e-12)
    assert sliced_w1([[0.0], [0.0]], [[1.0], [1.0]]) == pytest.approx(1.0)
    assert sliced_w1(x, x + 1.0, seed=5) == sliced_w1(x, x + 1.0, seed=5)


def test_sliced_versus_exact():
    # averaging over directions can only lose mass movement, so sliced <= exact;
    # for a translation v in 2D it equals E|cos| |v| = (2 / pi) |v|
    rng = np.random.default_rng(6)
    for _ in range(100):
        a = rng.normal(size=(64, 2))
        b = rng.normal(size=(64, 2)) + rng.normal(size=2)
        assert sliced_w1(a, b) <= exact_w1(a, b) + 1e-9
    for _ in range(20):
        a = rng.normal(size=(64, 2))
        v = rng.normal(size=2)
        s = sliced_w1(a, a + v, n_projections=2048)
        assert math.pi / 2 * s == pytest.approx(exact_w1(a, a + v), rel=0.15)


def test_ks():
    s = np.random.default_rng(7).normal(size=200)
    assert ks_statistic(s, s) == 0.0
    assert ks_statistic(np.linspace(0.0005, 0.9995, 1000), lambda u: np.clip(u, 0, 1)) <= 1e-3
    with pytest.raises(InputError):
        ks_statistic([], lambda u: u)


def test_truncated_gaussian():
    assert truncated_gaussian_density(0.0) == pytest.approx(0.39894 / 0.68269, abs=1e-5)
    # 0.58434 is the quotient of rounded constants; the exact value is 0.584369
    assert truncated_gaussian_density(0.0) == pytest.approx(0.58434, abs=5e-5)
    assert truncated_gaussian_density(1.5) == 0.0
    assert truncated_gaussian_cdf(-1.0) == 0.0 and truncated_gaussian_cdf(1.0) == pytest.approx(1.0)
    xs = np.linspace(-1, 1, 20001)
    mass = np.sum(truncated_gaussian_density(xs)[:-1] * np.diff(xs))
    assert mass == pytest.approx(1.0, abs=1e-4)


def test_l1_hist_self_distance():
    # bin-midpoint sample carrying exact bin masses has zero distance
    edges = np.linspace(-1, 1, 41)
    mass = np.diff(truncated_gaussian_cdf(edges))
    counts = np.round(mass * 1_000_000).astype(int)
    mids = 0.5 * (edges[:-1] + edges[1:])
    s = np.repeat(mids, counts)
    d_cdf = l1_hist_distance(s, cdf=truncated_gaussian_cdf, bins=40, range=(-1, 1))
    d_pdf = l1_hist_distance(s, truncated_gaussian_density, bins=40, range=(-1, 1))
    assert d_cdf <= 40 / 1_000_000
    assert d_pdf <= 40 / 1_000_000 + 1e-8
    with pytest.raises(InputError):
        l1_hist_distance(s)
