import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vlasovkam.errors import ParameterError, ShapeError
from vlasovkam.metrics import (CircleHistogram, circle_dist, concentration_witness, dist_Z,
                               dist_to_point, dist_weak, dist_weak_bruteforce,
                               monotone_rearrange, pushforward_histogram, window_fraction)


def test_circle_dist_examples():
    assert circle_dist(0.2, 0.9) == pytest.approx(0.3)
    assert circle_dist(0.37, 0.37) == 0.0
    assert circle_dist(0.0, 0.5) == 0.5
    assert circle_dist(3.1, -0.9) == pytest.approx(0.0, abs=1e-14)


def test_dist_Z_examples():
    assert dist_Z([0.1, 0.4], [0.1, 0.4]) == 0.0
    assert dist_Z(np.zeros(5), np.full(5, 0.5)) == 0.5
    assert dist_Z([0, 0.25], [0.9, 0.25]) == pytest.approx(np.sqrt(0.01 / 2))
    with pytest.raises(ShapeError):
        dist_Z([0, 1], [0])


def test_rearrange_examples():
    np.testing.assert_allclose(monotone_rearrange([1.7, 0.2]).m, [0.2, 0.7])
    m = np.array([0.0, 0.1, 0.6, 0.9])
    np.testing.assert_array_equal(monotone_rearrange(m).m, m)


def test_rearrange_keeps_histogram(rng):
    x = rng.random(10) * 6 - 3
    r = monotone_rearrange(x).m
    assert np.all(np.diff(r) >= 0)
    np.testing.assert_array_equal(pushforward_histogram(x, 7).mass, pushforward_histogram(r, 7).mass)


def test_dist_weak_examples(rng):
    a = rng.random(6)
    assert dist_weak(a, a) == 0.0
    assert dist_weak([0.0], [0.5]) == 0.5
    m, mb = rng.random(5), rng.random(5)
    cost = circle_dist(m[:, None], mb[None, :]) ** 2
    best = min(np.mean(cost[list(p), range(5)]) for p in itertools.permutations(range(5)))
    assert dist_weak(m, mb) == pytest.approx(np.sqrt(best), abs=1e-12)
    with pytest.raises(ShapeError):
        dist_weak([0.1], [0.1, 0.2])


def test_bruteforce_limit():
    with pytest.raises(ParameterError):
        dist_weak_bruteforce(np.zeros(9), np.zeros(9))


ens = st.integers(1, 7).flatmap(lambda n: st.tuples(
    *[arrays(np.float64, n, elements=st.floats(-3, 3, allow_nan=False))] * 3))


@given(ens)
@settings(max_examples=150, deadline=None)
def test_dist_weak_pseudometric(triple):
    a, b, c = triple
    assert dist_weak(a, b) == dist_weak(b, a)
    assert dist_weak(a, c) <= dist_weak(a, b) + dist_weak(b, c) + 1e-9
    assert dist_weak(a, b) <= dist_Z(a, b) + 1e-15
    assert abs(dist_weak(a, b) - dist_weak_bruteforce(a, b)) <= 1e-12


@given(ens, st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_dist_weak_invariant_under_relabel_and_shift(triple, r):
    a, b, _ = triple
    perm = list(range(a.size))
    r.shuffle(perm)
    shifts = np.array([r.randint(-2, 2) for _ in perm], dtype=float)
    a2 = a[perm] + shifts
    assert abs(dist_weak(a2, b) - dist_weak(a, b)) <= 1e-12
    assert dist_weak(a2, a) <= 1e-12


def test_dist_to_point():
    assert dist_to_point([0.1, 0.1], 0.1) == 0.0
    assert dist_to_point([0.0, 0.5], 0.0) == pytest.approx(np.sqrt(0.125))
    assert dist_to_point([0.2, 0.4], 0.3) == pytest.approx(dist_weak([0.2, 0.4], [0.3, 0.3]))


def test_histogram_examples(rng):
    np.testing.assert_array_equal(pushforward_histogram(np.zeros(5), 4).mass, [1, 0, 0, 0])
    np.testing.assert_array_equal(pushforward_histogram([0, 0.5], 2).mass, [0.5, 0.5])
    assert pushforward_histogram(rng.random(33) * 10, 13).mass.sum() == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        pushforward_histogram([0.1], 1)
    with pytest.raises(ParameterError):
        CircleHistogram(2, np.array([0.7, 0.7]))


def test_witness_examples():
    assert concentration_witness(np.full(4, 0.3), 0.01) == pytest.approx(0.3)
    assert concentration_witness(np.arange(16) / 16, 0.05) is None
    m = np.concatenate([np.full(95, 0.3), np.full(5, 0.8)])
    assert concentration_witness(m, 0.06) == pytest.approx(0.3)
    for bad in (0.0, 0.2, -1.0):
        with pytest.raises(ParameterError):
            concentration_witness(m, bad)


def test_witness_wraps_around_zero():
    m = np.array([0.999, 1.0, 2.0005, 0.9995])
    x = concentration_witness(m, 0.01)
    assert x is not None
    assert window_fraction(m, x, 0.01) == 1.0
