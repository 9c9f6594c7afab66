import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlasovkam.core import make_potential
from vlasovkam.errors import ConvergenceError, ParameterError, ShapeError
from vlasovkam.weakkam import (MatherSample, TransitionCost, ValueFunction, alpha_vlasov,
                               backward_minimizer_chain, build_transition_cost, flow_defect,
                               gap_detector, lax_oleinik_apply, lax_oleinik_raw,
                               mather_set_samples, n_particle_value, rotation_number,
                               solve_weak_kam)
from vlasovkam.action import ActionProblem, TerminalBoundary, minimize_terminal


def _free_closed_form(G, c, windings=range(-3, 4)):
    x = np.arange(G) / G
    d = x[None, :] - x[:, None]
    vals = np.stack([0.5 * (d + k) ** 2 - c * (d + k) for k in windings])
    return vals.min(axis=0)


@pytest.mark.parametrize("c", [0.0, 0.7, -1.3])
def test_free_cost_closed_form(free, c):
    tc = build_transition_cost(free, c, 16, 0.05)
    np.testing.assert_allclose(tc.h, _free_closed_form(16, c), atol=1e-12)
    if c == 0.0:
        np.testing.assert_allclose(np.diag(tc.h), 0.0, atol=1e-15)


def test_pendulum_cost_below_free_bound(pendulum):
    tc = build_transition_cost(pendulum, 0.3, 16, 0.05)
    assert np.all(tc.h <= _free_closed_form(16, 0.3) + 2 * pendulum.sup_abs_v() + 1e-12)


def test_cost_cache_roundtrip(pendulum, tmp_path):
    a = build_transition_cost(pendulum, 0.1, 16, 0.05, cache_dir=tmp_path)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    assert files[0].read_bytes().split(b"\n", 1)[0].decode() == a.header()
    b = build_transition_cost(pendulum, 0.1, 16, 0.05, cache_dir=tmp_path)
    np.testing.assert_array_equal(a.h, b.h)
    np.testing.assert_array_equal(a.winding, b.winding)
    with pytest.raises(ParameterError):
        TransitionCost.load(files[0], expect_header="transition-cost v1 other")


def test_cost_grid_floor(free):
    with pytest.raises(ParameterError):
        build_transition_cost(free, 0.0, 8, 0.05)


def test_operator_examples(free):
    tc = build_transition_cost(free, 0.0, 16, 0.05)
    out = lax_oleinik_apply(ValueFunction.zeros(16), tc)
    np.testing.assert_allclose(out.values, 0.0, atol=1e-15)
    assert out.alpha == 0.0
    u = np.random.default_rng(1).normal(size=16)
    a = lax_oleinik_apply(ValueFunction(16, u, 0.0, 0.0), tc)
    b = lax_oleinik_apply(ValueFunction(16, u + 3.5, 0.0, 0.0), tc)
    np.testing.assert_allclose(a.values, b.values, atol=1e-13)
    assert b.alpha - a.alpha == pytest.approx(-3.5, abs=1e-13)
    with pytest.raises(ShapeError):
        lax_oleinik_apply(ValueFunction.zeros(32), tc)


@pytest.fixture(scope="module")
def small_cost():
    return build_transition_cost(make_potential(1.0, 0.5, 2.0), 0.2, 16, 0.05)


@given(st.integers(0, 2**31), st.floats(-5, 5))
@settings(max_examples=200, deadline=None)
def test_operator_laws(small_cost, seed, beta):
    r = np.random.default_rng(seed)
    u, w = r.normal(size=16), r.normal(size=16)
    Tu, Tw = lax_oleinik_raw(u, small_cost), lax_oleinik_raw(w, small_cost)
    assert np.max(np.abs(Tu - Tw)) <= np.max(np.abs(u - w)) + 1e-12
    np.testing.assert_allclose(lax_oleinik_raw(u + beta, small_cost), Tu + beta, atol=1e-12)
    hi = np.maximum(u, w)
    assert np.all(lax_oleinik_raw(hi, small_cost) >= Tu - 1e-12)


def test_free_alpha_and_rotation(free):
    for c in (0.0, 0.5, -0.75):
        tc = build_transition_cost(free, c, 32, 0.05)
        u = solve_weak_kam(free, c, cost=tc)
        assert u.alpha == pytest.approx(c**2 / 2, abs=1e-3)
        assert rotation_number(u, tc) == pytest.approx(c, abs=1.0 / 32)
        if c == 0.0:
            np.testing.assert_allclose(u.values, 0.0, atol=1e-12)
            ch = backward_minimizer_chain(u, tc, 10, start=5)
            assert np.all(ch.indices == 5)


def test_free_chain_slope_one(free):
    tc = build_transition_cost(free, 1.0, 32, 0.05)
    u = solve_weak_kam(free, 1.0, cost=tc)
    ch = backward_minimizer_chain(u, tc, 20)
    assert np.diff(ch.lifted).mean() == pytest.approx(1.0, abs=1.0 / 32)


def test_pendulum_alpha_hilltop(pendulum_c0):
    u, tc = pendulum_c0.u, pendulum_c0.cost
    assert u.alpha == pytest.approx(1.0, abs=1e-3)
    ch = backward_minimizer_chain(u, tc, 40, start=20)
    assert ch.indices[-1] == 0
    assert rotation_number(u, tc, start=20) == 0.0
    # span residual of raw(u) - u never increases
    r = np.asarray(u.residuals)
    assert np.all(np.diff(r) <= 1e-12)


def test_autonomous_rotation_symmetry():
    p = make_potential(1.0, 0.0, 0.0)
    rho = []
    for c in (1.6, -1.6):
        tc = build_transition_cost(p, c, 32, 0.05)
        rho.append(rotation_number(solve_weak_kam(p, c, cost=tc), tc))
    assert rho[0] == pytest.approx(-rho[1], abs=1.0 / 32)
    assert rho[0] > 0.5


def test_weak_kam_grid_stability():
    p = make_potential(1.0, 0.0, 0.0)
    a = [solve_weak_kam(p, 0.0, grid_n=G, dt=0.05).alpha for G in (32, 64)]
    assert abs(a[0] - a[1]) <= 2e-3


def test_weak_kam_errors(free, pendulum):
    with pytest.raises(ParameterError):
        solve_weak_kam(free, 0.0, grid_n=16, dt=0.05, tol=0.0)
    tc = build_transition_cost(pendulum, 0.0, 16, 0.05)
    with pytest.raises(ConvergenceError) as err:
        solve_weak_kam(pendulum, 0.0, cost=tc, max_iter=1)
    assert err.value.iterations == 1


def test_mather_samples_free(free_classes):
    ms = free_classes[0.0].samples
    np.testing.assert_allclose(ms.v, 0.0, atol=1e-9)
    gap, flag = gap_detector(ms, 0.0)
    assert gap == pytest.approx(1.0 / 64, abs=1e-12) and not flag


def test_mather_samples_pendulum(pendulum, pendulum_c0):
    ms = pendulum_c0.samples
    d = np.minimum(ms.x, 1 - ms.x)
    assert np.max(d) <= 1e-6 and np.max(np.abs(ms.v)) <= 1e-6
    gap, flag = gap_detector(ms, 0.0)
    assert gap == pytest.approx(1.0) and flag
    assert flow_defect(ms, pendulum) <= 1e-6


def test_mather_samples_flow_invariant_rotating(free_classes, free):
    ms = free_classes[0.25].samples
    assert flow_defect(ms, free) <= 1.0 / 64


def test_gap_empty_slice():
    ms = MatherSample(np.array([0.5]), np.array([0.2]), np.array([0.0]), 0.0, 0.02)
    assert gap_detector(ms, 0.0) == (1.0, True)


def test_mather_period_floor(free):
    with pytest.raises(ParameterError):
        mather_set_samples(free, 0.0, grid_n=16, dt=0.05, T=8)


def test_n_particle_value_examples(pendulum, pendulum_c0):
    U = pendulum_c0.u
    x = 0.3
    single = minimize_terminal(ActionProblem(pendulum, 0.0, 0.0, 1.0, 0.02, TerminalBoundary([x])),
                               U.terminal())[1]
    assert n_particle_value(pendulum, [x], U, 0.0, 1, 0.02) == pytest.approx(single, abs=1e-10)
    many = n_particle_value(pendulum, np.full(4, x), U, 0.0, 4, 0.02)
    assert many == pytest.approx(single, abs=1e-8)
    with pytest.raises(ParameterError):
        n_particle_value(pendulum, [x], U, 0.0, 0, 0.02)


def test_n_particle_value_merging_lowers_value():
    p = make_potential(0.0, 0.0, 4.0)
    M = np.array([0.1, 0.2, 0.3, 0.4])
    val, traj = n_particle_value(p, M, 0.0, 0.0, 4, 0.05, return_traj=True)
    # resting costs the interaction term -(1/2n^2) sum W >= 0 for one period;
    # every term of the Lagrangian is nonnegative here, so 0 bounds from below
    rest = -0.5 * np.sum(p.W(M[:, None] - M[None, :])) / 16
    assert 0.0 <= val < rest
    assert np.ptp(traj.nodes[-1]) < np.ptp(M)


def test_alpha_vlasov_free(free):
    for c in (0.25, 0.5):
        assert alpha_vlasov(free, c, n=4, dt=0.05, descriptors=16) == pytest.approx(c**2 / 2, abs=2e-2)


def test_alpha_vlasov_single_particle_matches(pendulum, pendulum_c0):
    a = alpha_vlasov(pendulum, 0.0, n=1, dt=0.02, descriptors=32)
    assert a == pytest.approx(pendulum_c0.u.alpha, abs=2e-2)


def test_alpha_vlasov_errors(pendulum):
    with pytest.raises(ParameterError):
        alpha_vlasov(pendulum, 0.0, n=0)
    with pytest.raises(ConvergenceError):
        alpha_vlasov(pendulum, 0.5, n=2, dt=0.05, periods=1, descriptors=16)
