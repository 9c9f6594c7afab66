import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vlasovkam.core import (DiscreteTrajectory, EnsembleState, MonotoneConfiguration,
                            PotentialModel, ProjectionSpec, interaction_energy, is_mon,
                            make_forced_pendulum, make_potential, project_ensemble,
                            validate_potential)
from vlasovkam.errors import ParameterError, ShapeError


def test_pendulum_interaction_values(pendulum):
    assert pendulum.W(np.array(0.0)) == 0.0
    assert pendulum.W(np.array(0.5)) == pytest.approx(-2.0, abs=1e-15)
    h = 1e-4
    d2 = (pendulum.W(np.array(h)) - 2 * pendulum.W(np.array(0.0)) + pendulum.W(np.array(-h))) / h**2
    assert d2 == pytest.approx(-2 * 2.0 * np.pi**2, rel=1e-4)


@pytest.mark.parametrize("args", [(0, 0.5, 2), (1, -0.5, 2), (1, 0.5, 0)])
def test_pendulum_rejects_nonpositive(args):
    with pytest.raises(ParameterError):
        make_forced_pendulum(*args)


def test_pendulum_passes_validation(pendulum):
    rep = validate_potential(pendulum)
    assert rep.passed, rep.failures()


def test_flipped_interaction_fails_sign_check():
    p = make_potential(1.0, 0.5, -1.0)
    rep = validate_potential(p)
    assert not rep["W <= 0"].passed
    assert "W <= 0" in rep.failures()


def test_nonperiodic_potential_fails():
    base = make_potential(1.0, 0.0, 1.0)
    p = PotentialModel(V=lambda t, x: np.asarray(x, dtype=float) + 0 * t,
                       V_x=lambda t, x: np.ones_like(np.asarray(x, dtype=float)) + 0 * t,
                       W=base.W, W_x=base.W_x)
    rep = validate_potential(p)
    assert not rep["V periodic in x"].passed
    assert not rep.passed


def test_validation_sample_floor(pendulum):
    with pytest.raises(ParameterError):
        validate_potential(pendulum, samples=8)


def test_projection_examples():
    np.testing.assert_array_equal(project_ensemble([0, 0, 1, 1], ProjectionSpec(2)), [0, 1])
    np.testing.assert_allclose(project_ensemble([0.2, 0.4], 1), [0.3])
    x = (np.arange(6) / 6.0) ** 2
    np.testing.assert_allclose(project_ensemble(x, 3), x.reshape(3, 2).mean(axis=1))


def test_projection_uneven_blocks():
    x = np.arange(5, dtype=float)
    # entries are pieces of length 1/5, blocks have length 1/3; overlap weights
    # per block in units of one piece: [1, 2/3], [1/3, 1, 1/3], [2/3, 1]
    want = [(0 + 1 * 2 / 3) / (5 / 3), (1 / 3 + 2 + 3 / 3) / (5 / 3), (3 * 2 / 3 + 4) / (5 / 3)]
    np.testing.assert_allclose(project_ensemble(x, 3), want, rtol=1e-14)


def test_projection_rejects_bad_n():
    with pytest.raises(ParameterError):
        ProjectionSpec(0)


mon_arrays = st.integers(1, 12).flatmap(
    lambda n: arrays(np.float64, n, elements=st.floats(0, 1, allow_nan=False)).map(np.sort))


@given(mon_arrays, st.integers(1, 6))
@settings(max_examples=80, deadline=None)
def test_projection_idempotent_and_mon(m, n):
    q = project_ensemble(m, n)
    np.testing.assert_array_equal(project_ensemble(q, n), q)
    assert is_mon(q, tol=1e-12)


@given(mon_arrays)
@settings(max_examples=50, deadline=None)
def test_monotone_configuration_sorted(m):
    mc = MonotoneConfiguration(m)
    np.testing.assert_array_equal(np.sort(mc.m), mc.m)


def test_mon_conditions():
    assert is_mon([0.0, 0.5, 1.0])
    assert not is_mon([0.0, 0.5, 1.2])
    assert not is_mon([0.5, 0.2])
    with pytest.raises(ParameterError):
        MonotoneConfiguration([0.5, 0.2])


def test_state_and_trajectory_shapes():
    with pytest.raises(ShapeError):
        EnsembleState(0.0, np.zeros(3), np.zeros(2))
    with pytest.raises((ParameterError, ShapeError)):
        EnsembleState(0.0, np.array([np.nan]), np.zeros(1))
    tr = DiscreteTrajectory(0.0, 0.1, np.zeros((11, 2)))
    assert tr.steps == 10 and tr.n == 2
    assert tr.t1 == pytest.approx(1.0)


def test_interaction_energy_synchronized_is_zero(pendulum):
    assert interaction_energy(pendulum, np.full(7, 0.3)) == 0.0
    q = np.array([0.0, 0.5])
    assert interaction_energy(pendulum, q) == pytest.approx(0.5 * 2 * (-2.0) / 4)
