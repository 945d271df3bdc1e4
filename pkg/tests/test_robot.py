"""Tests for the kinematic-loop robot: kinematics, dynamics and geometry."""

import dataclasses

import numpy as np
import pytest

from servofunnel.errors import InfeasibleGeometry, OutOfReach
from servofunnel.linalg import fd_jacobian
from servofunnel.robot import (
    RobotParams,
    det_gamma_closed_form,
    det_gamma_sign,
    end_effector,
    generalized_forces,
    initial_configuration,
    initial_state,
    input_map,
    loop_closure,
    loop_closure_jacobian,
    loop_closure_jacobian_dot,
    mass_matrix,
    output,
    output_from_end_effector,
    output_jacobian,
    robot_model,
    robot_operating_set,
)


def sample_configurations(count, seed=0):
    rng = np.random.default_rng(seed)
    return robot_operating_set().sample(rng, count)


@pytest.mark.parametrize("params", [RobotParams.reference(), RobotParams.simulated()])
def test_mass_matrix_symmetric_positive_definite(params):
    qs = sample_configurations(200)
    m = mass_matrix(params, qs)
    assert m.shape == (200, 5, 5)
    assert np.abs(m - np.swapaxes(m, -1, -2)).max() == 0.0
    assert np.linalg.eigvalsh(m).min() > 1e-3


def test_mass_matrix_batched_matches_single():
    params = RobotParams.reference()
    qs = sample_configurations(8, seed=5)
    batched = mass_matrix(params, qs)
    for q, m in zip(qs, batched):
        assert np.array_equal(mass_matrix(params, q), m)


def test_forces_match_christoffel_construction():
    """The gyroscopic part of f must follow from the mass matrix itself.

    With kinetic energy ``v^T M(q) v / 2``, a joint spring ``c gamma^2 / 2``
    and viscous damping ``D gammadot``, Lagrange's equations force
    ``f = -C(q, v) v - dV/dq - damping`` where ``C`` collects the
    Christoffel symbols of ``M``.  Assemble that from finite differences
    of ``mass_matrix`` and compare.
    """
    params = RobotParams.reference()
    rng = np.random.default_rng(11)
    step = 1e-6
    for _ in range(20):
        q = rng.uniform(-1.0, 1.0, 5)
        v = rng.uniform(-1.0, 1.0, 5)
        dm = np.zeros((5, 5, 5))
        for k in range(5):
            shift = np.zeros(5)
            shift[k] = step
            dm[:, :, k] = (mass_matrix(params, q + shift)
                           - mass_matrix(params, q - shift)) / (2.0 * step)
        coriolis = 0.5 * (np.einsum("ijk,k->ij", dm, v)
                          + np.einsum("ikj,k->ij", dm, v)
                          - np.einsum("jki,k->ij", dm, v))
        spring = np.zeros(5)
        spring[4] = params.c * q[4]
        damping = np.zeros(5)
        damping[4] = params.D * v[4]
        expected = -coriolis @ v - spring - damping
        assert np.abs(expected - generalized_forces(params, q, v)).max() < 1e-8


def test_loop_closure_zero_at_rest():
    params = RobotParams.reference()
    q0, v0 = initial_state(params)
    assert np.abs(loop_closure(params, q0)).max() < 1e-14
    assert np.array_equal(v0, np.zeros(5))
    jac = loop_closure_jacobian(params, q0)
    assert np.linalg.matrix_rank(jac) == 2


def test_closure_jacobian_matches_fd():
    params = RobotParams.reference()
    for seed, q in enumerate(sample_configurations(10, seed=2)):
        expected = fd_jacobian(lambda x: loop_closure(params, x), q)
        assert np.abs(loop_closure_jacobian(params, q) - expected).max() < 1e-8


def test_closure_jacobian_dot_matches_fd():
    params = RobotParams.reference()
    rng = np.random.default_rng(7)
    step = 1e-6
    for q in sample_configurations(10, seed=3):
        v = rng.uniform(-1.0, 1.0, 5)
        fd = (loop_closure_jacobian(params, q + step * v)
              - loop_closure_jacobian(params, q - step * v)) / (2.0 * step)
        assert np.abs(loop_closure_jacobian_dot(params, q, v) - fd).max() < 1e-7


def test_output_jacobian_matches_fd():
    params = RobotParams.reference()
    for q in sample_configurations(5, seed=4):
        expected = fd_jacobian(lambda x: output(params, x), q)
        assert np.abs(output_jacobian(params, q) - expected).max() < 1e-9


def test_input_map_hits_sliders_only():
    params = RobotParams.reference()
    b = input_map(params, np.zeros(5))
    expected = np.zeros((5, 2))
    expected[0, 0] = 1.0
    expected[1, 1] = 1.0
    assert np.array_equal(b, expected)


def test_initial_configuration_reference_geometry():
    params = RobotParams.reference()
    alpha0, beta0 = initial_configuration(params)
    assert abs(alpha0 - np.arcsin(0.6)) < 1e-12
    assert abs(beta0 - np.arcsin(0.6)) < 1e-12
    q0, _ = initial_state(params)
    assert np.array_equal(q0[:2], np.zeros(2))
    assert q0[4] == 0.0


def test_initial_configuration_infeasible_geometry():
    params = dataclasses.replace(RobotParams.reference(), d=5.0)
    with pytest.raises(InfeasibleGeometry):
        initial_configuration(params)


def test_params_reject_nonpositive_entries():
    with pytest.raises(ValueError):
        dataclasses.replace(RobotParams.reference(), m3=0.0)
    with pytest.raises(ValueError):
        dataclasses.replace(RobotParams.reference(), D=-0.1)


def test_end_effector_roundtrip():
    params = RobotParams.reference()
    rng = np.random.default_rng(9)
    targets = np.stack([rng.uniform(0.5, 2.0, 100),
                        rng.uniform(-0.95, 0.95, 100)], axis=-1)
    y = output_from_end_effector(params, targets)
    back = end_effector(params, y)
    assert np.abs(back - targets).max() < 1e-12


def test_end_effector_out_of_reach():
    params = RobotParams.reference()
    with pytest.raises(OutOfReach):
        output_from_end_effector(params, np.array([1.0, -params.arm_radius]))


def test_output_endpoints_of_study_targets():
    params = RobotParams.reference()
    y0 = output_from_end_effector(params, np.array([1.6, -0.6]))
    yf = output_from_end_effector(params, np.array([0.9, -0.9]))
    assert np.abs(y0 - np.array([0.0, np.arcsin(0.6)])).max() < 1e-12
    assert np.abs(yf - np.array([0.9 - 0.8 - np.sqrt(0.19),
                                 np.arcsin(0.9)])).max() < 1e-12


def test_high_gain_determinant_matches_closed_form():
    for params in (RobotParams.reference(), RobotParams.simulated()):
        qs = sample_configurations(200, seed=13)
        assembled = det_gamma_sign(params, qs)
        closed = det_gamma_closed_form(params, qs)
        rel = np.abs(assembled - closed) / np.abs(closed)
        assert rel.max() < 1e-6


def test_high_gain_determinant_positive_for_homogeneous_arm():
    params = RobotParams.reference().homogenized()
    qs = sample_configurations(500, seed=17)
    assert det_gamma_sign(params, qs).min() > 0.0


def test_robot_model_bundle_dimensions():
    model = robot_model(RobotParams.reference())
    assert (model.dims.n, model.dims.holonomic,
            model.dims.nonholonomic, model.dims.inputs) == (5, 2, 0, 2)
    q = sample_configurations(1, seed=21)[0]
    assert model.nonholonomic(q).shape == (0, 5)
    assert model.holonomic(q).shape == (2,)
    assert model.output(q).shape == (2,)
