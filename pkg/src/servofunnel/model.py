"""Contract for multibody DAE models and numerical model validators.

A model provides the building blocks of

    q' = v
    M(q) v' = f(q, v) + J(q)^T mu + G(q)^T lam + B(q) u
    0 = J(q) v + j(q)          (p nonholonomic constraints)
    0 = g(q)                   (l holonomic constraints)
    y = h(q)                   (m outputs)

as callables.  All callables accept arrays with leading batch dimensions
(coordinates along the last axis) and broadcast; validators only use the
single-configuration case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import fd_jacobian

#: Infinity-norm tolerance on ``H - B^T`` for the colocation test.
COLOCATION_TOL = 1e-10
#: Tolerance on finite-difference Jacobian defects in ``validate_model``.
JACOBIAN_TOL = 1e-6
#: Tolerance on the symmetry defect of the mass matrix.
SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class MbsDims:
    """Dimensions of a multibody model: coordinates, constraints, inputs."""

    n: int
    holonomic: int
    nonholonomic: int
    inputs: int

    def __post_init__(self):
        for name in ("n", "holonomic", "nonholonomic", "inputs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.holonomic + self.nonholonomic + self.inputs > self.n:
            raise ValueError(
                "constraint and input counts exceed the coordinate count: "
                f"{self.holonomic}+{self.nonholonomic}+{self.inputs} > {self.n}"
            )


@dataclass(frozen=True)
class MbsModel:
    """Callable bundle describing one multibody system.

    ``mass_matrix(q)`` must be symmetric positive definite on the operating
    set; ``holonomic_jacobian`` must be the Jacobian of ``holonomic`` and
    ``output_jacobian`` the Jacobian of ``output``.
    """

    dims: MbsDims
    mass_matrix: Callable          # q -> (n, n)
    forces: Callable               # q, v -> (n,)
    holonomic: Callable            # q -> (l,)
    holonomic_jacobian: Callable   # q -> (l, n)
    holonomic_jacobian_dot: Callable  # q, v -> (l, n)
    nonholonomic: Callable         # q -> (p, n)
    nonholonomic_offset: Callable  # q -> (p,)
    input_map: Callable            # q -> (n, m)
    output: Callable               # q -> (m,)
    output_jacobian: Callable      # q -> (m, n)
    name: str = "unnamed"


@dataclass(frozen=True)
class OperatingSet:
    """Box with an optional predicate describing admissible configurations.

    The box bounds are finite so the set can be sampled; the predicate
    carves out the admissible subset (for example ``cos(gamma) > 2/3``).
    """

    lower: np.ndarray
    upper: np.ndarray
    predicate: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower and upper bounds must be 1-d arrays of equal length")
        if np.any(self.lower >= self.upper):
            raise ValueError("lower bounds must be strictly below upper bounds")

    def contains(self, q):
        q = np.asarray(q, dtype=float)
        inside = np.all(q > self.lower) and np.all(q < self.upper)
        if inside and self.predicate is not None:
            inside = bool(self.predicate(q))
        return inside

    def sample(self, rng, count):
        """Draw ``count`` configurations uniformly, rejecting predicate failures."""
        out = np.empty((count, self.lower.size))
        got = 0
        attempts = 0
        while got < count:
            q = rng.uniform(self.lower, self.upper)
            attempts += 1
            if attempts > 1000 * count:
                raise RuntimeError("operating-set predicate rejects almost all samples")
            if self.predicate is None or self.predicate(q):
                out[got] = q
                got += 1
        return out


@dataclass
class ValidationReport:
    """Per-sample defect summary produced by ``validate_model``."""

    model_name: str
    samples: int
    min_eig_mass: np.ndarray
    symmetry_defect: np.ndarray
    holonomic_jacobian_defect: np.ndarray
    output_jacobian_defect: np.ndarray
    jacobian_dot_defect: np.ndarray
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    def summary(self):
        lines = [
            f"model: {self.model_name}",
            f"samples: {self.samples}",
            f"min eigenvalue of M: {self.min_eig_mass.min():.6e}",
            f"max symmetry defect: {self.symmetry_defect.max():.3e}",
            f"max holonomic Jacobian defect: {self.holonomic_jacobian_defect.max():.3e}",
            f"max output Jacobian defect: {self.output_jacobian_defect.max():.3e}",
            f"max Jacobian time-derivative defect: {self.jacobian_dot_defect.max():.3e}",
            f"passed: {self.passed}",
        ]
        lines += [f"failure: {msg}" for msg in self.failures]
        return "\n".join(lines)


def validate_model(model, operating_set, samples=100, seed=0):
    """Check model self-consistency at randomly sampled configurations.

    Verifies that the mass matrix is symmetric positive definite, that the
    provided constraint and output Jacobians match finite differences of
    ``holonomic`` and ``output``, and that ``holonomic_jacobian_dot``
    matches the directional derivative of ``holonomic_jacobian``.
    Failures are collected in the report, not raised.
    """
    rng = np.random.default_rng(seed)
    qs = operating_set.sample(rng, samples)
    vs = rng.standard_normal(qs.shape)
    n = model.dims.n

    report = ValidationReport(
        model_name=model.name,
        samples=samples,
        min_eig_mass=np.empty(samples),
        symmetry_defect=np.empty(samples),
        holonomic_jacobian_defect=np.empty(samples),
        output_jacobian_defect=np.empty(samples),
        jacobian_dot_defect=np.empty(samples),
    )

    for k in range(samples):
        q, v = qs[k], vs[k]
        mass = np.asarray(model.mass_matrix(q), dtype=float)
        report.symmetry_defect[k] = np.abs(mass - mass.T).max()
        try:
            np.linalg.cholesky(0.5 * (mass + mass.T))
            chol_ok = True
        except np.linalg.LinAlgError:
            chol_ok = False
        report.min_eig_mass[k] = np.linalg.eigvalsh(0.5 * (mass + mass.T)).min()

        g_jac = np.asarray(model.holonomic_jacobian(q), dtype=float)
        g_fd = fd_jacobian(model.holonomic, q) if g_jac.size else g_jac
        report.holonomic_jacobian_defect[k] = (
            np.abs(g_jac - g_fd).max() if g_jac.size else 0.0
        )

        h_jac = np.asarray(model.output_jacobian(q), dtype=float)
        h_fd = fd_jacobian(model.output, q)
        report.output_jacobian_defect[k] = np.abs(h_jac - h_fd).max()

        if g_jac.size:
            step = 1e-6 / max(1.0, np.abs(v).max())
            gdot_fd = (
                np.asarray(model.holonomic_jacobian(q + step * v), dtype=float)
                - np.asarray(model.holonomic_jacobian(q - step * v), dtype=float)
            ) / (2.0 * step)
            gdot = np.asarray(model.holonomic_jacobian_dot(q, v), dtype=float)
            report.jacobian_dot_defect[k] = np.abs(gdot - gdot_fd).max()
        else:
            report.jacobian_dot_defect[k] = 0.0

        if report.symmetry_defect[k] > SYMMETRY_TOL:
            report.failures.append(
                f"sample {k}: mass matrix asymmetric by {report.symmetry_defect[k]:.3e}"
            )
        if not chol_ok or report.min_eig_mass[k] <= 0.0:
            report.failures.append(f"sample {k}: mass matrix not positive definite")
        for label, defect in (
            ("holonomic Jacobian", report.holonomic_jacobian_defect[k]),
            ("output Jacobian", report.output_jacobian_defect[k]),
            ("Jacobian time derivative", report.jacobian_dot_defect[k]),
        ):
            if defect > JACOBIAN_TOL:
                report.failures.append(
                    f"sample {k}: {label} defect {defect:.3e} exceeds {JACOBIAN_TOL:g}"
                )

    return report


def is_colocated(model, q):
    """True when the output Jacobian equals the transposed input map at ``q``."""
    h_jac = np.asarray(model.output_jacobian(q), dtype=float)
    b = np.asarray(model.input_map(q), dtype=float)
    return np.abs(h_jac - b.T).max() <= COLOCATION_TOL


def two_mass_model(m1=1.0, m2=1.5, stiffness=40.0, damping=1.2,
                   input_masses=(0,), output_masses=(0,)):
    """Two point masses coupled by one spring-damper, no constraints.

    Forces act on ``input_masses`` and outputs are the positions of
    ``output_masses``; the default (both on mass 1) is colocated.
    Returns ``(model, operating_set)``.
    """
    n = 2
    m_inputs = len(input_masses)
    m_outputs = len(output_masses)
    if m_outputs != m_inputs:
        raise ValueError("need as many outputs as inputs for a square system")
    mass = np.diag([m1, m2])
    b = np.zeros((n, m_inputs))
    for col, idx in enumerate(input_masses):
        b[idx, col] = 1.0
    h_jac = np.zeros((m_outputs, n))
    for row, idx in enumerate(output_masses):
        h_jac[row, idx] = 1.0

    def forces(q, v):
        q = np.asarray(q, dtype=float)
        v = np.asarray(v, dtype=float)
        pull = stiffness * (q[..., 0] - q[..., 1]) + damping * (v[..., 0] - v[..., 1])
        return np.stack([-pull, pull], axis=-1)

    def batched_const(arr):
        def fn(q, *_):
            q = np.asarray(q, dtype=float)
            return np.broadcast_to(arr, q.shape[:-1] + arr.shape).copy()
        return fn

    def empty_rows(cols):
        def fn(q, *_):
            q = np.asarray(q, dtype=float)
            return np.zeros(q.shape[:-1] + (0, cols))
        return fn

    def empty_vec(q, *_):
        q = np.asarray(q, dtype=float)
        return np.zeros(q.shape[:-1] + (0,))

    def output(q):
        q = np.asarray(q, dtype=float)
        return np.stack([q[..., idx] for idx in output_masses], axis=-1)

    model = MbsModel(
        dims=MbsDims(n=n, holonomic=0, nonholonomic=0, inputs=m_inputs),
        mass_matrix=batched_const(mass),
        forces=forces,
        holonomic=empty_vec,
        holonomic_jacobian=empty_rows(n),
        holonomic_jacobian_dot=lambda q, v: empty_rows(n)(q),
        nonholonomic=empty_rows(n),
        nonholonomic_offset=empty_vec,
        input_map=batched_const(b),
        output=output,
        output_jacobian=batched_const(h_jac),
        name="two-mass",
    )
    opset = OperatingSet(lower=np.array([-5.0, -5.0]), upper=np.array([5.0, 5.0]))
    return model, opset


def get_model(name):
    """Look up a registered model by name; returns ``(model, operating_set)``.

    Registered names: ``robot-reference``, ``robot-simulated``,
    ``two-mass-colocated``.
    """
    from . import robot  # local import to avoid a cycle

    if name == "robot-reference":
        params = robot.RobotParams.reference()
        return robot.robot_model(params), robot.robot_operating_set()
    if name == "robot-simulated":
        params = robot.RobotParams.simulated()
        return robot.robot_model(params), robot.robot_operating_set()
    if name == "two-mass-colocated":
        return two_mass_model()
    raise KeyError(f"unknown model name: {name!r}")
