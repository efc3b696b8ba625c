"""Actuated spring-loaded inverted pendulum (aSLIP) walker.

Point mass on two massless spring-damper legs whose rest lengths are
actuated double integrators.  Sign conventions used throughout the package:

* axial leg force is positive in compression (pushes the mass away from the foot),
* ground reaction forces are positive upward,
* angular momentum is positive counterclockwise in the sagittal (x, z) plane.

The continuous state vector has eight entries::

    [x, z, xdot, zdot, L0_1, L0dot_1, L0_2, L0dot_2]
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

STATE_DIM = 8
IX, IZ, IXD, IZD = 0, 1, 2, 3
L0_IDX = (4, 6)
L0D_IDX = (5, 7)


class PhaseTag(str, Enum):
    SSP = "SSP"
    DSP = "DSP"


@dataclass(frozen=True)
class LegParams:
    """Leg and body parameters.

    Stiffness is the polynomial K(L0) = k0 + k1*L0 + k2*L0**2 (+ ...) in the
    rest length.  Extra coefficients are allowed for higher-degree fits.
    """

    stiffness_coeffs: tuple[float, ...] = (30000.0, -15000.0, 5000.0)
    damping: float = 400.0
    mass: float = 70.0
    gravity: float = 9.81
    length_range: tuple[float, float] = (0.5, 1.3)

    def __post_init__(self):
        object.__setattr__(self, "stiffness_coeffs", tuple(float(c) for c in self.stiffness_coeffs))
        if len(self.stiffness_coeffs) < 1:
            raise ValueError("need at least one stiffness coefficient")
        if self.damping < 0 or self.mass <= 0 or self.gravity <= 0:
            raise ValueError("require damping >= 0, mass > 0, gravity > 0")
        lo, hi = self.length_range
        if not 0 < lo < hi:
            raise ValueError("invalid operating range")
        grid = np.linspace(lo, hi, 201)
        if np.any(self.stiffness(grid) <= 0):
            raise ValueError("stiffness must be positive over the operating range")

    def stiffness(self, L0):
        return np.polynomial.polynomial.polyval(L0, self.stiffness_coeffs)

    def stiffness_slope(self, L0):
        d = np.polynomial.polynomial.polyder(self.stiffness_coeffs)
        return np.polynomial.polynomial.polyval(L0, d) if len(d) else 0.0 * L0


@dataclass(frozen=True)
class Phase:
    tag: PhaseTag
    time_in_phase: float = 0.0
    step_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tag", PhaseTag(self.tag))
        if self.time_in_phase < 0:
            raise ValueError("time_in_phase must be nonnegative")


@dataclass(frozen=True)
class AslipState:
    """Continuous state plus per-leg foot anchors and contact flags."""

    q: np.ndarray
    feet: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    contact: tuple[bool, bool] = (True, False)

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(STATE_DIM)
        feet = np.array(self.feet, dtype=float).reshape(2, 2)
        q.flags.writeable = False
        feet.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "feet", feet)
        object.__setattr__(self, "contact", (bool(self.contact[0]), bool(self.contact[1])))

    @classmethod
    def from_parts(cls, com_pos, com_vel, rest_lengths, rest_rates, feet, contact):
        q = np.zeros(STATE_DIM)
        q[[IX, IZ]] = com_pos
        q[[IXD, IZD]] = com_vel
        q[list(L0_IDX)] = rest_lengths
        q[list(L0D_IDX)] = rest_rates
        return cls(q, feet, contact)

    @property
    def com_pos(self) -> np.ndarray:
        return self.q[[IX, IZ]]

    @property
    def com_vel(self) -> np.ndarray:
        return self.q[[IXD, IZD]]

    def rest_length(self, j: int) -> float:
        return float(self.q[L0_IDX[j]])

    def rest_rate(self, j: int) -> float:
        return float(self.q[L0D_IDX[j]])

    @property
    def n_contact(self) -> int:
        return int(self.contact[0]) + int(self.contact[1])

    @property
    def stance_legs(self) -> list[int]:
        return [j for j in (0, 1) if self.contact[j]]

    def replace(self, q=None, feet=None, contact=None) -> "AslipState":
        return AslipState(
            self.q if q is None else q,
            self.feet if feet is None else feet,
            self.contact if contact is None else contact,
        )


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite input")


def leg_force(params: LegParams, L, L0, Ldot, L0dot):
    """Axial spring-damper force, compression positive.

    ``K(L0)*(L0 - L) + D*(L0dot - Ldot)``, i.e. the negated ``K*s + D*sdot``
    with deformation ``s = L - L0``.
    """
    _check_finite(L, L0, Ldot, L0dot)
    if np.any(np.asarray(L) <= 0):
        raise ValueError("leg length must be positive")
    return params.stiffness(L0) * (L0 - L) + params.damping * (L0dot - Ldot)


@dataclass(frozen=True)
class LegGeometry:
    d: np.ndarray  # CoM minus foot
    L: float
    Ldot: float
    cos_theta: float  # vertical projection d_z / L
    theta: float  # leg angle from vertical, positive with CoM ahead of foot


def leg_geometry(state: AslipState, j: int) -> LegGeometry:
    d = state.com_pos - state.feet[j]
    L = float(np.hypot(d[0], d[1]))
    if not L > 0:
        raise ValueError(f"zero length on leg {j}")
    Ldot = float(d @ state.com_vel) / L
    return LegGeometry(d, L, Ldot, d[1] / L, float(np.arctan2(d[0], d[1])))


def axial_force(state: AslipState, params: LegParams, j: int) -> float:
    g = leg_geometry(state, j)
    return float(leg_force(params, g.L, state.rest_length(j), g.Ldot, state.rest_rate(j)))


def vertical_grf(state: AslipState, params: LegParams, j: int) -> float:
    g = leg_geometry(state, j)
    return axial_force(state, params, j) * g.cos_theta


def grf_vertical_ssp(state: AslipState, params: LegParams) -> float:
    """Vertical GRF of the single stance leg, axial force times cos(stance angle)."""
    legs = state.stance_legs
    if len(legs) == 0:
        raise ValueError("no leg in contact")
    if len(legs) != 1:
        raise ValueError("state is not in single support")
    return vertical_grf(state, params, legs[0])


def com_acceleration(state: AslipState, params: LegParams) -> np.ndarray:
    _check_finite(state.q, state.feet)
    m = params.mass
    acc = np.array([0.0, -params.gravity])
    for j in state.stance_legs:
        geo = leg_geometry(state, j)
        F = leg_force(params, geo.L, state.rest_length(j), geo.Ldot, state.rest_rate(j))
        acc += F * geo.d / (geo.L * m)
    return acc


def dynamics(state: AslipState, phase: Phase | None, params: LegParams, u) -> np.ndarray:
    """Time derivative of the continuous state.

    ``u`` holds the rest-length accelerations of both legs; the swing leg's
    rest length is integrated too but exerts no force.  The result is affine
    in ``u``.
    """
    if phase is not None:
        expected = 1 if phase.tag == PhaseTag.SSP else 2
        if state.n_contact != expected:
            raise ValueError(f"contact flags {state.contact} inconsistent with {phase.tag.value}")
    u = np.asarray(u, dtype=float).reshape(2)
    _check_finite(u)
    acc = com_acceleration(state, params)
    dq = np.empty(STATE_DIM)
    dq[IX], dq[IZ] = state.q[IXD], state.q[IZD]
    dq[IXD], dq[IZD] = acc
    for j in (0, 1):
        dq[L0_IDX[j]] = state.q[L0D_IDX[j]]
        dq[L0D_IDX[j]] = u[j]
    return dq


def leg_length_accel(state: AslipState, params: LegParams, j: int, acc=None) -> float:
    """Second derivative of the physical leg length (foot fixed)."""
    geo = leg_geometry(state, j)
    if acc is None:
        acc = com_acceleration(state, params)
    v = state.com_vel
    return float((v @ v + geo.d @ acc - geo.Ldot**2) / geo.L)


def angular_momentum_about_stance(state: AslipState, params: LegParams, leg: int | None = None) -> float:
    """m * (r x v) about the stance foot, counterclockwise positive."""
    if leg is None:
        legs = state.stance_legs
        if not legs:
            raise ValueError("no contact")
        leg = legs[0]
    d = state.com_pos - state.feet[leg]
    v = state.com_vel
    return float(params.mass * (d[0] * v[1] - d[1] * v[0]))


def mechanical_energy(state: AslipState, params: LegParams) -> float:
    """Kinetic + gravitational + elastic energy of the legs in contact."""
    v = state.com_vel
    E = 0.5 * params.mass * float(v @ v) + params.mass * params.gravity * state.q[IZ]
    for j in state.stance_legs:
        geo = leg_geometry(state, j)
        L0 = state.rest_length(j)
        E += 0.5 * float(params.stiffness(L0)) * (L0 - geo.L) ** 2
    return float(E)


def power_balance(state: AslipState, params: LegParams) -> tuple[float, float]:
    """(actuator power, damping dissipation) summed over contact legs.

    Actuator power includes the work of stiffness modulation through the
    rest length, so that dE/dt = actuator - dissipation.
    """
    p_act = p_diss = 0.0
    for j in state.stance_legs:
        geo = leg_geometry(state, j)
        L0, L0d = state.rest_length(j), state.rest_rate(j)
        F = float(leg_force(params, geo.L, L0, geo.Ldot, L0d))
        p_act += F * L0d + 0.5 * float(params.stiffness_slope(L0)) * L0d * (L0 - geo.L) ** 2
        p_diss += params.damping * (L0d - geo.Ldot) ** 2
    return p_act, p_diss


def range_diagnostics(state: AslipState, params: LegParams) -> list[str]:
    lo, hi = params.length_range
    out = []
    for j in (0, 1):
        L0 = state.rest_length(j)
        if not lo <= L0 <= hi:
            out.append(f"leg {j} rest length {L0:.4f} m outside [{lo}, {hi}]")
        if state.contact[j]:
            L = leg_geometry(state, j).L
            if not lo <= L <= hi:
                out.append(f"leg {j} length {L:.4f} m outside [{lo}, {hi}]")
    return out


def rk4_step(f, q: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(q)
    k2 = f(q + 0.5 * dt * k1)
    k3 = f(q + 0.5 * dt * k2)
    k4 = f(q + dt * k3)
    return q + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
