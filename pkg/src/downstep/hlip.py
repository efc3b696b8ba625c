"""Hybrid linear inverted pendulum (H-LIP) step-to-step stepping.

The horizontal state ``x = (p, pdot)`` is the CoM position relative to the
stance foot and its velocity at the end of single support.  One step of the
H-LIP maps it through a constant-velocity double support of length
``T_DSP`` and an exponential single support of length ``T_SSP``; the step
size ``u`` re-expresses the position relative to the new stance foot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HlipParams:
    z0: float = 1.0
    T_SSP: float = 0.4
    T_DSP: float = 0.1
    v_des: float = 1.0
    gravity: float = 9.81

    def __post_init__(self):
        if self.z0 <= 0 or self.gravity <= 0:
            raise ValueError("z0 and gravity must be positive")
        if self.T_SSP < 0 or self.T_DSP < 0:
            raise ValueError("phase durations must be nonnegative")

    @property
    def lam(self) -> float:
        return math.sqrt(self.gravity / self.z0)

    @property
    def period(self) -> float:
        return self.T_SSP + self.T_DSP


@dataclass(frozen=True)
class S2SMatrices:
    A: np.ndarray
    B: np.ndarray  # shape (2,)
    K_db: np.ndarray  # shape (2,)

    @property
    def closed_loop(self) -> np.ndarray:
        return self.A + np.outer(self.B, self.K_db)


def ssp_transition(lam: float, t: float) -> np.ndarray:
    """Closed form of expm([[0, 1], [lam^2, 0]] * t)."""
    c, s = math.cosh(lam * t), math.sinh(lam * t)
    return np.array([[c, s / lam], [lam * s, c]])


def deadbeat_gain(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Gain K with (A + B K)^2 = 0.

    For a 2x2 closed loop nilpotency means zero trace and zero determinant,
    and det(A + B K) = det(A) + K adj(A) B is linear in K, so both
    conditions are linear equations in the two gain entries.
    """
    adj = np.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]])
    M = np.vstack([B, adj @ B])
    rhs = -np.array([np.trace(A), np.linalg.det(A)])
    if abs(np.linalg.det(M)) > 1e-12 * (1 + np.abs(M).max() ** 2):
        return np.linalg.solve(M, rhs)
    # degenerate geometry: least squares on the stacked condition
    return np.linalg.lstsq(M, rhs, rcond=None)[0]


def s2s_matrices(params: HlipParams) -> S2SMatrices:
    E = ssp_transition(params.lam, params.T_SSP)
    A = E @ np.array([[1.0, params.T_DSP], [0.0, 1.0]])
    B = E @ np.array([-1.0, 0.0])
    return S2SMatrices(A, B, deadbeat_gain(A, B))


def p1_orbit(params: HlipParams, mats: S2SMatrices | None = None) -> tuple[np.ndarray, float]:
    """Period-1 orbit: pre-impact state x* and step size u* for the commanded velocity.

    On a period-1 orbit the CoM advances exactly one step size per step, so
    ``u* = v_des * (T_SSP + T_DSP)``; x* is the fixed point of the map.
    """
    mats = mats or s2s_matrices(params)
    u_star = params.v_des * params.period
    x_star = np.linalg.solve(np.eye(2) - mats.A, mats.B * u_star)
    return x_star, u_star


def step_size_command(x_walker, x_orbit, u_orbit: float, K_db) -> float:
    return float(u_orbit + np.asarray(K_db) @ (np.asarray(x_walker) - np.asarray(x_orbit)))


def s2s_step(mats: S2SMatrices, x, u: float) -> np.ndarray:
    return mats.A @ np.asarray(x) + mats.B * u


def predict_preimpact(params: HlipParams, x_now, t_in_ssp: float) -> np.ndarray:
    """Propagate the current SSP state to the nominal end of single support."""
    remaining = max(params.T_SSP - t_in_ssp, 0.0)
    return ssp_transition(params.lam, remaining) @ np.asarray(x_now)


def s2s_residual(mats: S2SMatrices, x_k, u_k: float, x_next) -> np.ndarray:
    """w_k = x_{k+1} - A x_k - B u_k."""
    return np.asarray(x_next) - s2s_step(mats, x_k, u_k)


@dataclass(frozen=True)
class SlopeTarget:
    theta: float  # rad, positive for a descending surface
    foot_drop: float  # m, vertical offset of the target foothold (positive = lower)


def slope_adapted_target(
    scenario: str,
    height: float,
    step_size: float,
    penetration: float = 0.0,
    upslope: bool = False,
) -> SlopeTarget:
    """Walking-surface slope used to place the next foothold.

    planned: ``height`` is the known downstep, fixed before the step.
    unplanned: the slope follows the swing-foot penetration below the
    believed ground (``height`` is ignored until touchdown).
    upslope: the recovery step back up; the measured height is used for
    both scenarios and the angle is negative.
    """
    if step_size <= 0:
        return SlopeTarget(0.0, 0.0)
    if upslope:
        drop = -abs(height)
    elif scenario == "unplanned":
        drop = max(penetration, 0.0)
    elif scenario in ("planned", "flat"):
        drop = height if scenario == "planned" else 0.0
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    return SlopeTarget(math.atan2(drop, step_size), drop)
