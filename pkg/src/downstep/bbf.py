"""Backstepping-barrier QP for the vertical aSLIP dynamics.

The CoM height error eta = (z - z_d, zdot - zdot_d) is a double integrator
driven by the net vertical GRF, and the GRF of each stance leg is in turn
driven by that leg's rest-length acceleration through the damper.  A
backstepping Lyapunov function

    V = m^2 eta' P eta + 0.5 (F_z - Fbar)^2

with the virtual force Fbar = m (g + zddot_d - K eta) gives one soft
decrease row, and barrier functions keep every stance-leg GRF inside the
tube ((1 - c) F_d + Delta_F, (1 + c) F_d - Delta_F).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_continuous_are, solve_continuous_lyapunov

from .aslip import AslipState, LegParams, com_acceleration, leg_force, leg_geometry
from .qp import ActiveSetQP, QpProblem, QpSolution, OPTIMAL

A_ETA = np.array([[0.0, 1.0], [0.0, 0.0]])
B_ETA = np.array([0.0, 1.0])


class EmptyTubeError(ValueError):
    """The GRF tube has no interior at the requested desired force."""


class BbfError(RuntimeError):
    """QP failure; carries the offending problem for diagnostics."""

    def __init__(self, message, problem=None, solution=None):
        super().__init__(message)
        self.problem = problem
        self.solution = solution


def lqr_gain(q_over_r: float) -> np.ndarray:
    """LQR gain of the unit double integrator with Q = diag(q, 0), R = 1."""
    X = solve_continuous_are(A_ETA, B_ETA[:, None], np.diag([q_over_r, 0.0]), np.eye(1))
    return B_ETA @ X


@dataclass(frozen=True)
class BbfGains:
    """Controller gains.

    ``K_eta`` and ``P`` are derived from the LQR weight ratio unless given.
    P solves the Lyapunov equation of the closed loop shifted by gamma / 2,
    so the eta part of V alone decays at least at rate gamma.  ``k_bs`` is
    the force-error gain of the nominal backstepping law that the QP cost
    tracks.
    """

    mass: float = 70.0
    gravity: float = 9.81
    c: float = 0.3
    delta_F: float | None = None  # N; 0.05 m g when None
    alpha: float = 50.0
    gamma: float = 20.0
    k_bs: float = 50.0
    rho: float = 1e4
    q_over_r: float = 2.56e5
    w_track: float = 1.0
    w_u: float = 1e-3
    tube_activation: float = 3.0  # tube rows used only when c F_d >= this * delta_F
    u_max: float = 2000.0
    K_eta: np.ndarray | None = None
    P: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise ValueError("tube relaxation c must lie in (0, 1)")
        if self.delta_F is None:
            object.__setattr__(self, "delta_F", 0.05 * self.mass * self.gravity)
        if self.delta_F < 0:
            raise ValueError("delta_F must be nonnegative")
        for name in ("alpha", "gamma", "k_bs", "rho", "mass", "gravity", "q_over_r", "w_track"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.w_u < 0 or self.tube_activation < 1:
            raise ValueError("w_u must be >= 0 and tube_activation >= 1")
        K = lqr_gain(self.q_over_r) if self.K_eta is None else np.asarray(self.K_eta, dtype=float)
        Acl = A_ETA - np.outer(B_ETA, K)
        if self.P is None:
            shifted = Acl + 0.5 * self.gamma * np.eye(2)
            if np.max(np.linalg.eigvals(shifted).real) >= 0:
                raise ValueError("K_eta too slow for the requested decay rate gamma")
            P = solve_continuous_lyapunov(shifted.T, -np.eye(2))
        else:
            P = np.asarray(self.P, dtype=float)
        if P.shape != (2, 2) or np.max(np.abs(P - P.T)) > 1e-12 or np.linalg.eigvalsh(P)[0] <= 0:
            raise ValueError("P must be symmetric positive definite")
        object.__setattr__(self, "K_eta", K)
        object.__setattr__(self, "P", P)

    @classmethod
    def for_params(cls, params: LegParams, **kw) -> "BbfGains":
        return cls(mass=params.mass, gravity=params.gravity, **kw)

    @property
    def A_cl(self) -> np.ndarray:
        return A_ETA - np.outer(B_ETA, self.K_eta)

    def tube(self, F_d: float) -> tuple[float, float]:
        return (1 - self.c) * F_d + self.delta_F, (1 + self.c) * F_d - self.delta_F

    def min_desired_force(self) -> float:
        """Smallest F_d with a nonempty tube."""
        return self.delta_F / self.c

    def check_surface_range(self, min_interior_force: float):
        """Raise EmptyTubeError if the tube is empty somewhere in a stance interior."""
        if min_interior_force < self.min_desired_force():
            raise EmptyTubeError(
                f"desired GRF {min_interior_force:.1f} N is below the tube limit {self.min_desired_force():.1f} N")


@dataclass(frozen=True)
class RefSample:
    """Reference values for one tick: CoM (z, zdot, zddot, zdddot) and per-leg GRF (F, Fdot)."""

    z: np.ndarray
    grf: dict = field(default_factory=dict)  # leg index -> (F_d, Fdot_d)

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(4))


@dataclass(frozen=True)
class ForceDynamics:
    """Per stance leg vertical GRF and its rate Fdot_j = f_j + g_j * u_j."""

    legs: tuple[int, ...]
    F: np.ndarray
    f: np.ndarray
    g: np.ndarray

    @property
    def F_z(self) -> float:
        return float(self.F.sum())

    @property
    def f_z(self) -> float:
        return float(self.f.sum())


def output_dynamics(state: AslipState, params: LegParams, ref: RefSample):
    """(eta, f_eta, g_eta) with eta_dot = f_eta + g_eta * F_z."""
    eta = np.array([state.q[1] - ref.z[0], state.q[3] - ref.z[1]])
    if not np.all(np.isfinite(eta)):
        raise ValueError("non-finite output")
    f_eta = np.array([eta[1], -params.gravity - ref.z[2]])
    g_eta = np.array([0.0, 1.0 / params.mass])
    return eta, f_eta, g_eta


def force_state_dynamics(state: AslipState, params: LegParams, acc=None) -> ForceDynamics:
    """Vertical GRF of each stance leg and the affine form of its rate.

    With K evaluated at the rest length, the axial force rate is
    K'(L0) L0dot (L0 - L) + K(L0) (L0dot - Ldot) + D (u - Lddot), so the
    input enters only through the damper: g_j = D cos(theta_j).
    """
    legs = tuple(state.stance_legs)
    if acc is None:
        acc = com_acceleration(state, params)
    v = state.com_vel
    F, f, g = [], [], []
    for j in legs:
        geo = leg_geometry(state, j)
        L0, L0d = state.rest_length(j), state.rest_rate(j)
        Fa = float(leg_force(params, geo.L, L0, geo.Ldot, L0d))
        Ldd = (v @ v + geo.d @ acc - geo.Ldot**2) / geo.L
        c = geo.cos_theta
        cdot = (v[1] - c * geo.Ldot) / geo.L
        K, Kp = float(params.stiffness(L0)), float(params.stiffness_slope(L0))
        drift = Kp * L0d * (L0 - geo.L) + K * (L0d - geo.Ldot) - params.damping * Ldd
        F.append(Fa * c)
        f.append(drift * c + Fa * cdot)
        g.append(params.damping * c)
    return ForceDynamics(legs, np.array(F), np.array(f), np.array(g))


@dataclass(frozen=True)
class ClfRow:
    a: np.ndarray  # coefficients on the stance-leg inputs
    b: float  # a u - slack <= b
    V: float
    Vdot_drift: float  # Vdot at u = 0
    F_bar: float
    F_bar_dot: float
    xi: float


def virtual_force(eta, ref: RefSample, gains: BbfGains) -> float:
    m = gains.mass
    return float(m * (gains.gravity + ref.z[2]) - m * gains.K_eta @ eta)


def lyapunov_value(eta, F_z: float, F_bar: float, gains: BbfGains) -> float:
    m = gains.mass
    return float(m * m * eta @ gains.P @ eta + 0.5 * (F_z - F_bar) ** 2)


def backstepping_clf_constraint(eta, fd: ForceDynamics, ref: RefSample, gains: BbfGains) -> ClfRow:
    """Row enforcing Vdot + gamma V <= slack, affine in the stance inputs."""
    eta = np.asarray(eta, dtype=float)
    m, P = gains.mass, gains.P
    F_bar = virtual_force(eta, ref, gains)
    xi = fd.F_z - F_bar
    eta_dot = np.array([eta[1], fd.F_z / m - gains.gravity - ref.z[2]])
    F_bar_dot = float(m * ref.z[3] - m * gains.K_eta @ eta_dot)
    # split eta_dot = A_cl eta + b xi / m
    Acl = gains.A_cl
    V = lyapunov_value(eta, fd.F_z, F_bar, gains)
    cross = 2.0 * m * float(B_ETA @ P @ eta)
    V_eta_dot = m * m * float(eta @ (P @ Acl + Acl.T @ P) @ eta)
    drift = V_eta_dot + xi * (cross + fd.f_z - F_bar_dot)
    a = xi * fd.g
    return ClfRow(a, -gains.gamma * V - drift, V, drift, F_bar, F_bar_dot, xi)


def grf_tube_cbf_constraints(F, f, g, F_d: float, Fdot_d: float, gains: BbfGains):
    """Two rows (a, b) with a u <= b for one leg, rendering the tube invariant.

    h_lo = F - (1 - c) F_d - Delta_F and h_up = (1 + c) F_d - Delta_F - F,
    each with hdot + alpha h >= 0.
    """
    lo, up = gains.tube(F_d)
    if lo > up:
        raise EmptyTubeError(f"tube empty at F_d = {F_d:.2f} N")
    h_lo, h_up = F - lo, up - F
    rows = np.array([-g, g])
    rhs = np.array([f - (1 - gains.c) * Fdot_d + gains.alpha * h_lo,
                    (1 + gains.c) * Fdot_d - f + gains.alpha * h_up])
    return rows, rhs, (lo, up), (h_lo, h_up)


@dataclass
class BbfResult:
    u: np.ndarray  # per leg, nan for legs in swing
    status: str
    slack: float
    V: float
    Vdot: float
    eta: np.ndarray
    F_z: float
    F_bar: float
    leg_force: dict  # leg -> vertical GRF
    tube: dict  # leg -> (lower, upper) for legs with active tube rows
    solution: QpSolution | None = None
    problem: QpProblem | None = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def record(self, t: float) -> dict:
        return {
            "t": t, "eta_z": float(self.eta[0]), "eta_zd": float(self.eta[1]), "V": self.V,
            "F_z": self.F_z, "status": self.status, "slack": self.slack,
            "tube": {int(k): list(v) for k, v in self.tube.items()},
        }


class BbfController:
    """Owns the QP workspace (solver plus previous active set for warm starts)."""

    def __init__(self, params: LegParams, gains: BbfGains | None = None, solver: ActiveSetQP | None = None):
        if params.damping <= 0:
            raise ValueError("the force state is not actuated without leg damping (D > 0 required)")
        self.params = params
        self.gains = gains or BbfGains.for_params(params)
        self.solver = solver or ActiveSetQP()
        self._warm = None

    def reset(self):
        self._warm = None

    def share_targets(self, fd: ForceDynamics, ref: RefSample, eta, clf: ClfRow):
        """Per-leg force-rate targets of the nominal backstepping law."""
        gains, m = self.gains, self.gains.mass
        Fd = np.array([ref.grf.get(j, (0.0, 0.0))[0] for j in fd.legs])
        Fdd = np.array([ref.grf.get(j, (0.0, 0.0))[1] for j in fd.legs])
        total = Fd.sum()
        if len(fd.legs) == 1 or total <= 1e-9:
            sigma, sigma_dot = np.ones(len(fd.legs)) / len(fd.legs), np.zeros(len(fd.legs))
        else:
            sigma = Fd / total
            sigma_dot = (Fdd * total - Fd * Fdd.sum()) / total**2
        cross = 2.0 * m * float(B_ETA @ gains.P @ eta)
        target_F = sigma * clf.F_bar
        return sigma_dot * clf.F_bar + sigma * (clf.F_bar_dot - cross) - gains.k_bs * (fd.F - target_F)

    def tick(self, state: AslipState, ref: RefSample, use_tube: bool = True) -> BbfResult:
        params, gains = self.params, self.gains
        eta, _, _ = output_dynamics(state, params, ref)
        fd = force_state_dynamics(state, params)
        n = len(fd.legs)
        clf = backstepping_clf_constraint(eta, fd, ref, gains)
        target = self.share_targets(fd, ref, eta, clf)
        scale = 1.0 / params.damping**2
        # decision vector: stance-leg inputs, then the CLF slack
        H = np.zeros((n + 1, n + 1))
        f = np.zeros(n + 1)
        for i in range(n):
            H[i, i] = 2 * (gains.w_track * fd.g[i] ** 2 * scale + gains.w_u)
            f[i] = 2 * gains.w_track * fd.g[i] * (fd.f[i] - target[i]) * scale
        H[n, n] = 2 * gains.rho
        rows = [np.append(clf.a, -1.0)]
        rhs = [clf.b]
        tube = {}
        for i, j in enumerate(fd.legs):
            if not use_tube or j not in ref.grf:
                continue
            F_d, Fdot_d = ref.grf[j]
            if gains.c * F_d < gains.tube_activation * gains.delta_F:
                continue
            r, b, bounds, _ = grf_tube_cbf_constraints(fd.F[i], fd.f[i], fd.g[i], F_d, Fdot_d, gains)
            for k in range(2):
                row = np.zeros(n + 1)
                row[i] = r[k]
                rows.append(row)
                rhs.append(b[k])
            tube[j] = bounds
        lb = np.append(np.full(n, -gains.u_max), 0.0)
        ub = np.append(np.full(n, gains.u_max), np.inf)
        prob = QpProblem(H, f, A_in=np.array(rows), b_in=np.array(rhs), lb=lb, ub=ub)
        sol = self.solver.solve(prob, warm_start=self._warm)
        self._warm = sol.active_set if sol.ok else None
        u = np.full(2, np.nan)
        slack = 0.0
        if sol.ok:
            u[list(fd.legs)] = sol.u[:n]
            slack = float(sol.u[n])
            Vdot = clf.Vdot_drift + float(clf.a @ sol.u[:n])
        else:
            Vdot = float("nan")
        return BbfResult(u, sol.status, slack, clf.V, Vdot, eta, fd.F_z, clf.F_bar,
                         {j: float(fd.F[i]) for i, j in enumerate(fd.legs)}, tube, sol, prob)


def bbf_qp_tick(state: AslipState, params: LegParams, ref: RefSample, gains: BbfGains | None = None,
                controller: BbfController | None = None) -> BbfResult:
    """One controller evaluation; raises BbfError when the QP has no solution."""
    ctrl = controller or BbfController(params, gains)
    res = ctrl.tick(state, ref)
    if not res.ok:
        raise BbfError(f"BBF-QP returned {res.status}", res.problem, res.solution)
    return res
