"""Task-space control with the GRF tube embedded as a linear constraint.

The QP decision vector is (tau, F_h, qdd).  Constraints: equations of
motion, holonomic contact acceleration, torque limits, a linearized friction
cone and the vertical-force tube per contact foot.  The cost is the output
acceleration error against the feedforward plus PD target, with a tiny
regularization so the QP stays strictly convex.

A small planar model (pitching trunk, two hip-actuated telescoping legs with
point feet) is bundled for tests and the CLI demo.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp as qpmod
from .bbf import EmptyTubeError


# the solver's own Hessian regularization; it competes with output tracking
# (a weight on F_z pulls zdd away from its target), so it is kept tiny
QP_REG = 1e-13


class TscError(RuntimeError):
    """Both the primary and the backup QP failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class RigidModelEval:
    """Model quantities at one (q, qd) for a given set of feet in contact."""

    D: np.ndarray  # (n, n) mass matrix
    C: np.ndarray  # (n,) Coriolis and gravity
    J_h: np.ndarray  # (2 k, n) contact Jacobian, (x, z) rows per foot
    Jdot_qdot_h: np.ndarray  # (2 k,)
    B: np.ndarray  # (n, m)
    tau_min: np.ndarray
    tau_max: np.ndarray
    y: np.ndarray  # (p,) outputs
    ydot: np.ndarray
    J_y: np.ndarray  # (p, n)
    Jdot_qdot_y: np.ndarray  # (p,)
    contacts: tuple  # foot indices, one per row pair of J_h
    output_names: tuple = ()
    mu: float = 0.8

    def __post_init__(self):
        n = self.D.shape[0]
        k = len(self.contacts)
        if self.D.shape != (n, n) or self.C.shape != (n,):
            raise ValueError("mass matrix and bias term dimensions disagree")
        if self.J_h.shape != (2 * k, n) or self.Jdot_qdot_h.shape != (2 * k,):
            raise ValueError("contact Jacobian does not match the contact list")
        if self.B.shape[0] != n or self.tau_min.shape != (self.B.shape[1],) or self.tau_max.shape != (self.B.shape[1],):
            raise ValueError("actuation dimensions disagree")
        p = self.y.shape[0]
        if self.J_y.shape != (p, n) or self.Jdot_qdot_y.shape != (p,) or self.ydot.shape != (p,):
            raise ValueError("output dimensions disagree")
        if np.max(np.abs(self.D - self.D.T)) > 1e-9 or np.linalg.eigvalsh(self.D)[0] <= 0:
            raise ValueError("mass matrix must be symmetric positive definite")

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass
class OutputTargets:
    y_d: np.ndarray
    yd_d: np.ndarray
    ydd_d: np.ndarray
    Kp: np.ndarray
    Kd: np.ndarray

    def __post_init__(self):
        for name in ("y_d", "yd_d", "ydd_d", "Kp", "Kd"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.Kp < 0) or np.any(self.Kd < 0):
            raise ValueError("gains must be nonnegative")

    def feedback(self, y, ydot) -> np.ndarray:
        return -self.Kp * (y - self.y_d) - self.Kd * (ydot - self.yd_d)


@dataclass
class TscQp:
    problem: qpmod.QpProblem
    n_tau: int
    n_force: int
    n_acc: int
    target_acc: np.ndarray  # ydd_d + ydd_t
    tube: dict  # foot -> (lower, upper)

    def split(self, u):
        u = np.asarray(u)
        a, b = self.n_tau, self.n_tau + self.n_force
        return u[:a], u[a:b], u[b:]


def tube_bounds(F_d: float, c: float, delta_F: float) -> tuple[float, float]:
    lo, up = (1 - c) * F_d + delta_F, (1 + c) * F_d - delta_F
    if lo > up:
        raise EmptyTubeError(f"tube is empty at F_d = {F_d:.3f}")
    return lo, up


def assemble_tsc_qp(ev: RigidModelEval, targets: OutputTargets, F_d: dict, c: float = 0.3,
                    delta_F: float = 0.0, reg: float = 1e-13) -> TscQp:
    """QP over (tau, F_h, qdd) for the feet in ``ev.contacts``."""
    n, m, k = ev.n, ev.m, 2 * len(ev.contacts)
    if targets.y_d.shape != ev.y.shape:
        raise ValueError("targets do not match the outputs")
    nv = m + k + n
    it, iF, ia = slice(0, m), slice(m, m + k), slice(m + k, nv)
    target = targets.ydd_d + targets.feedback(ev.y, ev.ydot)
    # cost || J_y qdd + Jdot_y qdot - target ||^2 (+ reg ||u||^2)
    H = np.zeros((nv, nv))
    f = np.zeros(nv)
    H[ia, ia] = 2 * ev.J_y.T @ ev.J_y
    f[ia] = 2 * ev.J_y.T @ (ev.Jdot_qdot_y - target)
    H += 2 * reg * np.eye(nv)
    # D qdd + C = J_h' F + B tau ;  J_h qdd + Jdot_h qdot = 0
    A_eq = np.zeros((n + k, nv))
    A_eq[:n, it], A_eq[:n, iF], A_eq[:n, ia] = -ev.B, -ev.J_h.T, ev.D
    A_eq[n:, ia] = ev.J_h
    b_eq = np.concatenate([-ev.C, -ev.Jdot_qdot_h])
    rows, rhs, tube = [], [], {}
    for i, foot in enumerate(ev.contacts):
        fx, fz = m + 2 * i, m + 2 * i + 1
        for sign in (1.0, -1.0):  # |F_x| <= mu F_z
            r = np.zeros(nv)
            r[fx], r[fz] = sign, -ev.mu
            rows.append(r)
            rhs.append(0.0)
        lo, up = tube_bounds(F_d[foot], c, delta_F)
        tube[foot] = (lo, up)
        r = np.zeros(nv)
        r[fz] = 1.0
        rows += [r, -r]
        rhs += [up, -lo]
    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    lb[it], ub[it] = ev.tau_min, ev.tau_max
    prob = qpmod.QpProblem(H, f, A_eq, b_eq, np.array(rows).reshape(-1, nv), np.array(rhs), lb, ub)
    return TscQp(prob, m, k, n, target, tube)


@dataclass
class TscResult:
    tau: np.ndarray
    forces: np.ndarray
    qdd: np.ndarray
    contacts: tuple
    cost: float  # output acceleration error, recomputed from qdd
    fallback: bool = False
    diagnostics: dict = field(default_factory=dict)


def tracking_cost(ev: RigidModelEval, qdd, target) -> float:
    e = ev.J_y @ qdd + ev.Jdot_qdot_y - target
    return float(e @ e)


def tsc_tick(evaluate, targets_for, F_d: dict, contacts: tuple, c: float = 0.3, delta_F: float = 0.0,
             backup_stance: int | None = None) -> TscResult:
    """One controller tick with the single-support backup.

    ``evaluate(contacts)`` returns the RigidModelEval for a contact set and
    ``targets_for(ev)`` the matching OutputTargets.  If a double-support QP
    is infeasible (or its tube is empty) the tick is redone in single
    support on ``backup_stance``.
    """
    attempts = [tuple(contacts)]
    if len(contacts) == 2 and backup_stance is not None:
        attempts.append((backup_stance,))
    diag = {}
    for n_try, cs in enumerate(attempts):
        ev = evaluate(cs)
        try:
            q = assemble_tsc_qp(ev, targets_for(ev), F_d, c, delta_F)
        except EmptyTubeError as e:
            diag[str(cs)] = f"empty tube: {e}"
            continue
        sol = qpmod.solve(q.problem, reg=QP_REG)
        if not sol.ok:
            diag[str(cs)] = f"QP {sol.status}: {sol.certificate}"
            continue
        tau, F, qdd = q.split(sol.u)
        return TscResult(tau, F, qdd, cs, tracking_cost(ev, qdd, q.target_acc), n_try > 0,
                         {"tube": q.tube, "failed": diag, "status": sol.status})
    raise TscError("primary and backup task-space QPs failed", diag)


# -- planar toy model ------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyBiped:
    """Trunk (x, z, pitch) with two legs, each a hip angle and a prismatic length.

    q = [x, z, theta, phi_1, l_1, phi_2, l_2]; the feet are point masses at
    the leg ends.  Hip angles and lengths are actuated.
    """

    trunk_mass: float = 30.0
    trunk_inertia: float = 1.5
    foot_mass: float = 1.0
    gravity: float = 9.81
    tau_limit: tuple = (300.0, 3000.0)  # hip torque (N m), leg force (N)
    mu: float = 0.8

    @property
    def total_mass(self) -> float:
        return self.trunk_mass + 2 * self.foot_mass

    def foot(self, q, qd, j):
        """Position, Jacobian and Jdot qdot of foot j."""
        i_phi, i_l = 3 + 2 * j, 4 + 2 * j
        a = q[2] + q[i_phi]
        ad = qd[2] + qd[i_phi]
        l, ld = q[i_l], qd[i_l]
        s, co = np.sin(a), np.cos(a)
        p = np.array([q[0] + l * s, q[1] - l * co])
        J = np.zeros((2, 7))
        J[0, 0], J[1, 1] = 1.0, 1.0
        J[:, 2] = J[:, i_phi] = [l * co, l * s]
        J[:, i_l] = [s, -co]
        Jdq = np.array([2 * ld * ad * co - l * ad * ad * s, 2 * ld * ad * s + l * ad * ad * co])
        return p, J, Jdq

    def com(self, q, qd):
        """CoM height with its Jacobian row and Jdot qdot."""
        M = self.total_mass
        J = np.zeros(7)
        J[1] = self.trunk_mass / M
        z = self.trunk_mass * q[1] / M
        jdq = 0.0
        for j in (0, 1):
            p, Jf, Jdq = self.foot(q, qd, j)
            z += self.foot_mass * p[1] / M
            J += self.foot_mass * Jf[1] / M
            jdq += self.foot_mass * Jdq[1] / M
        return z, J, jdq

    def dynamics_terms(self, q, qd):
        D = np.diag([self.trunk_mass, self.trunk_mass, self.trunk_inertia, 0, 0, 0, 0]).astype(float)
        C = np.zeros(7)
        C[1] = self.trunk_mass * self.gravity
        for j in (0, 1):
            _, J, Jdq = self.foot(q, qd, j)
            D += self.foot_mass * J.T @ J
            C += self.foot_mass * J.T @ (Jdq + np.array([0.0, self.gravity]))
        return D, C

    def evaluate(self, q, qd, contacts) -> RigidModelEval:
        """Outputs: pitch, CoM height, and the swing foot position in single support."""
        q, qd = np.asarray(q, dtype=float), np.asarray(qd, dtype=float)
        D, C = self.dynamics_terms(q, qd)
        Jh, Jdh = [], []
        for j in contacts:
            _, J, Jdq = self.foot(q, qd, j)
            Jh.append(J)
            Jdh.append(Jdq)
        B = np.zeros((7, 4))
        B[3:, :] = np.eye(4)
        lim = np.tile(self.tau_limit, 2)
        zc, Jz, jdz = self.com(q, qd)
        y, Jy, jdy, names = [q[2], zc], [np.eye(7)[2], Jz], [0.0, jdz], ["pitch", "z_com"]
        if len(contacts) == 1:
            sw = 1 - contacts[0]
            p, J, Jdq = self.foot(q, qd, sw)
            y += list(p)
            Jy += list(J)
            jdy += list(Jdq)
            names += ["swing_x", "swing_z"]
        Jy = np.array(Jy)
        return RigidModelEval(D, C, np.array(Jh).reshape(-1, 7), np.array(Jdh).reshape(-1), B, -lim, lim,
                              np.array(y), Jy @ qd, Jy, np.array(jdy), tuple(contacts), tuple(names), self.mu)

    def forward(self, q, qd, tau, contacts):
        """Constrained accelerations and contact forces for a held torque."""
        ev = self.evaluate(q, qd, contacts)
        k = ev.J_h.shape[0]
        K = np.zeros((7 + k, 7 + k))
        K[:7, :7], K[:7, 7:], K[7:, :7] = ev.D, -ev.J_h.T, ev.J_h
        rhs = np.concatenate([ev.B @ tau - ev.C, -ev.Jdot_qdot_h])
        sol = np.linalg.solve(K, rhs)
        return sol[:7], sol[7:]

    def standing_pose(self, height: float = 0.9, stance: float = 0.3, contacts=(0, 1)):
        """Symmetric pose with the feet on the ground at x = -stance/2, +stance/2 (or 0 for one foot)."""
        if len(contacts) == 2:
            dx = 0.5 * stance
            phi = np.arctan2(dx, height)
            l = np.hypot(dx, height)
            return np.array([0.0, height, 0.0, -phi, l, phi, l])
        # stance foot under the trunk, the other lifted straight below the hip
        return np.array([0.0, height, 0.0, 0.0, height, 0.0, 0.8 * height])


@dataclass
class ToyRun:
    t: np.ndarray
    z_com: np.ndarray
    z_des: np.ndarray
    pitch: np.ndarray
    grf: np.ndarray  # (ticks, 2) vertical force per foot from the QP (nan when not in contact)
    tube: np.ndarray  # (ticks, 2, 2) lower and upper bound per foot
    fallback: np.ndarray
    cost: np.ndarray


def simulate_toy(model: ToyBiped, z_des, duration: float = 2.0, rate: float = 2000.0, Kp: float = 100.0,
                 Kd: float = 20.0, z0_offset: float = 0.0, c: float = 0.3, delta_F: float = 0.0,
                 stance: float = 0.3) -> ToyRun:
    """Double-support height tracking on the toy model.

    ``z_des(t)`` returns (z, zd, zdd) for the CoM height.  Torques are held
    over each control tick and the constrained dynamics are integrated with
    RK4.  The vertical force reference is split evenly between the feet.
    """
    contacts = (0, 1)
    z_nom = model.standing_pose(stance=stance)[1]
    q = model.standing_pose(height=z_nom + z0_offset, stance=stance)
    qd = np.zeros(7)
    # keep the feet where the nominal pose puts them
    feet = [model.foot(model.standing_pose(stance=stance), qd, j)[0] for j in contacts]
    q0 = q.copy()
    for j in contacts:
        dx, dz = feet[j][0] - q0[0], feet[j][1] - q0[1]
        q[3 + 2 * j], q[4 + 2 * j] = np.arctan2(dx, -dz), np.hypot(dx, dz)
    dt = 1.0 / rate
    n = int(round(duration * rate))
    log = {k: [] for k in ("t", "z", "zd", "pitch", "grf", "tube", "fb", "cost")}
    M, g = model.total_mass, model.gravity
    for i in range(n):
        t = i * dt
        z, zd, zdd = z_des(t)

        def targets_for(ev):
            p = len(ev.y)
            y_d, yd_d, ydd_d = np.zeros(p), np.zeros(p), np.zeros(p)
            y_d[1], yd_d[1], ydd_d[1] = z, zd, zdd
            if p > 2:  # backup: hold the lifted foot where it is
                y_d[2:] = ev.y[2:]
            return OutputTargets(y_d, yd_d, ydd_d, Kp, Kd)

        F_total = M * (zdd + g)
        res = tsc_tick(lambda cs: model.evaluate(q, qd, cs), targets_for, {0: 0.5 * F_total, 1: 0.5 * F_total},
                       contacts, c, delta_F, backup_stance=1)
        grf = np.full(2, np.nan)
        tube = np.full((2, 2), np.nan)
        for k, j in enumerate(res.contacts):
            grf[j] = res.forces[2 * k + 1]
            tube[j] = res.diagnostics["tube"][j]
        log["t"].append(t)
        log["z"].append(model.com(q, qd)[0])
        log["zd"].append(z)
        log["pitch"].append(q[2])
        log["grf"].append(grf)
        log["tube"].append(tube)
        log["fb"].append(res.fallback)
        log["cost"].append(res.cost)

        def f(state):
            a, _ = model.forward(state[:7], state[7:], res.tau, res.contacts)
            return np.concatenate([state[7:], a])

        s = np.concatenate([q, qd])
        k1 = f(s)
        k2 = f(s + 0.5 * dt * k1)
        k3 = f(s + 0.5 * dt * k2)
        k4 = f(s + dt * k3)
        s = s + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        q, qd = s[:7], s[7:]
    return ToyRun(np.array(log["t"]), np.array(log["z"]), np.array(log["zd"]), np.array(log["pitch"]),
                  np.array(log["grf"]), np.array(log["tube"]), np.array(log["fb"]), np.array(log["cost"]))
