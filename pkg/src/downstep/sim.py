"""Event-driven closed-loop simulation of the aSLIP walker over downsteps.

Each step is a single-support phase (SSP) ending at swing-foot touchdown and
a double-support phase (DSP) ending when the trailing leg's vertical GRF
reaches zero.  The BBF-QP drives the stance rest lengths, the swing foot
follows a time-based trajectory whose landing point comes from H-LIP
stepping, and the swing rest length tracks the geometric leg length so the
new leg touches down almost unloaded.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from .aslip import L0_IDX, L0D_IDX, AslipState, LegParams, mechanical_energy, rk4_step
from .bbf import BbfController, BbfGains, RefSample
from .hlip import HlipParams, p1_orbit, predict_preimpact, s2s_matrices, s2s_residual, step_size_command
from .profiles import SurfaceSet, build_synthetic_surfaces

SCHEMA_VERSION = 1
SCENARIO_ALIASES = {"flat": "flat", "planned": "planned", "planned-downstep": "planned",
                    "unplanned": "unplanned", "unplanned-downstep": "unplanned"}


class SimulationError(RuntimeError):
    pass


# -- ground ---------------------------------------------------------------------

@dataclass(frozen=True)
class GroundModel:
    """Flat ground that drops by ``depth`` for x >= edge.

    While ``known`` is False (unplanned runs before the missed touchdown) the
    walker believes the ground is flat everywhere.
    """

    edge: float = math.inf
    depth: float = 0.0
    known: bool = True

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("only downsteps are modelled (depth >= 0)")

    def actual(self, x: float) -> float:
        return -self.depth if x >= self.edge else 0.0

    def believed(self, x: float) -> float:
        return self.actual(x) if self.known else 0.0


def step_events(state: AslipState, swing_foot, ground: GroundModel, params: LegParams, trailing: int | None = None):
    """Guard values: (touchdown gap of the swing foot, liftoff force of the trailing leg).

    The gap is measured against the actual terrain; the force is the trailing
    leg's vertical GRF (None outside double support).
    """
    from .aslip import vertical_grf

    gap = None if swing_foot is None else float(swing_foot[1] - ground.actual(swing_foot[0]))
    force = None if trailing is None else float(vertical_grf(state, params, trailing))
    return gap, force


# -- configuration ----------------------------------------------------------------

@dataclass
class ScenarioConfig:
    scenario: str = "flat"
    height: float = 0.0
    downstep_index: int = 6
    total_steps: int = 10
    v_des: float = 1.0
    dt: float = 1e-3
    substeps: int = 10
    event_tol: float = 1e-9
    swing_clearance: float = 0.08
    swing_gain: float = 60.0
    initial_dz: float = 0.0
    leg: LegParams = field(default_factory=LegParams)
    gain_overrides: dict = field(default_factory=dict)
    hlip_z0: float = 1.0
    log_every: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIO_ALIASES:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        self.scenario = SCENARIO_ALIASES[self.scenario]
        if self.scenario == "flat":
            self.height = 0.0
        if not 0.0 <= self.height <= 0.10 + 1e-12:
            raise ValueError("downstep height must lie in [0, 0.10] m")
        if self.scenario != "flat" and self.total_steps < self.downstep_index + 2:
            raise ValueError("total_steps must cover the downstep and the recovery step")
        if self.dt <= 0 or self.substeps < 1 or self.log_every < 1:
            raise ValueError("invalid integrator settings")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leg"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["leg"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "leg" in d and isinstance(d["leg"], dict):
            leg = dict(d["leg"])
            for k in ("stiffness_coeffs", "length_range"):
                if k in leg:
                    leg[k] = tuple(leg[k])
            d["leg"] = LegParams(**leg)
        return cls(**d)


# -- generic phase integrator -------------------------------------------------------

@dataclass
class PhaseResult:
    q: np.ndarray
    t: float
    event: bool
    timeout: bool = False
    aborted: str | None = None


def integrate_phase(rhs, q0, t0: float, guard, dt: float, substeps: int, t_max: float,
                    control=None, on_tick=None, tol: float = 1e-9, min_time: float = 0.0) -> PhaseResult:
    """RK4 with a zero-order-hold control per tick and bisection on the guard.

    ``rhs(q, t, u)`` is the vector field, ``control(q, t)`` returns the held
    input for one tick (None if unused) and ``guard(q, t)`` crosses from
    positive to nonpositive at the event.  ``on_tick(q, t, u)`` may return a
    string to abort.  The event time is refined until |guard| < tol.
    """
    q = np.array(q0, dtype=float)
    t = float(t0)
    h = dt / substeps

    def advance(q, t, u, span):
        n = max(1, int(math.ceil(span / h - 1e-9)))
        step = span / n
        for i in range(n):
            tt = t + i * step
            q = rk4_step(lambda x, tt=tt: rhs(x, tt, u), q, step)
        return q

    g_prev = guard(q, t)
    if g_prev <= 0.0:
        raise SimulationError("guard already crossed at phase entry")
    while t < t_max - 1e-12:
        u = control(q, t) if control is not None else None
        if on_tick is not None:
            msg = on_tick(q, t, u)
            if msg:
                return PhaseResult(q, t, False, aborted=msg)
        span = min(dt, t_max - t)
        q1 = advance(q, t, u, span)
        g1 = guard(q1, t + span)
        if g1 <= 0.0 and t + span > min_time:
            lo, hi = 0.0, span
            q_hi = q1
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                qm = advance(q, t, u, mid)
                gm = guard(qm, t + mid)
                if abs(gm) < tol:
                    return PhaseResult(qm, t + mid, True)
                if gm > 0.0:
                    lo = mid
                else:
                    hi, q_hi = mid, qm
                if hi - lo < 1e-15:
                    break
            return PhaseResult(q_hi, t + hi, True)
        q, t, g_prev = q1, t + span, g1
    return PhaseResult(q, t, False, timeout=True)


# -- fast walker vector field ---------------------------------------------------------

def _poly(c, x):
    out = 0.0
    for a in reversed(c):
        out = out * x + a
    return out


def _legs_state(q, feet, legs, params, Kc, dKc):
    """Per-leg (d, L, Ldot, F) for the given contact legs."""
    x, z, xd, zd = q[0], q[1], q[2], q[3]
    out = []
    for j in legs:
        dx, dz = x - feet[j][0], z - feet[j][1]
        L = math.sqrt(dx * dx + dz * dz)
        Ld = (dx * xd + dz * zd) / L
        L0, L0d = q[L0_IDX[j]], q[L0D_IDX[j]]
        F = _poly(Kc, L0) * (L0 - L) + params.damping * (L0d - Ld)
        out.append((dx, dz, L, Ld, F))
    return out


def walker_rhs(q, feet, legs, params: LegParams, u, Kc, dKc):
    """State derivative plus power terms, on an augmented state [q, W_act, W_diss]."""
    m = params.mass
    ax, az = 0.0, -params.gravity
    p_act = p_diss = 0.0
    for j, (dx, dz, L, Ld, F) in zip(legs, _legs_state(q, feet, legs, params, Kc, dKc)):
        ax += F * dx / (L * m)
        az += F * dz / (L * m)
        L0, L0d = q[L0_IDX[j]], q[L0D_IDX[j]]
        p_act += F * L0d + 0.5 * _poly(dKc, L0) * L0d * (L0 - L) ** 2
        p_diss += params.damping * (L0d - Ld) ** 2
    dq = np.empty(10)
    dq[0], dq[1], dq[2], dq[3] = q[2], q[3], ax, az
    dq[4], dq[5], dq[6], dq[7] = q[5], u[0], q[7], u[1]
    dq[8], dq[9] = p_act, p_diss
    return dq


# -- swing foot -------------------------------------------------------------------------

def _minjerk(s):
    s = min(max(s, 0.0), 1.0)
    return 10 * s**3 - 15 * s**4 + 6 * s**5, (30 * s**2 - 60 * s**3 + 30 * s**4), (60 * s - 180 * s**2 + 120 * s**3)


@dataclass
class SwingPlan:
    x0: float
    z0: float
    z_end: float
    T: float
    clearance: float
    v_td: float
    x_target: float = 0.0

    def foot(self, t: float):
        """Position, velocity and acceleration of the swing foot at time t."""
        T = self.T
        if t >= T:
            tau = t - T
            return (np.array([self.x_target, self.z_end - self.v_td * tau]),
                    np.array([0.0, -self.v_td]), np.zeros(2))
        s = t / T
        b, db, ddb = _minjerk(s)
        x = self.x0 + (self.x_target - self.x0) * b
        xd = (self.x_target - self.x0) * db / T
        xdd = (self.x_target - self.x0) * ddb / T**2
        A = max(self.z0, self.z_end) - min(self.z0, self.z_end) + self.clearance
        bump, dbump, ddbump = 16 * A * s**2 * (1 - s) ** 2, 16 * A * (2 * s - 6 * s**2 + 4 * s**3), \
            16 * A * (2 - 12 * s + 12 * s**2)
        e, de, dde = s**3 * (s - 1), 4 * s**3 - 3 * s**2, 12 * s**2 - 6 * s
        w = -self.v_td * T
        z = self.z0 + (self.z_end - self.z0) * b + bump + w * e
        zd = ((self.z_end - self.z0) * db + dbump + w * de) / T
        zdd = ((self.z_end - self.z0) * ddb + ddbump + w * dde) / T**2
        return np.array([x, z]), np.array([xd, zd]), np.array([xdd, zdd])


# -- log ---------------------------------------------------------------------------------

LOG_COLUMNS = (
    "t", "step", "kind", "phase", "x", "z", "xd", "zd", "L0_0", "L0d_0", "L0_1", "L0d_1",
    "contact_0", "contact_1", "foot0_x", "foot0_z", "foot1_x", "foot1_z",
    "grf_0", "grf_1", "z_ref", "zd_ref", "grf_ref_0", "grf_ref_1",
    "tube_lo_0", "tube_up_0", "tube_lo_1", "tube_up_1", "V", "slack", "qp_status", "u_0", "u_1",
)


@dataclass
class TrajectoryLog:
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)  # (t, name, step)
    steps: list = field(default_factory=list)  # per-step S2S records
    energy: list = field(default_factory=list)  # per-phase energy audit

    def append(self, row: dict):
        if self.rows and row["t"] <= self.rows[-1]["t"]:
            raise SimulationError("log timestamps must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class SimResult:
    config: ScenarioConfig
    log: TrajectoryLog
    summary: dict

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=1, sort_keys=True)


# -- scenario runner -----------------------------------------------------------------------

class _Run:
    def __init__(self, cfg: ScenarioConfig, surfaces: SurfaceSet | None):
        self.cfg = cfg
        self.params = cfg.leg
        self.ss = surfaces or build_synthetic_surfaces()
        self.gains = BbfGains.for_params(self.params, **cfg.gain_overrides)
        self.ctrl = BbfController(self.params, self.gains)
        t = self.ss.timings
        self.T_S, self.T_D = t.T_SSP, t.T_DSP
        self.hp = HlipParams(cfg.hlip_z0, self.T_S, self.T_D, cfg.v_des, self.params.gravity)
        self.mats = s2s_matrices(self.hp)
        self.x_star, self.u_star = p1_orbit(self.hp, self.mats)
        self.u_min, self.u_max = 0.5 * self.u_star, 2.0 * self.u_star
        self.Kc = self.params.stiffness_coeffs
        self.dKc = tuple(np.polynomial.polynomial.polyder(self.Kc)) or (0.0,)
        self.ground = GroundModel()
        self.log = TrajectoryLog()
        self.h_ref = cfg.height if cfg.scenario == "planned" else 0.0
        self.v_td = self.ss.foot_descent_speed

    # references ----------------------------------------------------------------

    def kind(self, k: int) -> str:
        if self.cfg.scenario == "flat":
            return "nominal"
        d = self.cfg.downstep_index
        return "downstep" if k == d else "recovery" if k == d + 1 else "nominal"

    def roles(self, kind: str, phase: str, stance: int, trailing: int | None = None) -> dict:
        first = kind in ("nominal", "downstep")
        if phase == "SSP":
            return {stance: "other" if first else "downstep"}
        return {stance: "downstep" if first else "other", trailing: "other" if first else "downstep"}

    def _eval(self, surf, t, h, order):
        T = surf.duration
        if t <= T:
            v = surf.evaluate(t, h)
            return v.value, v.dt, v.dtt, v.dttt
        v = surf.evaluate(T, h)
        tau = t - T
        if order == 1:
            return v.value + v.dt * tau, v.dt, 0.0, 0.0
        return v.value + v.dt * tau + 0.5 * v.dtt * tau**2, v.dt + v.dtt * tau, v.dtt, 0.0

    def datum(self, k, phase, t):
        """Ground datum added to the CoM surfaces, with its first three time derivatives.

        The surfaces describe the CoM relative to the upper ground and return
        to the flat gait after the recovery step, so once the walker is on the
        lowered ground the datum moves down by h during the recovery SSP.
        """
        d = self.cfg.downstep_index
        if self.cfg.scenario == "flat" or k <= d:
            return 0.0, 0.0, 0.0, 0.0
        h = self.h_ref
        if k > d + 1 or phase == "DSP":
            return -h, 0.0, 0.0, 0.0
        T = self.T_S
        s = min(max(t / T, 0.0), 1.0)
        b = 10 * s**3 - 15 * s**4 + 6 * s**5
        db = (30 * s**2 - 60 * s**3 + 30 * s**4) / T
        ddb = (60 * s - 180 * s**2 + 120 * s**3) / T**2
        dddb = (60 - 360 * s + 360 * s**2) / T**3 if 0.0 < t < T else 0.0
        return -h * b, -h * db, -h * ddb, -h * dddb

    def reference(self, kind, phase, t, roles, k=0) -> RefSample:
        sc = "flat" if kind == "nominal" else self.cfg.scenario
        h = self.h_ref if kind != "nominal" else 0.0
        com = self.ss.get("com", sc, kind, phase)
        datum = self.datum(k, phase, t)
        z = tuple(a + b for a, b in zip(self._eval(com, t, h, 2), datum))
        grf = {}
        for leg, role in roles.items():
            g = self._eval(self.ss.get("grf", sc, kind, phase, role), t, h, 1)
            # a moving datum only happens in single support, where one leg carries it
            grf[leg] = (g[0] + self.params.mass * datum[2], g[1] + self.params.mass * datum[3])
        return RefSample(z, grf)

    # helpers -------------------------------------------------------------------

    def state(self, q, feet, contact) -> AslipState:
        return AslipState(q[:8], feet, contact)

    def record(self, t, k, kind, phase, q, feet, contact, ref, res, u):
        from .aslip import vertical_grf

        st = self.state(q, feet, contact)
        grf = [vertical_grf(st, self.params, j) if contact[j] else 0.0 for j in (0, 1)]
        tube = res.tube if res is not None else {}
        row = {
            "t": t, "step": k, "kind": kind, "phase": phase,
            "x": q[0], "z": q[1], "xd": q[2], "zd": q[3],
            "L0_0": q[4], "L0d_0": q[5], "L0_1": q[6], "L0d_1": q[7],
            "contact_0": int(contact[0]), "contact_1": int(contact[1]),
            "foot0_x": feet[0][0], "foot0_z": feet[0][1], "foot1_x": feet[1][0], "foot1_z": feet[1][1],
            "grf_0": grf[0], "grf_1": grf[1], "z_ref": ref.z[0], "zd_ref": ref.z[1],
            "grf_ref_0": ref.grf.get(0, (math.nan,))[0], "grf_ref_1": ref.grf.get(1, (math.nan,))[0],
            "tube_lo_0": tube.get(0, (math.nan, math.nan))[0], "tube_up_0": tube.get(0, (math.nan, math.nan))[1],
            "tube_lo_1": tube.get(1, (math.nan, math.nan))[0], "tube_up_1": tube.get(1, (math.nan, math.nan))[1],
            "V": res.V if res is not None else math.nan,
            "slack": res.slack if res is not None else math.nan,
            "qp_status": res.status if res is not None else "none",
            "u_0": float(u[0]), "u_1": float(u[1]),
        }
        for key in ("x", "z", "xd", "zd", "L0_0", "L0d_0", "L0_1", "L0d_1", "foot0_x", "foot0_z",
                    "foot1_x", "foot1_z", "z_ref", "zd_ref", "grf_ref_0", "grf_ref_1"):
            row[key] = float(row[key])
        self.log.append(row)

    def fall_check(self, q, feet, legs) -> str | None:
        if q[1] < 0.3 * self.hp.z0 + min(0.0, -self.ground.depth):
            return "CoM below fall threshold"
        lo, hi = self.params.length_range
        for j in legs:
            L = math.hypot(q[0] - feet[j][0], q[1] - feet[j][1])
            if not lo <= L <= hi:
                return f"leg {j} length {L:.3f} m out of range"
        if not np.all(np.isfinite(q)):
            return "non-finite state"
        return None

    def control(self, q, feet, contact, ref):
        st = self.state(q, feet, contact)
        res = self.ctrl.tick(st, ref)
        if not res.ok:
            self.fallbacks += 1
            res = self.ctrl.tick(st, ref, use_tube=False)
        u = np.zeros(2)
        if res.ok:
            for j in st.stance_legs:
                u[j] = res.u[j]
        return u, res

    def swing_input(self, q, swing: int, plan: SwingPlan, t: float, foot_rate=(0.0, 0.0)) -> float:
        """Rest-length acceleration that keeps the swing leg force-free.

        The would-be force is evaluated as if the foot were already anchored,
        F = K(L0)(L0 - L) + D(L0dot - Ldot_anchored), and driven to zero at
        rate ``swing_gain``, so the leg touches down unloaded even when the
        foot is still moving.
        """
        (fx, fz), (vx, vz), _ = plan.foot(t)
        vx, vz = vx + foot_rate[0], vz + foot_rate[1]
        dx, dz = q[0] - fx, q[1] - fz
        L = math.hypot(dx, dz)
        rvx, rvz = q[2] - vx, q[3] - vz
        Ld = (dx * rvx + dz * rvz) / L
        dv = dx * q[2] + dz * q[3]
        Ld_a = dv / L
        acc = self._acc  # CoM acceleration from the stance legs (the swing leg is massless)
        Ldd_a = (rvx * q[2] + rvz * q[3] + dx * acc[0] + dz * acc[1]) / L - dv * (dx * rvx + dz * rvz) / L**3
        L0, L0d = q[L0_IDX[swing]], q[L0D_IDX[swing]]
        K, D = _poly(self.Kc, L0), self.params.damping
        F = K * (L0 - L) + D * (L0d - Ld_a)
        spring_rate = _poly(self.dKc, L0) * L0d * (L0 - L) + K * (L0d - Ld)
        return Ldd_a - (spring_rate + self.cfg.swing_gain * F) / D

    # main loop ------------------------------------------------------------------

    def initial_state(self):
        p_post = self.x_star[0] - self.u_star + self.x_star[1] * self.T_D
        v0 = self.x_star[1]
        ref = self.reference("nominal", "SSP", 0.0, {0: "other"})
        z = ref.z[0] + self.cfg.initial_dz
        zd = ref.z[1]
        feet = np.array([[0.0, 0.0], [-self.u_star, 0.0]])
        x = p_post
        L = math.hypot(x, z)
        Ld = (x * v0 + z * zd) / L
        F_axial = ref.grf[0][0] / (z / L)
        Kc = self.Kc
        L0 = brentq(lambda l0: _poly(Kc, l0) * (l0 - L) - F_axial, L, L + 0.5)
        Lsw = math.hypot(x - feet[1][0], z)
        Lsw_d = ((x - feet[1][0]) * v0 + z * zd) / Lsw
        q = np.array([x, z, v0, zd, L0, Ld, Lsw, Lsw_d, 0.0, 0.0])
        return q, feet

    def run(self) -> SimResult:
        cfg = self.cfg
        q, feet = self.initial_state()
        stance = 0
        t_global = 0.0
        self.fallbacks = 0
        self.tube_violations = 0
        self.tube_entry_violations = 0
        self.tick_count = 0
        self.eta_log = []
        failure = None
        pre_impact = []
        self._acc = np.zeros(2)
        lift_x = feet[1][0]
        lift_z = feet[1][1]

        for k in range(cfg.total_steps):
            kind = self.kind(k)
            swing = 1 - stance
            x_st = feet[stance][0]
            if kind == "downstep" and cfg.scenario != "flat":
                self.ground = GroundModel(x_st + 0.5 * self.u_star, cfg.height, known=cfg.scenario == "planned")
            # ---------------- SSP
            target_z = self.ground.believed(x_st + self.u_star)
            plan = SwingPlan(lift_x, lift_z, target_z, self.T_S, cfg.swing_clearance, self.v_td)
            plan.x_target = x_st + self.u_star
            commanded = [self.u_star]
            roles = self.roles(kind, "SSP", stance)
            contact = (stance == 0, stance == 1)
            t0 = t_global
            last = {"ref": None, "res": None}

            def control(qq, t, kind=kind, roles=roles, contact=contact, plan=plan, stance=stance, swing=swing,
                        x_st=x_st, t0=t0, k=k):
                tl = t - t0
                ref = self.reference(kind, "SSP", tl, roles, k)
                if tl < self.T_S - 0.5 * self.cfg.dt or self.cfg.scenario == "unplanned":
                    xp = predict_preimpact(self.hp, [qq[0] - x_st, qq[2]], tl)
                    u_step = step_size_command(xp, self.x_star, self.u_star, self.mats.K_db)
                    u_step = min(max(u_step, self.u_min), self.u_max)
                    plan.x_target = x_st + u_step
                    commanded[0] = u_step
                ff = feet.copy()
                ff[swing] = plan.foot(tl)[0]
                u, res = self.control(qq, ff, contact, ref)
                self._acc = walker_rhs(qq, ff, [stance], self.params, (0.0, 0.0), self.Kc, self.dKc)[2:4]
                rate = (0.0, 0.0)
                if tl >= self.T_S and self.cfg.scenario == "unplanned" and self.u_min < commanded[0] < self.u_max:
                    # past the nominal touchdown the target tracks the current state
                    Kd = self.mats.K_db
                    rate = (Kd[0] * qq[2] + Kd[1] * self._acc[0], 0.0)
                u[swing] = self.swing_input(qq, swing, plan, tl, rate)
                last["ref"], last["res"] = ref, res
                return u

            def rhs(qq, t, u, stance=stance):
                return walker_rhs(qq, feet, [stance], self.params, u, self.Kc, self.dKc)

            def guard(qq, t, plan=plan, t0=t0):
                tl = t - t0
                if tl < 0.5 * self.T_S:
                    return 1.0
                f = plan.foot(tl)[0]
                return f[1] - self.ground.actual(f[0])

            def on_tick(qq, t, u, kind=kind, k=k, contact=contact, stance=stance, swing=swing, plan=plan, t0=t0):
                ff = feet.copy()
                ff[swing] = plan.foot(t - t0)[0]
                self.tick_bookkeeping(t, k, kind, "SSP", qq, ff, contact, last, u)
                return self.fall_check(qq, feet, [stance])

            E0 = mechanical_energy(self.state(q, feet, contact), self.params)
            q[8] = q[9] = 0.0
            cap = 2 * self.ss.phase_duration(cfg.scenario if kind != "nominal" else "flat",
                                             kind if kind != "nominal" else "nominal", "SSP", 0.10)
            res = integrate_phase(rhs, q, t_global, guard, cfg.dt, cfg.substeps, t_global + cap,
                                  control=control, on_tick=on_tick, tol=cfg.event_tol,
                                  min_time=t_global + 0.5 * self.T_S)
            q = res.q
            self.energy_audit("SSP", k, E0, q, feet, contact)
            if res.aborted or res.timeout:
                failure = res.aborted or "touchdown not found (timeout)"
                t_global = res.t
                break
            t_global = res.t
            foot = plan.foot(t_global - t0)[0]
            feet = feet.copy()
            feet[swing] = [foot[0], self.ground.actual(foot[0])]
            if cfg.scenario == "unplanned" and kind == "downstep":
                self.h_ref = max(0.0, self.ground.believed(foot[0]) - self.ground.actual(foot[0]))
                self.ground = GroundModel(self.ground.edge, self.ground.depth, known=True)
                self.log.events.append((t_global, "missed-touchdown-detected", k))
            pre = np.array([q[0] - x_st, q[2]])
            record = {
                "step": k, "kind": kind, "t_touchdown": t_global, "ssp_duration": t_global - t0,
                "pre_impact": pre.tolist(), "commanded_step": float(commanded[0]),
                "realized_step": float(foot[0] - x_st), "touchdown_height": float(feet[swing][1]),
            }
            if pre_impact:
                prev = self.log.steps[-1]
                record["w"] = s2s_residual(self.mats, pre_impact[-1], prev["realized_step"], pre).tolist()
            pre_impact.append(pre)
            self.log.steps.append(record)
            self.log.events.append((t_global, "touchdown", k))

            # ---------------- DSP
            lead, trail = swing, stance
            roles = self.roles(kind, "DSP", lead, trail)
            contact = (True, True)
            t0 = t_global
            self.ctrl.reset()

            def control_d(qq, t, kind=kind, roles=roles, t0=t0, k=k):
                ref = self.reference(kind, "DSP", t - t0, roles, k)
                u, res_ = self.control(qq, feet, (True, True), ref)
                last["ref"], last["res"] = ref, res_
                return u

            def rhs_d(qq, t, u):
                return walker_rhs(qq, feet, [0, 1], self.params, u, self.Kc, self.dKc)

            def guard_d(qq, t, trail=trail, t0=t0):
                if t - t0 < 0.2 * self.T_D:
                    return 1.0
                dx, dz = qq[0] - feet[trail][0], qq[1] - feet[trail][1]
                L = math.hypot(dx, dz)
                Ld = (dx * qq[2] + dz * qq[3]) / L
                F = _poly(self.Kc, qq[L0_IDX[trail]]) * (qq[L0_IDX[trail]] - L) + \
                    self.params.damping * (qq[L0D_IDX[trail]] - Ld)
                return F * dz / L

            def on_tick_d(qq, t, u, kind=kind, k=k):
                self.tick_bookkeeping(t, k, kind, "DSP", qq, feet, (True, True), last, u)
                return self.fall_check(qq, feet, [0, 1])

            E0 = mechanical_energy(self.state(q, feet, contact), self.params)
            q[8] = q[9] = 0.0
            res = integrate_phase(rhs_d, q, t_global, guard_d, cfg.dt, cfg.substeps, t_global + 2 * self.T_D,
                                  control=control_d, on_tick=on_tick_d, tol=cfg.event_tol,
                                  min_time=t_global + 0.2 * self.T_D)
            q = res.q
            self.energy_audit("DSP", k, E0, q, feet, contact)
            t_global = res.t
            if res.aborted or res.timeout:
                failure = res.aborted or "liftoff not found (timeout)"
                break
            self.log.steps[-1]["dsp_duration"] = t_global - t0
            self.log.events.append((t_global, "liftoff", k))
            lift_x, lift_z = feet[trail]
            stance = lead
            self.ctrl.reset()

        return SimResult(self.cfg, self.log, self.summarize(pre_impact, failure))

    def tick_bookkeeping(self, t, k, kind, phase, q, feet, contact, last, u):
        ref, res = last["ref"], last["res"]
        if ref is None:
            return
        self.tick_count += 1
        if self.tick_count % self.cfg.log_every == 0:
            self.record(t, k, kind, phase, q, feet, contact, ref, res, u)
        if res is not None and res.ok:
            self.eta_log.append((t, k, kind, float(res.eta[0])))
            for j, (lo, up) in res.tube.items():
                F = res.leg_force[j]
                scale = 1e-6 * (1.0 + abs(F))
                if F < lo - scale or F > up + scale:
                    self.tube_violations += 1

    def energy_audit(self, phase, k, E0, q, feet, contact):
        E1 = mechanical_energy(self.state(q, feet, contact), self.params)
        work = q[8] - q[9]
        self.log.energy.append({"step": k, "phase": phase, "dE": E1 - E0, "work": work,
                                "mismatch": abs(E1 - E0 - work) / max(1.0, abs(E1 - E0), abs(q[8]) + abs(q[9]))})

    def min_before_touchdown(self) -> float:
        """Lowest CoM height during the single support that ends on the downstep.

        For flat runs the same step index is used, so the two are comparable
        phase by phase.
        """
        d = self.cfg.downstep_index
        z = [r["z"] for r in self.log.rows if r["step"] == d and r["phase"] == "SSP"]
        return float(min(z)) if z else math.nan

    def summarize(self, pre_impact, failure) -> dict:
        cfg = self.cfg
        log = self.log
        t = log.column("t") if log.rows else np.zeros(0)
        steps = log.column("step") if log.rows else np.zeros(0)
        grf = (log.column("grf_0") + log.column("grf_1")) if log.rows else np.zeros(0)
        z = log.column("z") if log.rows else np.zeros(0)
        xd = log.column("xd") if log.rows else np.zeros(0)
        d = cfg.downstep_index
        win = (steps >= d) & (steps <= d + 1) if cfg.scenario != "flat" else np.ones_like(steps, dtype=bool)
        deltas = [float(np.linalg.norm(pre_impact[i + 1] - pre_impact[i])) for i in range(len(pre_impact) - 1)]
        eta = np.array([e[3] for e in self.eta_log]) if self.eta_log else np.zeros(0)
        eta_steps = np.array([e[1] for e in self.eta_log]) if self.eta_log else np.zeros(0)
        settle = max(0, cfg.total_steps - 3)
        steady = np.abs(eta[eta_steps >= settle]) if eta.size else np.zeros(0)
        recover = None
        if cfg.scenario != "flat" and len(pre_impact) > d + 1 and d >= 1:
            ref = pre_impact[d - 1]
            for i in range(d + 1, len(pre_impact)):
                if np.linalg.norm(pre_impact[i] - ref) < 0.02:
                    recover = i - d
                    break
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": cfg.scenario,
            "height": cfg.height,
            "fell": failure is not None,
            "failure": failure,
            "steps_completed": len([s for s in log.steps if "dsp_duration" in s]),
            "duration": float(t[-1]) if t.size else 0.0,
            "peak_grf": _extreme(np.max, grf[win]),
            "peak_grf_downstep": _extreme(np.max, grf[steps == d] if cfg.scenario != "flat" else grf),
            "min_com_height": _extreme(np.min, z[win]),
            "min_com_before_touchdown": self.min_before_touchdown(),
            "max_velocity_deviation": _extreme(np.max, np.abs(xd[win] - cfg.v_des)),
            "steps_to_recover": recover,
            "tube_violations": int(self.tube_violations),
            "qp_fallbacks": int(self.fallbacks),
            "pre_impact_deltas": deltas,
            "steady_z_error": float(steady.max()) if steady.size else math.nan,
            "max_energy_mismatch": max((e["mismatch"] for e in log.energy), default=0.0),
            "ssp_durations": [s["ssp_duration"] for s in log.steps],
        }


def _extreme(fn, a) -> float:
    """max/min that gives nan for runs that ended before the window."""
    return float(fn(a)) if a.size else math.nan


def run_scenario(config: ScenarioConfig, surfaces: SurfaceSet | None = None) -> SimResult:
    return _Run(config, surfaces).run()
