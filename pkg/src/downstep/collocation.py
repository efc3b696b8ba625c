"""Fitting aSLIP parameters and rest-length actuation to CoM reference data.

Five phases (half SSP, DSP, SSP, DSP, half SSP) from one vertical-apex
state to the next are transcribed with compressed Hermite-Simpson
collocation.  The decision vector is

    [stiffness coeffs (degree + 1), D, X_0..X_4 (N x 8 each), U_0..U_4 (N x 2 each), T_0..T_4]

where the stiffness and damping block is absent when they are frozen.  The
NLP is solved by an augmented-Lagrangian Gauss-Newton stage followed by an
SLSQP polish; constraint Jacobians are exact to rounding via complex-step
differentiation of the vectorized dynamics.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, least_squares, lsq_linear, minimize

from .aslip import L0_IDX, L0D_IDX, LegParams

NX, NU, NPHASE = 8, 2, 5
MODES = ("SSP", "DSP", "SSP", "DSP", "SSP")
CONTACTS = ((True, False), (True, True), (False, True), (True, True), (True, False))
LEADING = (None, 1, None, 0, None)  # leg that touches down at the start of each DSP
TRAILING = (None, 0, None, 1, None)


class FitError(RuntimeError):
    pass


@dataclass
class PhaseData:
    """Reference samples of one phase on a uniform normalized grid.

    ``feet`` holds both foot anchors (the swing entry is ignored);
    ``x_guess`` optionally seeds the horizontal CoM trajectory.
    """

    z_ref: np.ndarray
    T_ref: float
    feet: np.ndarray
    x_guess: np.ndarray | None = None

    def __post_init__(self):
        self.z_ref = np.asarray(self.z_ref, dtype=float)
        self.feet = np.asarray(self.feet, dtype=float).reshape(2, 2)
        if self.x_guess is not None:
            self.x_guess = np.asarray(self.x_guess, dtype=float)
        if self.T_ref <= 0:
            raise FitError("phase durations must be positive")


@dataclass
class FitProblem:
    phases: list
    mass: float = 70.0
    gravity: float = 9.81
    w: float = 1.0
    z_scale: float = 1e-3  # tracking error unit in the cost (m)
    duration_weight: float = 1.0
    duration_slack: float = 0.3  # hard bounds T in [(1 - s), (1 + s)] T_ref
    degree: int = 2
    frozen: tuple | None = None  # (stiffness_coeffs, damping) kept fixed
    initial_stiffness: tuple = (20000.0, 0.0, 0.0)
    initial_damping: float = 300.0
    length_range: tuple = (0.5, 1.3)
    drop: float = 0.0  # ground height lost between the first and last apex (m)
    stiffness_prior: float = 1.0
    min_damping: float = 50.0  # the force controller needs D > 0
    nominal_length: float = 1.0

    def __post_init__(self):
        if len(self.phases) != NPHASE:
            raise FitError("a fit covers exactly five phases")
        n = {p.z_ref.size for p in self.phases}
        if len(n) != 1:
            raise FitError("all phases must use the same grid size")
        if self.N < 4:
            raise FitError("need at least 4 nodes per phase")
        for p in self.phases:
            if p.x_guess is not None and p.x_guess.size != self.N:
                raise FitError("x_guess must match the grid")
        if not 2 <= self.degree <= 4:
            raise FitError("stiffness degree must be 2..4")
        if self.w < 0 or self.stiffness_prior < 0:
            raise FitError("cost weights must be nonnegative")
        if self.min_damping <= 0 or self.initial_damping < self.min_damping:
            raise FitError("damping floor must be positive and below the initial damping")
        if self.frozen is not None:
            coeffs, D = self.frozen
            self.frozen = (tuple(float(c) for c in coeffs), float(D))

    @property
    def N(self) -> int:
        return self.phases[0].z_ref.size

    @property
    def stride(self) -> float:
        """Horizontal advance of the leg in stance at both ends of the window."""
        return float(self.phases[4].feet[0, 0] - self.phases[0].feet[0, 0])

    @property
    def n_theta(self) -> int:
        return 0 if self.frozen is not None else self.degree + 2


def problem_from_surfaces(surfaces, scenario: str = "flat", height: float = 0.0, N: int = 8,
                          step_length: float = 0.5, **kw) -> FitProblem:
    """Five-phase window of a reference surface set, apex to apex.

    Flat ground uses the nominal step throughout.  For a downstep the window
    runs from the apex of the step onto the edge to the apex after the
    recovery step; the CoM datum moves down by ``height`` over the recovery
    single support, as in the closed-loop simulation.
    """
    if scenario == "flat":
        if height != 0.0:
            raise FitError("flat ground has no height")
        steps = ("nominal", "nominal", "nominal", "nominal", "nominal")
    else:
        steps = ("downstep", "downstep", "recovery", "recovery", "nominal")
    scen = [scenario if st != "nominal" else "flat" for st in steps]
    h = [height if st != "nominal" else 0.0 for st in steps]
    T_full = [surfaces.phase_duration(sc, st, ph, hh) for sc, st, ph, hh in zip(scen, steps, MODES, h)]
    half = 0.5 * surfaces.timings.T_SSP
    windows = [(half, T_full[0]), (0.0, T_full[1]), (0.0, T_full[2]), (0.0, T_full[3]), (0.0, half)]
    u = step_length
    ground = [0.0, -height, -height]
    feet_seq = [np.array([[0.0, ground[0]], [u, ground[1]]]),
                np.array([[2 * u, ground[2]], [u, ground[1]]])]
    feet = [feet_seq[0], feet_seq[0], feet_seq[1], feet_seq[1], feet_seq[1]]
    total = sum(b - a for a, b in windows)
    v = 2 * u / total
    phases, t0 = [], 0.0
    for p, (sc, st, ph, hh, (a, b)) in enumerate(zip(scen, steps, MODES, h, windows)):
        com = surfaces.get("com", sc, st, ph)
        tau = np.linspace(a, b, N)
        z = np.array([com(t, hh)[0] for t in tau])
        if scenario != "flat":
            if p == 2:
                sw = np.clip(tau / (b - a), 0.0, 1.0)
                z = z - height * (10 * sw**3 - 15 * sw**4 + 6 * sw**5)
            elif p > 2:
                z = z - height
        x = v * (t0 + tau - a)
        phases.append(PhaseData(z, b - a, feet[p], x_guess=x))
        t0 += b - a
    return FitProblem(phases, mass=surfaces.mass, gravity=surfaces.gravity, drop=height, **kw)


def layout_size(N: int, degree: int = 2, frozen: bool = False) -> int:
    """Decision vector length for N nodes per phase."""
    return (0 if frozen else degree + 2) + NPHASE * N * (NX + NU) + NPHASE


# -- dynamics (complex-safe, vectorized over nodes) -----------------------------------


def _poly(c, x):
    out = np.zeros_like(x) + c[-1]
    for a in c[-2::-1]:
        out = out * x + a
    return out


def leg_forces(X, coeffs, D, feet, contact):
    """Axial force, unit vector components and vertical GRF per leg, for the contact legs."""
    out = {}
    for j in (0, 1):
        if not contact[j]:
            continue
        dx, dz = X[:, 0] - feet[j, 0], X[:, 1] - feet[j, 1]
        L = np.sqrt(dx * dx + dz * dz)
        Ld = (dx * X[:, 2] + dz * X[:, 3]) / L
        L0, L0d = X[:, L0_IDX[j]], X[:, L0D_IDX[j]]
        F = _poly(coeffs, L0) * (L0 - L) + D * (L0d - Ld)
        out[j] = (F, dx / L, dz / L, F * dz / L)
    return out


def dynamics(X, U, coeffs, D, feet, contact, mass, gravity):
    dX = np.zeros_like(X + 0 * U[:, :1])
    ax = np.zeros_like(dX[:, 0])
    az = ax - gravity
    for F, ux, uz, _ in leg_forces(X, coeffs, D, feet, contact).values():
        ax = ax + F * ux / mass
        az = az + F * uz / mass
    dX[:, 0], dX[:, 1], dX[:, 2], dX[:, 3] = X[:, 2], X[:, 3], ax, az
    dX[:, 4], dX[:, 5], dX[:, 6], dX[:, 7] = X[:, 5], U[:, 0], X[:, 7], U[:, 1]
    return dX


# -- transcription ----------------------------------------------------------------------


@dataclass
class Nlp:
    problem: FitProblem
    n: int
    x0: np.ndarray
    bounds: list
    n_eq: int
    n_in: int
    eq_rows: dict = field(default_factory=dict)  # name -> slice into the equality vector
    scale: np.ndarray | None = None  # typical magnitude of each decision variable
    _colors: list | None = field(default=None, repr=False)
    _pattern: np.ndarray | None = field(default=None, repr=False)
    _cost_jac: np.ndarray | None = field(default=None, repr=False)

    # layout ------------------------------------------------------------------
    def unpack(self, z):
        pb = self.problem
        N = pb.N
        i = 0
        if pb.frozen is None:
            coeffs = z[: pb.degree + 1]
            D = z[pb.degree + 1]
            i = pb.n_theta
        else:
            coeffs = np.array(pb.frozen[0], dtype=float)
            D = pb.frozen[1]
        X = z[i : i + NPHASE * N * NX].reshape(NPHASE, N, NX)
        i += NPHASE * N * NX
        U = z[i : i + NPHASE * N * NU].reshape(NPHASE, N, NU)
        i += NPHASE * N * NU
        T = z[i : i + NPHASE]
        return coeffs, D, X, U, T

    # cost -------------------------------------------------------------------
    def cost_terms(self, z):
        pb = self.problem
        _, _, X, U, T = self.unpack(z)
        track = sum(np.mean(((X[p, :, 1] - ph.z_ref) / pb.z_scale) ** 2) for p, ph in enumerate(pb.phases))
        act = sum(np.sum(U[p] ** 2) for p in range(NPHASE)) / pb.N
        dur = sum(((T[p] - ph.T_ref) / ph.T_ref) ** 2 for p, ph in enumerate(pb.phases))
        return track, act, dur

    def cost_residuals(self, z):
        """Vector r with cost(z) == r @ r; it is affine in z.

        Besides tracking, actuation and duration terms it holds a weak prior
        on the slope and curvature of K at ``nominal_length``.  Walking visits
        a narrow band of rest lengths, and without the prior the polynomial
        coefficients are free to drift wherever the data do not pin them.
        """
        pb = self.problem
        coeffs, _, X, U, T = self.unpack(z)
        z_ref = np.array([ph.z_ref for ph in pb.phases])
        T_ref = np.array([ph.T_ref for ph in pb.phases])
        parts = [
            ((X[:, :, 1] - z_ref) / (pb.z_scale * np.sqrt(pb.N))).ravel(),
            np.sqrt(pb.w / pb.N) * U.ravel(),
            np.sqrt(pb.duration_weight) * (T - T_ref) / T_ref,
        ]
        if pb.frozen is None:
            l0, band, k_unit = pb.nominal_length, 0.1, 1e4
            dk = np.polynomial.polynomial.polyder(coeffs)
            parts.append(np.sqrt(pb.stiffness_prior) * band / k_unit * np.array(
                [_poly(dk, l0), band * _poly(np.polynomial.polynomial.polyder(dk), l0)]))
        return np.concatenate(parts)

    def _cost_jacobian(self):
        if self._cost_jac is None:
            z0 = np.zeros(self.n)
            base = self.cost_residuals(z0)
            J = np.zeros((base.size, self.n))
            for k in range(self.n):
                e = np.zeros(self.n)
                e[k] = 1.0
                J[:, k] = self.cost_residuals(e) - base
            self._cost_jac = J
        return self._cost_jac

    def cost(self, z):
        r = self.cost_residuals(z)
        return float(r @ r)

    def cost_grad(self, z):
        return 2.0 * self._cost_jacobian().T @ self.cost_residuals(z)

    # constraints --------------------------------------------------------------
    def constraints(self, z):
        """(equalities, inequalities) as stacked vectors; complex-safe."""
        pb = self.problem
        coeffs, D, X, U, T = self.unpack(z)
        m, g = pb.mass, pb.gravity
        mg = m * g
        eq, ineq = [], []
        grf = []
        for p, ph in enumerate(pb.phases):
            c = CONTACTS[p]
            f = dynamics(X[p], U[p], coeffs, D, ph.feet, c, m, g)
            h = T[p] / (pb.N - 1)
            xm = 0.5 * (X[p, :-1] + X[p, 1:]) + h / 8 * (f[:-1] - f[1:])
            um = 0.5 * (U[p, :-1] + U[p, 1:])
            fm = dynamics(xm, um, coeffs, D, ph.feet, c, m, g)
            eq.append((X[p, 1:] - X[p, :-1] - h / 6 * (f[:-1] + 4 * fm + f[1:])).ravel())
            forces = leg_forces(X[p], coeffs, D, ph.feet, c)
            grf.append(forces)
            for j, (_, _, _, Fz) in forces.items():
                # nodes where the force is pinned to zero below are left out,
                # a duplicate sign row there would make the constraints dependent
                if j == LEADING[p]:
                    Fz = Fz[1:]
                elif j == TRAILING[p]:
                    Fz = Fz[:-1]
                ineq.append(Fz / mg)
        # continuity: CoM always; legs that stay in contact or in swing;
        # the landing leg's rest-length state is re-initialized at touchdown
        for p in range(NPHASE - 1):
            keep = [0, 1, 2, 3]
            for j in (0, 1):
                if LEADING[p + 1] != j:
                    keep += [L0_IDX[j], L0D_IDX[j]]
            eq.append(X[p + 1, 0, keep] - X[p, -1, keep])
        # apex-to-apex periodicity (shifted by the stride and any ground drop)
        per = X[4, -1] - X[0, 0]
        per = per - np.array([pb.stride, -pb.drop] + [0.0] * (NX - 2))
        eq.append(per)
        # force boundary zeros in double support
        for p in (1, 3):
            eq.append(np.array([grf[p][LEADING[p]][3][0] / mg, grf[p][TRAILING[p]][3][-1] / mg]))
        return np.concatenate(eq), np.concatenate(ineq)

    def jacobians(self, z, step=1e-30):
        """Complex-step Jacobians of (equalities, inequalities).

        Columns that never share a constraint row are perturbed together
        (greedy column coloring of the structural sparsity pattern), so one
        complex evaluation yields several columns.
        """
        if self._colors is None:
            self._colors, self._pattern = self._coloring(z)
        zc = z.astype(complex)
        Je = np.zeros((self.n_eq, self.n))
        Ji = np.zeros((self.n_in, self.n))
        pe, pi = self._pattern[: self.n_eq], self._pattern[self.n_eq :]
        for cols in self._colors:
            zc[cols] += 1j * step
            e, i = self.constraints(zc)
            zc[cols] -= 1j * step
            de, di = e.imag / step, i.imag / step
            for k in cols:
                re, ri = pe[:, k], pi[:, k]
                Je[re, k] = de[re]
                Ji[ri, k] = di[ri]
        return Je, Ji

    def _coloring(self, z):
        rng = np.random.default_rng(0)
        zp = z + 1e-3 * rng.standard_normal(z.size) * (1 + np.abs(z))
        zc = zp.astype(complex)
        pattern = np.zeros((self.n_eq + self.n_in, self.n), dtype=bool)
        for k in range(self.n):
            zc[k] += 1e-30j
            e, i = self.constraints(zc)
            zc[k] -= 1e-30j
            pattern[:, k] = np.concatenate([e.imag, i.imag]) != 0
        colors, used = [], []
        for k in np.argsort(-pattern.sum(axis=0), kind="stable"):
            for c, rows in enumerate(used):
                if not np.any(rows & pattern[:, k]):
                    colors[c].append(int(k))
                    rows |= pattern[:, k]
                    break
            else:
                colors.append([int(k)])
                used.append(pattern[:, k].copy())
        return [np.array(c) for c in colors], pattern


def _static_rest_length(F_axial, L, Ld, L0d, coeffs, D):
    """Rest length whose leg force equals F_axial."""
    def r(l0):
        return np.polynomial.polynomial.polyval(l0, coeffs) * (l0 - L) + D * (L0d - Ld) - F_axial
    return brentq(r, L - 0.3, L + 0.5)


def initial_guess(pb: FitProblem) -> np.ndarray:
    """Reference heights, uniform horizontal motion, static force balance, zero actuation."""
    N = pb.N
    coeffs, D = pb.frozen if pb.frozen is not None else (pb.initial_stiffness[: pb.degree + 1], pb.initial_damping)
    coeffs = np.array(coeffs, dtype=float)
    total_T = sum(ph.T_ref for ph in pb.phases)
    v = pb.stride / total_T
    X = np.zeros((NPHASE, N, NX))
    t0 = 0.0
    x_start = pb.phases[0].feet[0, 0]
    for p, ph in enumerate(pb.phases):
        tau = np.linspace(0, ph.T_ref, N)
        X[p, :, 0] = ph.x_guess if ph.x_guess is not None else x_start + v * (t0 + tau)
        X[p, :, 1] = ph.z_ref
        X[p, :, 2] = np.gradient(X[p, :, 0], tau)
        X[p, :, 3] = np.gradient(ph.z_ref, tau)
        zdd = np.gradient(X[p, :, 3], tau)
        legs = [j for j in (0, 1) if CONTACTS[p][j]]
        for k in range(N):
            Fz_total = pb.mass * (pb.gravity + zdd[k])
            for j in (0, 1):
                dx, dz = X[p, k, 0] - ph.feet[j, 0], X[p, k, 1] - ph.feet[j, 1]
                L = float(np.hypot(dx, dz))
                if j in legs:
                    if len(legs) == 2:
                        s = k / (N - 1)
                        share = s if LEADING[p] == j else 1 - s
                    else:
                        share = 1.0
                    F_ax = max(share * Fz_total, 0.0) / (dz / L)
                    X[p, k, L0_IDX[j]] = _static_rest_length(F_ax, L, 0.0, 0.0, coeffs, D)
                else:
                    X[p, k, L0_IDX[j]] = min(max(L, pb.length_range[0]), pb.length_range[1])
        for j in (0, 1):
            X[p, :, L0D_IDX[j]] = np.gradient(X[p, :, L0_IDX[j]], tau)
        t0 += ph.T_ref
    U = np.zeros((NPHASE, N, NU))
    T = np.array([ph.T_ref for ph in pb.phases])
    theta = [] if pb.frozen is not None else list(coeffs) + [D]
    return np.concatenate([theta, X.ravel(), U.ravel(), T])


def build_nlp(problem: FitProblem) -> Nlp:
    N = problem.N
    n = layout_size(N, problem.degree, problem.frozen is not None)
    x0 = initial_guess(problem)
    if x0.size != n:
        raise FitError("inconsistent layout")
    lo_L, hi_L = problem.length_range
    bounds = []
    if problem.frozen is None:
        bounds += [(None, None)] * (problem.degree + 1) + [(problem.min_damping, None)]
    xb = [(None, None)] * NX
    xb[L0_IDX[0]] = xb[L0_IDX[1]] = (lo_L, hi_L)
    bounds += xb * (NPHASE * N)
    bounds += [(None, None)] * (NPHASE * N * NU)
    s = problem.duration_slack
    bounds += [((1 - s) * ph.T_ref, (1 + s) * ph.T_ref) for ph in problem.phases]
    scale = []
    if problem.frozen is None:
        scale += [1e4] * (problem.degree + 1) + [1e2]
    scale += [1.0] * (NPHASE * N * (NX + NU)) + [0.1] * NPHASE
    nlp = Nlp(problem, n, x0, bounds, 0, 0, scale=np.array(scale))
    e, i = nlp.constraints(x0)
    nlp.n_eq, nlp.n_in = e.size, i.size
    n_def = NPHASE * (N - 1) * NX
    n_cont = 4 * 4 + sum(2 * sum(1 for j in (0, 1) if LEADING[p + 1] != j) for p in range(NPHASE - 1))
    nlp.eq_rows = {
        "defects": slice(0, n_def),
        "continuity": slice(n_def, n_def + n_cont),
        "periodicity": slice(n_def + n_cont, n_def + n_cont + NX),
        "grf_zeros": slice(n_def + n_cont + NX, e.size),
    }
    return nlp


# -- solve ---------------------------------------------------------------------------


@dataclass
class FitResult:
    stiffness_coeffs: tuple
    damping: float
    durations: list
    rest_accel: list  # per phase, N x 2 node values (piecewise linear in time)
    states: list  # per phase, N x 8
    cost: float
    initial_cost: float
    residuals: dict
    success: bool
    message: str
    iterations: int
    elapsed: float = 0.0  # wall time, not serialized so artifacts are reproducible
    cost_history: list = field(default_factory=list)
    kkt: float = float("nan")

    def leg_params(self, base: LegParams | None = None) -> LegParams:
        base = base or LegParams()
        return LegParams(tuple(self.stiffness_coeffs), self.damping, base.mass, base.gravity, base.length_range)

    def to_dict(self) -> dict:
        return {
            "stiffness_coeffs": list(self.stiffness_coeffs),
            "damping": self.damping,
            "durations": list(self.durations),
            "rest_accel": [np.asarray(u).tolist() for u in self.rest_accel],
            "states": [np.asarray(x).tolist() for x in self.states],
            "cost": self.cost,
            "initial_cost": self.initial_cost,
            "residuals": self.residuals,
            "success": self.success,
            "message": self.message,
            "iterations": self.iterations,
            "cost_history": list(self.cost_history),
            "kkt": self.kkt,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        d = dict(d)
        d["stiffness_coeffs"] = tuple(d["stiffness_coeffs"])
        d["rest_accel"] = [np.array(u) for u in d["rest_accel"]]
        d["states"] = [np.array(x) for x in d["states"]]
        return cls(**d)

    @classmethod
    def loads(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


def constraint_residuals(nlp: Nlp, z) -> dict:
    e, i = nlp.constraints(z)
    out = {name: float(np.max(np.abs(e[s]), initial=0.0)) for name, s in nlp.eq_rows.items()}
    out["grf_sign"] = float(max(0.0, -np.min(i, initial=0.0)))
    return out


def kkt_residual(nlp: Nlp, z, active_tol: float = 1e-7) -> float:
    """Stationarity error of the Lagrangian with least-squares multipliers.

    Works in scaled variables.  Active inequalities and bounds enter with
    sign-constrained multipliers; the result is relative to the cost
    gradient norm (or 1 when that is smaller).
    """
    S = nlp.scale
    g = nlp.cost_grad(z) * S
    Je, Ji = nlp.jacobians(z)
    i = nlp.constraints(z)[1]
    act = i < active_tol
    cols = [-(Je * S).T]
    lo_m, hi_m = [-np.inf] * nlp.n_eq, [np.inf] * nlp.n_eq
    # inequalities c(z) >= 0 need multipliers >= 0 in  g - J^T mu = 0
    cols.append((Ji[act] * S).T)
    lo_m += [-np.inf] * int(act.sum())
    hi_m += [0.0] * int(act.sum())
    for k, (lo, hi) in enumerate(nlp.bounds):
        e = np.zeros((nlp.n, 1))
        e[k] = 1.0
        if lo is not None and z[k] - lo < active_tol * max(1.0, abs(lo)):
            cols.append(-e)
            lo_m.append(0.0)
            hi_m.append(np.inf)
        elif hi is not None and hi - z[k] < active_tol * max(1.0, abs(hi)):
            cols.append(e)
            lo_m.append(0.0)
            hi_m.append(np.inf)
    A = np.hstack(cols)
    sol = lsq_linear(A, -g, bounds=(lo_m, hi_m), method="bvls", tol=1e-14)
    r = g + A @ sol.x
    return float(np.max(np.abs(r)) / max(1.0, np.max(np.abs(g))))


def _augmented_lagrangian(nlp: Nlp, z0, rounds: int, rho: float, max_nfev: int, tol: float = 1e-9):
    """Gauss-Newton on the augmented Lagrangian of the fit.

    The cost is a sum of squares, so each round is a bounded nonlinear
    least-squares problem in the cost residuals plus the shifted and scaled
    constraint values.  This moves the parameters far more reliably than SQP
    from a poor start; the multipliers are updated between rounds.
    """
    S = nlp.scale
    lo = np.array([-np.inf if b[0] is None else b[0] for b in nlp.bounds]) / S
    hi = np.array([np.inf if b[1] is None else b[1] for b in nlp.bounds]) / S
    y = np.clip(np.asarray(z0, dtype=float) / S, lo, hi)
    Jc = nlp._cost_jacobian() * S
    lam, mu = np.zeros(nlp.n_eq), np.zeros(nlp.n_in)
    history, last = [], np.inf
    for _ in range(rounds):
        sr = np.sqrt(rho)

        def res(y):
            e, i = nlp.constraints(y * S)
            return np.concatenate([nlp.cost_residuals(y * S), sr * (e + lam / rho), sr * np.minimum(i + mu / rho, 0.0)])

        def jac(y):
            z = y * S
            i = nlp.constraints(z)[1]
            Je, Ji = nlp.jacobians(z)
            active = (i + mu / rho) < 0
            return np.vstack([Jc, sr * Je * S, sr * Ji * S * active[:, None]])

        sol = least_squares(res, y, jac=jac, bounds=(lo, hi), method="trf",
                            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=max_nfev)
        y = sol.x
        e, i = nlp.constraints(y * S)
        lam = lam + rho * e
        mu = np.minimum(mu + rho * i, 0.0)
        history.append(nlp.cost(y * S))
        viol = max(np.max(np.abs(e)), -np.min(i, initial=0.0))
        if viol < tol:
            break
        if viol > 0.25 * last:
            rho *= 10.0
        last = viol
    return y * S, history


def solve_fit(nlp: Nlp, x0=None, max_iter: int = 300, tol: float = 1e-12, feasibility_tol: float = 1e-6, kkt_tol: float = 1e-5,
              rounds: int = 6, rho: float = 1e4) -> FitResult:
    """Fit from the transcription's initial guess (or ``x0``).

    An augmented-Lagrangian Gauss-Newton stage brings the parameters close
    to the optimum; SLSQP then finishes with the constraints enforced exactly.
    The penalty grows tenfold whenever a round fails to cut the constraint
    violation by four.  ``rounds=0`` skips the first stage.
    """
    pb = nlp.problem
    z0 = np.array(nlp.x0 if x0 is None else x0, dtype=float)
    history = [nlp.cost(z0)]
    start = time.perf_counter()
    z1 = z0
    if rounds > 0:
        z1, h = _augmented_lagrangian(nlp, z0, rounds, rho, max_nfev=max(20, max_iter))
        history += h

    cache = {}

    def jac(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = nlp.jacobians(z)
        return cache[key]

    # the solver works on z / scale so stiffness coefficients (1e4 N/m) and
    # states (1 m) have comparable magnitudes
    S = nlp.scale
    bounds = [(None if lo is None else lo / s, None if hi is None else hi / s) for (lo, hi), s in zip(nlp.bounds, S)]
    res = minimize(
        lambda y: nlp.cost(y * S), z1 / S, jac=lambda y: nlp.cost_grad(y * S) * S, method="SLSQP", bounds=bounds,
        constraints=[
            {"type": "eq", "fun": lambda y: nlp.constraints(y * S)[0], "jac": lambda y: jac(y * S)[0] * S},
            {"type": "ineq", "fun": lambda y: nlp.constraints(y * S)[1], "jac": lambda y: jac(y * S)[1] * S},
        ],
        options={"maxiter": max_iter, "ftol": tol},
        callback=lambda y: history.append(nlp.cost(y * S)),
    )
    elapsed = time.perf_counter() - start
    z = res.x * S
    # keep the first-stage point if the polish wandered off
    if max(constraint_residuals(nlp, z).values()) > max(constraint_residuals(nlp, z1).values()):
        z = z1
    resid = constraint_residuals(nlp, z)
    feasible = max(resid.values()) < feasibility_tol
    kkt = kkt_residual(nlp, z)
    if not feasible:
        message = f"constraint residual above {feasibility_tol}"
    elif kkt >= kkt_tol:
        message = f"stationarity residual {kkt:.2e} above {kkt_tol}"
    else:
        message = f"converged; polish: {res.message}"
    coeffs, D, X, U, T = nlp.unpack(z)
    if pb.frozen is not None:
        coeffs, D = pb.frozen
    return FitResult(
        stiffness_coeffs=tuple(float(c) for c in coeffs),
        damping=float(D),
        durations=[float(t) for t in T],
        rest_accel=[U[p].copy() for p in range(NPHASE)],
        states=[X[p].copy() for p in range(NPHASE)],
        cost=float(nlp.cost(z)),
        initial_cost=float(history[0]),
        residuals=resid,
        success=bool(feasible and kkt < kkt_tol),
        message=message,
        kkt=kkt,
        iterations=int(res.nit),
        elapsed=elapsed,
        cost_history=[float(c) for c in history],
    )
