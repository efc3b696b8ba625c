"""Reference surfaces over phase time and downstep height.

A :class:`ReferenceSurface` stores, for every height knot, a piecewise
polynomial in phase time (degree <= 5 per piece).  Between height knots the
surface is blended with cubic Hermite weights using the exact height slope
stored at each knot, which keeps the surface C1 in height.

The shipped surfaces are synthetic stand-ins for human measurements:

* the flat-ground CoM profile is a quintic Hermite fit of a cosine that peaks
  at mid single support (the VLO instant),
* planned downsteps lower the CoM during the single support before impact,
* unplanned downsteps follow the flat profile until the nominal touchdown,
  then drop along a reduced-support extension until the foot finds the
  ground, and catch the fall during double support,
* vertical GRF references are derived from the CoM acceleration,
  ``m (g + z''_d)``, and shared linearly between the legs in double support.

Leg roles: ``"other"`` is the stance leg of the downstep single support,
``"downstep"`` the leg that lands on the lowered platform.  On flat ground
the same names are reused: ``"other"`` is the single-support stance leg and
``"downstep"`` the leg that lands at the end of it.
"""
from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

HEIGHT_KNOTS = (0.0, 0.025, 0.05, 0.075, 0.10)
SCENARIOS = ("flat", "planned", "unplanned")
STEPS = ("nominal", "downstep", "recovery")
SCHEMA_VERSION = 1


class SurfaceError(ValueError):
    pass


class SurfaceValue(NamedTuple):
    value: float
    dt: float
    dtt: float
    dttt: float
    dh: float
    clamped: bool


def quintic_hermite(s0, s1, T: float) -> np.ndarray:
    """Ascending coefficients of the quintic matching (p, v, a) at 0 and T."""
    p0, v0, a0 = s0
    p1, v1, a1 = s1
    T2, T3 = T * T, T**3
    return np.array(
        [
            p0,
            v0,
            0.5 * a0,
            (20 * (p1 - p0) - (8 * v1 + 12 * v0) * T - (3 * a0 - a1) * T2) / (2 * T3),
            (30 * (p0 - p1) + (14 * v1 + 16 * v0) * T + (3 * a0 - 2 * a1) * T2) / (2 * T3 * T),
            (12 * (p1 - p0) - 6 * (v1 + v0) * T - (a0 - a1) * T2) / (2 * T3 * T2),
        ]
    )


def _pad6(c) -> np.ndarray:
    out = np.zeros(6)
    c = np.asarray(c, dtype=float)
    if c.size > 6:
        if np.any(np.abs(c[6:]) > 1e-9 * (1 + np.abs(c).max())):
            raise SurfaceError("polynomial degree exceeds 5")
        c = c[:6]
    out[: c.size] = c
    return out


_FALLING = np.array([[math.perm(j, k) for j in range(6)] for k in range(4)], dtype=float)


# row k of the derivative matrix: _FALLING[k, j] tau^(j - k) for j >= k, zero below
_SHIFT = np.clip(np.arange(6)[None, :] - np.arange(4)[:, None], 0, 5)
_DER = _FALLING * (np.arange(6)[None, :] >= np.arange(4)[:, None])
_POW = np.arange(6.0)


def _polyder_all(c: np.ndarray, tau: float) -> np.ndarray:
    """Value and first three derivatives of an ascending polynomial at tau."""
    c = np.asarray(c, dtype=float)
    if c.size != 6:
        c = _pad6(c)
    return (_DER * (tau ** _POW)[_SHIFT]) @ c


@dataclass(frozen=True)
class ReferenceSurface:
    kind: str  # "com" or "grf"
    scenario: str
    step: str
    phase: str  # "SSP" or "DSP"
    leg: str | None
    knots: np.ndarray  # (K,)
    breaks: np.ndarray  # (P + 1,)
    coeffs: np.ndarray  # (K, P, 6)
    dcoeffs_dh: np.ndarray  # (K, P, 6)

    def __post_init__(self):
        for name in ("knots", "breaks", "coeffs", "dcoeffs_dh"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        K, P = self.knots.size, self.breaks.size - 1
        if self.coeffs.shape != (K, P, 6) or self.dcoeffs_dh.shape != (K, P, 6):
            raise SurfaceError("coefficient grid shape mismatch")
        if np.any(np.diff(self.knots) <= 0) or np.any(np.diff(self.breaks) <= 0):
            raise SurfaceError("knots and breaks must be increasing")
        if self.kind not in ("com", "grf"):
            raise SurfaceError(f"unknown kind {self.kind!r}")
        # plain lists for fast scalar lookup in evaluate
        object.__setattr__(self, "_breaks", self.breaks.tolist())
        object.__setattr__(self, "_knots", self.knots.tolist())

    @property
    def duration(self) -> float:
        return float(self.breaks[-1])

    @property
    def key(self) -> tuple:
        return (self.kind, self.scenario, self.step, self.phase, self.leg)

    def evaluate(self, t: float, h: float) -> SurfaceValue:
        if not (math.isfinite(t) and math.isfinite(h)):
            raise SurfaceError("NaN query")
        clamped = False
        br, kn = self._breaks, self._knots
        if t < br[0] or t > br[-1]:
            t, clamped = min(max(t, br[0]), br[-1]), True
        if h < kn[0] or h > kn[-1]:
            h, clamped = min(max(h, kn[0]), kn[-1]), True
        i = min(max(bisect.bisect_right(br, t) - 1, 0), len(br) - 2)
        tau = t - br[i]
        M = _DER * (tau ** _POW)[_SHIFT]
        K = len(kn)
        if K == 1:
            d = (M @ self.coeffs[0, i]).tolist()
            return SurfaceValue(d[0], d[1], d[2], d[3], 0.0, clamped)
        k = min(max(bisect.bisect_right(kn, h) - 1, 0), K - 2)
        dh = kn[k + 1] - kn[k]
        s = (h - kn[k]) / dh
        m0, m1 = (M @ self.dcoeffs_dh[k:k + 2, i].T * dh).T
        y0, y1 = (M @ self.coeffs[k:k + 2, i].T).T
        h00, h10 = 2 * s**3 - 3 * s**2 + 1, s**3 - 2 * s**2 + s
        h01, h11 = -2 * s**3 + 3 * s**2, s**3 - s**2
        val = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1
        d00, d10 = 6 * s**2 - 6 * s, 3 * s**2 - 4 * s + 1
        d01, d11 = -6 * s**2 + 6 * s, 3 * s**2 - 2 * s
        dval_dh = (d00 * y0[0] + d10 * m0[0] + d01 * y1[0] + d11 * m1[0]) / dh
        return SurfaceValue(float(val[0]), float(val[1]), float(val[2]), float(val[3]), float(dval_dh), clamped)

    def __call__(self, t: float, h: float) -> tuple[float, float, float]:
        v = self.evaluate(t, h)
        return v.value, v.dt, v.dtt

    def affine(self, value_scale: float = 1.0, time_scale: float = 1.0, about: float = 0.0,
               new_about: float | None = None) -> "ReferenceSurface":
        """new(t) = new_about + value_scale * (old(t / time_scale) - about)."""
        new_about = about if new_about is None else new_about
        powers = float(time_scale) ** -np.arange(6.0)
        c = self.coeffs * powers * value_scale
        dc = self.dcoeffs_dh * powers * value_scale
        c[..., 0] += new_about - value_scale * about
        return ReferenceSurface(self.kind, self.scenario, self.step, self.phase, self.leg,
                                self.knots, self.breaks * time_scale, c, dc)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scenario": self.scenario,
            "step": self.step,
            "phase": self.phase,
            "leg": self.leg,
            "knot_heights": self.knots.tolist(),
            "breaks": self.breaks.tolist(),
            "coefficients": self.coeffs.tolist(),
            "height_slopes": self.dcoeffs_dh.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceSurface":
        return cls(d["kind"], d["scenario"], d["step"], d["phase"], d["leg"],
                   d["knot_heights"], d["breaks"], d["coefficients"], d["height_slopes"])


@dataclass(frozen=True)
class GaitTimings:
    T_SSP: float = 0.4
    T_DSP: float = 0.1
    overrides: tuple[tuple[str, str, str, float], ...] = ()  # (scenario, step, phase, duration)

    def __post_init__(self):
        if self.T_SSP <= 0 or self.T_DSP < 0:
            raise ValueError("require T_SSP > 0 and T_DSP >= 0")

    def duration(self, scenario: str, step: str, phase: str) -> float:
        for sc, st, ph, T in self.overrides:
            if (sc, st, ph) == (scenario, step, phase):
                return T
        return self.T_SSP if phase == "SSP" else self.T_DSP


@dataclass(frozen=True)
class FlatProfile:
    """Periodic flat-ground CoM profile (cosine shape, VLO at mid single support)."""

    z_vlo: float = 1.0
    amplitude: float = 0.02
    T_SSP: float = 0.4
    T_DSP: float = 0.1
    mass: float = 70.0
    gravity: float = 9.81

    @property
    def period(self) -> float:
        return self.T_SSP + self.T_DSP

    def _cosine(self, t: float) -> np.ndarray:
        w = 2 * math.pi / self.period
        psi = w * (t - 0.5 * self.T_SSP)
        A = self.amplitude
        return np.array([self.z_vlo - A + A * math.cos(psi), -A * w * math.sin(psi), -A * w * w * math.cos(psi)])

    def keyframe(self, t: float) -> np.ndarray:
        """Phase-boundary keyframe (z, zdot, zddot) at time t from liftoff.

        The cosine is shifted so that the single-support quintic through the
        liftoff and touchdown keyframes peaks exactly at ``z_vlo``.
        """
        lo, td = self._cosine(0.0), self._cosine(self.T_SSP)
        mid = np.polynomial.polynomial.polyval(0.5 * self.T_SSP, quintic_hermite(lo, td, self.T_SSP))
        return self._cosine(t) + np.array([self.z_vlo - mid, 0.0, 0.0])

    @property
    def liftoff(self) -> np.ndarray:
        return self.keyframe(0.0)

    @property
    def touchdown(self) -> np.ndarray:
        return self.keyframe(self.T_SSP)


@dataclass(frozen=True)
class DownstepShape:
    """Qualitative shape parameters, per metre of downstep height.

    ``planned_lowering`` holds control points (fraction of the two-step
    window, CoM lowering) of the planned deviation from the flat profile; a
    quintic spline with zero slope and curvature at both ends passes through
    them.  Unplanned keyframes are CoM deviations (position, velocity,
    acceleration) from the flat profile at the recovery-step boundaries.
    """

    planned_lowering: tuple[tuple[float, float], ...] = (
        (0.0, 0.0), (0.2, 0.25), (0.4, 0.6), (0.5, 0.7), (0.7, 0.55), (0.9, 0.1), (1.0, 0.0))
    unplanned_liftoff: tuple[float, float, float] = (-1.1, -1.0, 5.0)
    unplanned_recovery_touchdown: tuple[float, float, float] = (-0.1, 0.4, 1.0)
    # unplanned: swing-foot descent speed after the missed touchdown, and the
    # CoM acceleration reached at the end of the longest extension
    foot_descent_speed: float = 0.5
    extension_accel: float = -4.0
    extension_blend: float = 0.04
    min_grf_fraction: float = 0.0
    # unplanned DSP: bias of the load hand-over toward the landing leg at the
    # deepest knot (0 = linear hand-over, 1 = leading share 2s - s^2)
    unplanned_lead_bias: float = 1.0

    def __post_init__(self):
        if self.foot_descent_speed <= 0:
            raise SurfaceError("foot descent speed must be positive")
        if self.min_grf_fraction < 0:
            raise SurfaceError("requested GRF bound must be nonnegative")
        if not 0.0 <= self.unplanned_lead_bias <= 1.0:
            raise SurfaceError("hand-over bias must lie in [0, 1] to keep both legs loaded")
        if self.extension_accel < -9.81:
            raise SurfaceError("extension acceleration below free fall")
        ts = [p[0] for p in self.planned_lowering]
        if ts[0] != 0.0 or ts[-1] != 1.0 or np.any(np.diff(ts) <= 0):
            raise SurfaceError("planned control points must span [0, 1] increasingly")

    def extension_time(self, h: float) -> float:
        return h / self.foot_descent_speed

    def planned_deviation(self, period: float):
        """Callable t -> (d, d', d'') per metre of height over two steps of ``period``."""
        from scipy.interpolate import make_interp_spline

        pts = np.asarray(self.planned_lowering, dtype=float)
        spl = make_interp_spline(pts[:, 0] * 2 * period, -pts[:, 1], k=5,
                                 bc_type=([(1, 0.0), (2, 0.0)], [(1, 0.0), (2, 0.0)]))
        return lambda t: np.array([spl(t), spl(t, 1), spl(t, 2)])


@dataclass
class SurfaceSet:
    surfaces: dict = field(default_factory=dict)
    timings: GaitTimings = field(default_factory=GaitTimings)
    mass: float = 70.0
    gravity: float = 9.81
    foot_descent_speed: float = 0.5
    metadata: dict = field(default_factory=dict)

    def add(self, s: ReferenceSurface):
        self.surfaces[s.key] = s

    def get(self, kind, scenario, step, phase, leg=None) -> ReferenceSurface:
        if scenario == "flat" or step == "nominal":
            scenario, step = "flat", "nominal"
        try:
            return self.surfaces[(kind, scenario, step, phase, leg)]
        except KeyError:
            raise SurfaceError(f"no surface {(kind, scenario, step, phase, leg)}") from None

    def __iter__(self):
        return iter(self.surfaces.values())

    def __len__(self):
        return len(self.surfaces)

    def phase_duration(self, scenario: str, step: str, phase: str, h: float = 0.0) -> float:
        if scenario == "flat":
            step = "nominal"
        T = self.timings.duration(scenario, step, phase)
        if scenario == "unplanned" and step == "downstep" and phase == "SSP":
            T += h / self.foot_descent_speed
        return T

    def to_dict(self) -> dict:
        t = self.timings
        return {
            "schema_version": SCHEMA_VERSION,
            "mass": self.mass,
            "gravity": self.gravity,
            "foot_descent_speed": self.foot_descent_speed,
            "timings": {"T_SSP": t.T_SSP, "T_DSP": t.T_DSP, "overrides": [list(o) for o in t.overrides]},
            "metadata": self.metadata,
            "surfaces": [s.to_dict() for s in self.surfaces.values()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurfaceSet":
        t = d["timings"]
        timings = GaitTimings(t["T_SSP"], t["T_DSP"], tuple(tuple(o) for o in t["overrides"]))
        out = cls({}, timings, d["mass"], d["gravity"], d["foot_descent_speed"], dict(d.get("metadata", {})))
        for s in d["surfaces"]:
            out.add(ReferenceSurface.from_dict(s))
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "SurfaceSet":
        return cls.from_dict(json.loads(text))


# -- construction -------------------------------------------------------------


class _Segment(NamedTuple):
    start: np.ndarray  # (p, v, a) keyframe
    end: np.ndarray
    dstart: np.ndarray  # derivative of keyframe w.r.t. h
    dend: np.ndarray


def _build_pieces(segments_by_knot, durations) -> tuple[np.ndarray, np.ndarray]:
    """Quintic coefficients (and height slopes) for each knot and piece."""
    K = len(segments_by_knot)
    P = len(durations)
    c = np.zeros((K, P, 6))
    dc = np.zeros((K, P, 6))
    for k, segs in enumerate(segments_by_knot):
        for i, (seg, T) in enumerate(zip(segs, durations)):
            if isinstance(seg, tuple) and len(seg) == 2 and isinstance(seg[0], np.ndarray) and seg[0].size == 6:
                c[k, i], dc[k, i] = seg  # explicit polynomial
                continue
            c[k, i] = quintic_hermite(seg.start, seg.end, T)
            dc[k, i] = quintic_hermite(seg.dstart, seg.dend, T)
    return c, dc


def _com_and_grf(durations, segments_by_knot, mass, g, dsp: bool, lead_bias=None):
    """Returns the CoM surface coefficient grid and the GRF grids per leg.

    In DSP the leading leg takes total * r(s) with s = t / T and
    r(s) = s + beta s (1 - s); ``lead_bias`` gives (beta, dbeta/dh) per knot
    (beta = 0 is the linear hand-over).
    """
    c, dc = _build_pieces(segments_by_knot, durations)
    P = np.polynomial.polynomial
    K, NP = c.shape[:2]
    total = np.zeros_like(c)
    dtotal = np.zeros_like(c)
    for k in range(K):
        for i in range(NP):
            acc = P.polyder(c[k, i], 2)
            dacc = P.polyder(dc[k, i], 2)
            total[k, i] = _pad6(np.concatenate([[g + acc[0]], acc[1:]]) * mass)
            dtotal[k, i] = _pad6(dacc * mass)
    if not dsp:
        return c, dc, {"stance": (total, dtotal)}
    if NP != 1:
        raise SurfaceError("double-support surfaces are single-piece")
    T = durations[0]
    lead = np.zeros_like(c)
    dlead = np.zeros_like(c)
    bias = lead_bias if lead_bias is not None else [(0.0, 0.0)] * K
    for k in range(K):
        beta, dbeta = bias[k]
        ramp = np.array([0.0, (1.0 + beta) / T, -beta / T**2])
        dramp = dbeta * np.array([0.0, 1.0 / T, -1.0 / T**2])
        for i in range(NP):
            lead[k, i] = _pad6(P.polymul(total[k, i], ramp))
            dlead[k, i] = _pad6(P.polyadd(P.polymul(dtotal[k, i], ramp), P.polymul(total[k, i], dramp)))
    return c, dc, {"leading": (lead, dlead), "trailing": (total - lead, dtotal - dlead)}


def build_synthetic_surfaces(
    base: FlatProfile | None = None,
    shape: DownstepShape | None = None,
    knots=HEIGHT_KNOTS,
    validate: bool = True,
) -> SurfaceSet:
    """Flat-ground, planned and unplanned CoM and GRF surfaces."""
    base = base or FlatProfile()
    shape = shape or DownstepShape()
    knots = np.asarray(knots, dtype=float)
    m, g = base.mass, base.gravity
    TS, TD = base.T_SSP, base.T_DSP
    FLO, FTD = base.liftoff, base.touchdown
    if np.max(np.abs(base.keyframe(base.period) - FLO)) > 1e-12:
        raise SurfaceError("flat profile is not periodic")
    timings = GaitTimings(TS, TD)
    out = SurfaceSet({}, timings, m, g, shape.foot_descent_speed,
                     {"z_vlo": base.z_vlo, "amplitude": base.amplitude, "synthetic": True})
    zero = np.zeros(3)

    def emit(scenario, step, phase, durations, segs_by_knot, roles, lead_bias=None):
        breaks = np.concatenate([[0.0], np.cumsum(durations)])
        c, dc, grfs = _com_and_grf(durations, segs_by_knot, m, g, phase == "DSP", lead_bias)
        out.add(ReferenceSurface("com", scenario, step, phase, None, knots, breaks, c, dc))
        for role, (gc, gdc) in grfs.items():
            out.add(ReferenceSurface("grf", scenario, step, phase, roles[role], knots, breaks, gc, gdc))

    def flat_seg(a, b):
        return _Segment(a, b, zero, zero)

    K = knots.size
    emit("flat", "nominal", "SSP", [TS], [[flat_seg(FLO, FTD)]] * K, {"stance": "other"})
    emit("flat", "nominal", "DSP", [TD], [[flat_seg(FTD, FLO)]] * K,
         {"leading": "downstep", "trailing": "other"})

    def lin(base_kf, per_h, h):
        return _Segment(base_kf + h * np.asarray(per_h), None, np.asarray(per_h, dtype=float), None)

    def seg(a: _Segment, b: _Segment):
        return _Segment(a.start, b.start, a.dstart, b.dstart)

    # planned: deviations linear in h at every boundary
    dev = shape.planned_deviation(base.period)
    B0 = [lin(FLO, zero, h) for h in knots]
    B1 = [lin(FTD, dev(TS), h) for h in knots]
    B2 = [lin(FLO, dev(TS + TD), h) for h in knots]
    B3 = [lin(FTD, dev(2 * TS + TD), h) for h in knots]
    emit("planned", "downstep", "SSP", [TS], [[seg(a, b)] for a, b in zip(B0, B1)], {"stance": "other"})
    emit("planned", "downstep", "DSP", [TD], [[seg(a, b)] for a, b in zip(B1, B2)],
         {"leading": "downstep", "trailing": "other"})
    emit("planned", "recovery", "SSP", [TS], [[seg(a, b)] for a, b in zip(B2, B3)], {"stance": "downstep"})
    emit("planned", "recovery", "DSP", [TD], [[seg(a, b)] for a, b in zip(B3, B0)],
         {"leading": "other", "trailing": "downstep"})

    # unplanned: flat until nominal touchdown, then a reduced-support
    # extension whose acceleration blends (jerk continuous) into a constant
    # drop acceleration
    ssp_first = quintic_hermite(FLO, FTD, TS)
    tau_e = shape.extension_blend
    tau_max = shape.extension_time(knots[-1])
    if tau_max <= tau_e:
        raise SurfaceError("extension blend longer than the longest extension")
    j0 = _polyder_all(ssp_first, TS)[3]
    M = np.array([[12 * tau_e**2, 20 * tau_e**3], [24 * tau_e, 60 * tau_e**2]])
    rhs = np.array([shape.extension_accel - FTD[2] - j0 * tau_e, -j0])
    c45 = np.linalg.solve(M, rhs)
    blend = np.array([FTD[0], FTD[1], 0.5 * FTD[2], j0 / 6.0, c45[0], c45[1]])
    e = _polyder_all(blend, tau_e)
    drop = np.array([e[0], e[1], 0.5 * shape.extension_accel, 0.0, 0.0, 0.0])

    def ext_state(tau):
        d = _polyder_all(blend, tau) if tau <= tau_e else _polyder_all(drop, tau - tau_e)
        return d[:3], d[1:4] / shape.foot_descent_speed

    z6 = np.zeros(6)
    segs = [[(ssp_first, z6), (blend, z6), (drop, z6)] for _ in knots]
    emit("unplanned", "downstep", "SSP", [TS, tau_e, tau_max - tau_e], segs, {"stance": "other"})
    B1u = []
    for h in knots:
        s, ds = ext_state(shape.extension_time(h))
        B1u.append(_Segment(s, None, ds, None))
    B2u = [lin(FLO, shape.unplanned_liftoff, h) for h in knots]
    B3 = [lin(FTD, shape.unplanned_recovery_touchdown, h) for h in knots]
    # the landing leg absorbs the impact
    slope = shape.unplanned_lead_bias / knots[-1]
    emit("unplanned", "downstep", "DSP", [TD], [[seg(a, b)] for a, b in zip(B1u, B2u)],
         {"leading": "downstep", "trailing": "other"}, [(slope * h, slope) for h in knots])
    emit("unplanned", "recovery", "SSP", [TS], [[seg(a, b)] for a, b in zip(B2u, B3)], {"stance": "downstep"})
    emit("unplanned", "recovery", "DSP", [TD], [[seg(a, b)] for a, b in zip(B3, B0)],
         {"leading": "other", "trailing": "downstep"})

    if validate:
        check_surface_set(out, min_grf=shape.min_grf_fraction * m * g)
    return out


# -- validation -----------------------------------------------------------------


def sample_grid(surface: ReferenceSurface, nt: int = 200, nh: int = 20):
    ts = np.linspace(0.0, surface.duration, nt)
    hs = np.linspace(surface.knots[0], surface.knots[-1], nh)
    vals = np.array([[surface.evaluate(t, h).value for h in hs] for t in ts])
    return ts, hs, vals


def check_surface(surface: ReferenceSurface, flat: ReferenceSurface | None = None, min_grf: float = 0.0,
                  tol: float = 1e-5) -> list[str]:
    """Names of violated invariants (empty list when the surface is valid)."""
    problems = []
    # C1 in time across piece breaks and in height across knots
    for b in surface.breaks[1:-1]:
        for h in np.linspace(surface.knots[0], surface.knots[-1], 7):
            lo = surface.evaluate(b - 1e-12, h)
            hi = surface.evaluate(b + 1e-12, h)
            scale = 1.0 + abs(lo.value) + abs(lo.dt)
            if abs(lo.value - hi.value) > tol * scale or abs(lo.dt - hi.dt) > tol * scale:
                problems.append(f"C1 in time at t={b}")
                break
    for k in surface.knots[1:-1]:
        for t in np.linspace(0, surface.duration, 9):
            # one-sided slopes extrapolated to the knot to cancel curvature
            lo = 2 * surface.evaluate(t, k - 1e-7).dh - surface.evaluate(t, k - 2e-7).dh
            hi = 2 * surface.evaluate(t, k + 1e-7).dh - surface.evaluate(t, k + 2e-7).dh
            if abs(lo - hi) > tol * (1.0 + abs(lo)):
                problems.append(f"C1 in height at h={k}")
                break
    if flat is not None:
        ts = np.linspace(0, min(flat.duration, surface.duration), 25)
        if any(abs(surface.evaluate(t, 0.0).value - flat.evaluate(t, 0.0).value) > 1e-9 * (1 + abs(flat.evaluate(t, 0.0).value))
               for t in ts):
            problems.append("h=0 reduction")
    if surface.kind == "grf":
        _, _, vals = sample_grid(surface, 60, 9)
        if vals.min() < min_grf - 1e-9 * (1 + np.abs(vals).max()):
            problems.append("GRF nonnegativity")
        if surface.phase == "DSP":
            T = surface.duration
            role_zero = None
            if surface.step == "nominal" or surface.step in ("downstep", "recovery"):
                # leading leg starts at zero, trailing leg ends at zero
                lead = (surface.step == "nominal" and surface.leg == "downstep") or \
                       (surface.step == "downstep" and surface.leg == "downstep") or \
                       (surface.step == "recovery" and surface.leg == "other")
                role_zero = 0.0 if lead else T
            for h in surface.knots:
                if abs(surface.evaluate(role_zero, h).value) > 1e-8:
                    problems.append("GRF boundary zero")
                    break
    return problems


def check_surface_set(ss: SurfaceSet, min_grf: float = 0.0):
    errors = []
    for s in ss:
        flat = None
        if s.step != "nominal":
            leg = s.leg
            if s.step == "recovery":
                leg = None if s.leg is None else ("downstep" if s.leg == "other" else "other")
            try:
                flat = ss.get(s.kind, "flat", "nominal", s.phase, leg)
            except SurfaceError:
                flat = None
        for p in check_surface(s, flat, min_grf):
            errors.append(f"{s.key}: {p}")
    if errors:
        raise SurfaceError("; ".join(errors))
