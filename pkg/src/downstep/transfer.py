"""Scaling human gait references to a robot of different size and mass.

Time scales with the square root of the averaged leg length ratio (the
swing behaves like a passive pendulum), CoM height and leg length keep
their fractional deviation about the averaged leg length, and forces scale
with the mass ratio.  With these ratios vertical accelerations are
unchanged, so scaled CoM and GRF surfaces stay consistent with each other.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .profiles import GaitTimings, SurfaceError, SurfaceSet, check_surface_set


@dataclass(frozen=True)
class MorphologyParams:
    human_avg_length: float = 1.0  # averaged leg length (m)
    human_leg_length: float = 1.0  # leg length normalizing the CoM displacement (m)
    human_mass: float = 70.0
    roll_fraction: float = 0.15  # CoM displacement during foot roll, fraction of step length
    robot_avg_length: float = 0.85
    robot_mass: float = 33.0
    gravity: float = 9.81

    def __post_init__(self):
        for name in ("human_avg_length", "human_leg_length", "human_mass", "robot_avg_length", "robot_mass", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.roll_fraction < 1.0:
            raise ValueError("roll_fraction must be in [0, 1)")

    @classmethod
    def identity(cls, length: float = 1.0, mass: float = 70.0) -> "MorphologyParams":
        return cls(length, 1.0, mass, 0.0, length, mass)

    @property
    def length_ratio(self) -> float:
        return self.robot_avg_length / self.human_avg_length

    @property
    def time_ratio(self) -> float:
        return float(np.sqrt(self.length_ratio))

    @property
    def mass_ratio(self) -> float:
        return self.robot_mass / self.human_mass

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MorphologyParams":
        return cls(**d)


def scale_step_time(T_human: float, morph: MorphologyParams) -> float:
    return T_human * morph.time_ratio


def scale_com_displacement(x_human, morph: MorphologyParams, dsp_duration: float | None = None,
                           roll_duration: float | None = None):
    """Horizontal CoM displacement without the foot-roll share.

    Returns the scaled samples, and when ``dsp_duration`` is given also the
    robot double-support time: the roll time is removed and the rest is
    scaled like a step time.
    """
    x = (1.0 - morph.roll_fraction) / morph.human_leg_length * np.asarray(x_human, dtype=float)
    if dsp_duration is None:
        return x
    if roll_duration is None:
        raise ValueError("double support segment has no roll annotation")
    if not 0.0 <= roll_duration <= dsp_duration:
        raise ValueError("roll duration must lie within the double support")
    return x, scale_step_time(dsp_duration - roll_duration, morph)


def scale_leg_length_profile(L_human, morph: MorphologyParams):
    L = np.asarray(L_human, dtype=float)
    out = morph.robot_avg_length + (L - morph.human_avg_length) / morph.human_avg_length * morph.robot_avg_length
    if np.any(out <= 0):
        raise ValueError("scaled leg length is not positive")
    return out


def nominal_velocity(x, T: float) -> float:
    """Average forward speed over one step of duration T."""
    if not T > 0:
        raise ValueError("step duration must be positive")
    x = np.asarray(x, dtype=float)
    return float((x[-1] - x[0]) / T)


def scale_grf(F_human, morph: MorphologyParams):
    return morph.mass_ratio * np.asarray(F_human, dtype=float)


def _closure_problems(ss: SurfaceSet, tol: float = 1e-9) -> list[str]:
    """Flat CoM surfaces must join SSP -> DSP -> SSP in value and slope."""
    ssp = ss.get("com", "flat", "nominal", "SSP")
    dsp = ss.get("com", "flat", "nominal", "DSP")
    problems = []
    for a, b, name in ((ssp, dsp, "SSP to DSP"), (dsp, ssp, "DSP to SSP")):
        end, start = a.evaluate(a.duration, 0.0), b.evaluate(0.0, 0.0)
        if abs(end.value - start.value) > tol or abs(end.dt - start.dt) > tol * (1 + abs(end.dt)):
            problems.append(f"periodic closure {name}")
    return problems


def transfer_surfaces(ss: SurfaceSet, morph: MorphologyParams, validate: bool = True) -> SurfaceSet:
    """Apply the morphology scaling to every surface of a set.

    Surfaces carry heights and forces only, so the roll removal (which acts
    on horizontal displacement) does not enter; every phase is time-scaled
    by the same ratio.  The result is re-validated and any failed check is
    named in the raised SurfaceError.
    """
    r, k, mr = morph.time_ratio, morph.length_ratio, morph.mass_ratio
    t = ss.timings
    timings = GaitTimings(t.T_SSP * r, t.T_DSP * r, tuple((a, b, c, T * r) for a, b, c, T in t.overrides))
    meta = dict(ss.metadata)
    meta["morphology"] = morph.to_dict()
    out = SurfaceSet({}, timings, morph.robot_mass, ss.gravity, ss.foot_descent_speed * k / r, meta)
    for s in ss:
        if s.kind == "com":
            out.add(s.affine(k, r, about=morph.human_avg_length, new_about=morph.robot_avg_length))
        else:
            out.add(s.affine(mr, r))
    if validate:
        problems = _closure_problems(out)
        try:
            check_surface_set(out)
        except SurfaceError as e:
            problems.insert(0, str(e))
        if problems:
            raise SurfaceError("; ".join(problems))
    return out
