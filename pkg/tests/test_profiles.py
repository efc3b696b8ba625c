import json

import numpy as np
import pytest

from downstep.profiles import (
    DownstepShape,
    FlatProfile,
    ReferenceSurface,
    SurfaceError,
    SurfaceSet,
    build_synthetic_surfaces,
    check_surface_set,
    sample_grid,
)


@pytest.fixture(scope="module")
def surfaces():
    return build_synthetic_surfaces()


def flat_counterpart(ss, s):
    leg = s.leg
    if s.step == "recovery" and leg is not None:
        leg = "downstep" if leg == "other" else "other"
    return ss.get(s.kind, "flat", "nominal", s.phase, leg)


def test_built_set_passes_invariants(surfaces):
    check_surface_set(surfaces)
    kinds = {(s.scenario, s.step, s.phase) for s in surfaces}
    assert len(kinds) == 2 + 2 * 4


def one_sided_slopes(f, x, eps=1e-6):
    """Second-order one-sided difference quotients (left, right) at x."""
    left = (3 * f(x) - 4 * f(x - eps) + f(x - 2 * eps)) / (2 * eps)
    right = (-3 * f(x) + 4 * f(x + eps) - f(x + 2 * eps)) / (2 * eps)
    return left, right


def test_c1_on_dense_grid(surfaces):
    # one-sided slopes on either side of every break and knot agree
    for s in surfaces:
        ts, hs, vals = sample_grid(s, 200, 20)
        assert np.all(np.isfinite(vals))
        scale = 1 + np.abs(vals).max()
        for b in s.breaks[1:-1]:
            for h in hs:
                left, right = one_sided_slopes(lambda t: s.evaluate(t, h).value, b)
                assert left == pytest.approx(right, abs=1e-4 * scale)
        for k in s.knots[1:-1]:
            for t in ts[::10]:
                left, right = one_sided_slopes(lambda x: s.evaluate(t, x).value, k)
                assert left == pytest.approx(right, abs=1e-4 * scale)


def test_zero_height_reduces_to_flat(surfaces):
    for s in surfaces:
        if s.scenario == "flat":
            continue
        f = flat_counterpart(surfaces, s)
        for t in np.linspace(0, min(s.duration, f.duration), 41):
            assert s.evaluate(t, 0.0).value == pytest.approx(f.evaluate(t, 0.0).value, rel=1e-12, abs=1e-9)


def test_flat_profile_is_periodic(surfaces):
    ssp = surfaces.get("com", "flat", "nominal", "SSP")
    dsp = surfaces.get("com", "flat", "nominal", "DSP")
    a, b = ssp.evaluate(ssp.duration, 0), dsp.evaluate(0, 0)
    np.testing.assert_allclose([a.value, a.dt, a.dtt], [b.value, b.dt, b.dtt], atol=1e-9)
    a, b = dsp.evaluate(dsp.duration, 0), ssp.evaluate(0, 0)
    np.testing.assert_allclose([a.value, a.dt, a.dtt], [b.value, b.dt, b.dtt], atol=1e-9)


def test_phase_start_anchor(surfaces):
    base = FlatProfile()
    v = surfaces.get("com", "flat", "nominal", "SSP").evaluate(0.0, 0.0)
    np.testing.assert_allclose([v.value, v.dt, v.dtt], base.liftoff, atol=1e-12)
    mid = surfaces.get("com", "flat", "nominal", "SSP").evaluate(0.5 * base.T_SSP, 0.0)
    assert mid.value == pytest.approx(base.z_vlo, abs=1e-9)


def test_derivatives_match_finite_differences(surfaces):
    rng = np.random.default_rng(3)
    for s in surfaces:
        for _ in range(10):
            t = rng.uniform(0.01, s.duration - 0.01)
            h = rng.uniform(0.005, 0.095)
            v = s.evaluate(t, h)
            e = 1e-6
            fd_t = (s.evaluate(t + e, h).value - s.evaluate(t - e, h).value) / (2 * e)
            fd_tt = (s.evaluate(t + e, h).dt - s.evaluate(t - e, h).dt) / (2 * e)
            fd_ttt = (s.evaluate(t + e, h).dtt - s.evaluate(t - e, h).dtt) / (2 * e)
            fd_h = (s.evaluate(t, h + e).value - s.evaluate(t, h - e).value) / (2 * e)
            scale = 1 + abs(v.value)
            assert v.dt == pytest.approx(fd_t, abs=1e-6 * (scale + abs(v.dt)))
            assert v.dtt == pytest.approx(fd_tt, abs=1e-6 * (scale + abs(v.dtt)) * 10)
            assert v.dttt == pytest.approx(fd_ttt, abs=1e-4 * (scale + abs(v.dttt)))
            assert v.dh == pytest.approx(fd_h, abs=1e-6 * (scale + abs(v.dh)))


def test_interpolation_monotone_between_monotone_knots(surfaces):
    for scenario in ("planned", "unplanned"):
        s = surfaces.get("com", scenario, "downstep", "DSP")
        for t in np.linspace(0, s.duration, 21):
            kv = np.array([s.evaluate(t, k).value for k in s.knots])
            for k in range(len(s.knots) - 2):
                seg = kv[k:k + 3]
                if np.all(np.diff(seg) < 0) or np.all(np.diff(seg) > 0):
                    lo, hi = sorted(kv[k:k + 2])
                    for h in np.linspace(s.knots[k], s.knots[k + 1], 7):
                        assert lo - 1e-12 <= s.evaluate(t, h).value <= hi + 1e-12


def test_planned_lowers_com_before_impact(surfaces):
    T = surfaces.timings.T_SSP
    planned = surfaces.get("com", "planned", "downstep", "SSP").evaluate(T, 0.10).value
    flat = surfaces.get("com", "flat", "nominal", "SSP").evaluate(T, 0.0).value
    assert planned < flat - 0.05


def peak_grf(ss, scenario, h):
    peak = 0.0
    for step in ("downstep", "recovery"):
        for phase in ("SSP", "DSP"):
            for s in ss:
                if s.kind == "grf" and s.scenario == scenario and s.step == step and s.phase == phase:
                    T = ss.phase_duration(scenario, step, phase, h)
                    peak = max(peak, max(s.evaluate(t, h).value for t in np.linspace(0, T, 400)))
    return peak


def test_unplanned_peak_exceeds_planned(surfaces):
    assert peak_grf(surfaces, "unplanned", 0.10) > peak_grf(surfaces, "planned", 0.10)


def test_unplanned_follows_flat_until_touchdown(surfaces):
    u = surfaces.get("com", "unplanned", "downstep", "SSP")
    f = surfaces.get("com", "flat", "nominal", "SSP")
    for t in np.linspace(0, surfaces.timings.T_SSP, 21):
        assert u.evaluate(t, 0.1).value == pytest.approx(f.evaluate(t, 0.0).value, abs=1e-12)
    assert surfaces.phase_duration("unplanned", "downstep", "SSP", 0.1) > surfaces.timings.T_SSP


def test_json_round_trip_bit_exact(surfaces):
    back = SurfaceSet.loads(surfaces.dumps())
    assert len(back) == len(surfaces)
    for s in surfaces:
        b = back.get(*s.key)
        for name in ("knots", "breaks", "coeffs", "dcoeffs_dh"):
            assert np.array_equal(getattr(s, name), getattr(b, name))
    assert json.loads(back.dumps()) == json.loads(surfaces.dumps())


def test_affine_transform():
    s = build_synthetic_surfaces().get("com", "flat", "nominal", "SSP")
    a = s.affine(value_scale=0.5, time_scale=2.0, about=1.0, new_about=0.8)
    for t in np.linspace(0, s.duration, 7):
        v, w = s.evaluate(t, 0), a.evaluate(2 * t, 0)
        assert w.value == pytest.approx(0.8 + 0.5 * (v.value - 1.0))
        assert w.dt == pytest.approx(0.25 * v.dt)
        assert w.dtt == pytest.approx(0.125 * v.dtt)


def test_queries_outside_domain_are_clamped(surfaces):
    s = surfaces.get("com", "planned", "downstep", "SSP")
    v = s.evaluate(10.0, 0.5)
    assert v.clamped and v.value == pytest.approx(s.evaluate(s.duration, s.knots[-1]).value)
    with pytest.raises(SurfaceError):
        s.evaluate(np.nan, 0.0)


def test_invalid_shape_rejected():
    with pytest.raises(SurfaceError):
        DownstepShape(min_grf_fraction=-0.1)
    with pytest.raises(SurfaceError):
        DownstepShape(foot_descent_speed=0.0)
    with pytest.raises(SurfaceError):
        build_synthetic_surfaces(shape=DownstepShape(min_grf_fraction=2.0))


def test_bad_grid_rejected():
    with pytest.raises(SurfaceError):
        ReferenceSurface("com", "flat", "nominal", "SSP", None, [0.0], [0.0, 1.0], np.zeros((2, 1, 6)),
                         np.zeros((2, 1, 6)))


def test_unplanned_hand_over_favours_landing_leg(surfaces):
    lead = surfaces.get("grf", "unplanned", "downstep", "DSP", "downstep")
    trail = surfaces.get("grf", "unplanned", "downstep", "DSP", "other")
    T = lead.duration
    for t in np.linspace(0.01, T - 0.01, 9):
        s = t / T
        for h, share in ((0.0, s), (0.10, 2 * s - s * s)):
            a, b = lead.evaluate(t, h).value, trail.evaluate(t, h).value
            assert a / (a + b) == pytest.approx(share, rel=1e-9)
    with pytest.raises(SurfaceError):
        DownstepShape(unplanned_lead_bias=1.5)
