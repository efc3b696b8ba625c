import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from downstep.profiles import SurfaceError, build_synthetic_surfaces, sample_grid
from downstep.transfer import (
    MorphologyParams,
    _closure_problems,
    nominal_velocity,
    scale_com_displacement,
    scale_grf,
    scale_leg_length_profile,
    scale_step_time,
    transfer_surfaces,
)


HUMAN = build_synthetic_surfaces()


@pytest.fixture(scope="module")
def human():
    return HUMAN


def test_step_time_examples():
    assert scale_step_time(0.4, MorphologyParams.identity()) == 0.4
    assert scale_step_time(0.4, MorphologyParams(robot_avg_length=0.25)) == pytest.approx(0.2)
    assert scale_step_time(0.5, MorphologyParams(robot_avg_length=0.81)) == pytest.approx(0.45)


@given(st.floats(0.3, 3.0), st.floats(0.3, 3.0))
def test_step_time_ratios_compose(a, b):
    one = MorphologyParams(human_avg_length=1.0, robot_avg_length=a)
    two = MorphologyParams(human_avg_length=1.0, robot_avg_length=b)
    both = MorphologyParams(human_avg_length=1.0, robot_avg_length=a * b)
    T = 0.37
    assert scale_step_time(scale_step_time(T, one), two) == pytest.approx(scale_step_time(T, both), rel=1e-12)


def test_com_displacement():
    x = 0.5 * np.linspace(0.0, 1.0, 11) ** 1.3
    same = scale_com_displacement(x, MorphologyParams(roll_fraction=0.0, human_leg_length=1.0))
    np.testing.assert_array_equal(same, x)
    m = MorphologyParams(roll_fraction=0.2, human_leg_length=1.0)
    scaled = scale_com_displacement(x, m)
    assert scaled[-1] == pytest.approx(0.4)
    assert np.all(np.diff(scaled) > 0)
    xs, T = scale_com_displacement(x, m, dsp_duration=0.12, roll_duration=0.02)
    assert T == pytest.approx(0.10 * m.time_ratio)
    with pytest.raises(ValueError):
        scale_com_displacement(x, m, dsp_duration=0.12)


def test_leg_length_profile():
    m = MorphologyParams()
    np.testing.assert_allclose(scale_leg_length_profile(np.full(5, 1.0), m), 0.85, rtol=0, atol=1e-15)
    assert scale_leg_length_profile(1.02, m) == pytest.approx(0.85 * 1.02)
    L = np.linspace(0.9, 1.1, 7)
    np.testing.assert_array_equal(scale_leg_length_profile(L, MorphologyParams.identity()), L)
    with pytest.raises(ValueError):
        scale_leg_length_profile(-0.5, m)


def test_nominal_velocity():
    assert nominal_velocity([0.0, 0.1, 0.25], 0.5) == 0.5
    assert nominal_velocity([0.3, 0.3], 0.5) == 0.0
    x, T = np.array([0.1, 0.2, 0.43]), 0.41
    assert nominal_velocity(x, T) * T == pytest.approx(x[-1] - x[0], rel=1e-15)
    with pytest.raises(ValueError):
        nominal_velocity(x, 0.0)


def test_grf_scaling():
    F = np.array([0.0, 800.0, 1600.0, 700.0, 0.0])
    np.testing.assert_array_equal(scale_grf(F, MorphologyParams.identity()), F)
    half = MorphologyParams(human_mass=70.0, robot_mass=35.0)
    out = scale_grf(F, half)
    assert out.max() == 800.0
    assert np.argmax(out) == np.argmax(F)
    assert out[0] == 0.0 and out[-1] == 0.0


def test_morphology_validation():
    with pytest.raises(ValueError):
        MorphologyParams(robot_mass=0.0)
    with pytest.raises(ValueError):
        MorphologyParams(roll_fraction=1.0)
    m = MorphologyParams()
    assert MorphologyParams.from_dict(m.to_dict()) == m


def test_identity_transfer_is_exact(human):
    out = transfer_surfaces(human, MorphologyParams.identity())
    assert len(out) == len(human)
    for s in human:
        t = out.get(s.kind, s.scenario, s.step, s.phase, s.leg)
        assert np.max(np.abs(t.coeffs - s.coeffs)) <= 1e-12
        assert np.max(np.abs(t.dcoeffs_dh - s.dcoeffs_dh)) <= 1e-12
        np.testing.assert_array_equal(t.breaks, s.breaks)


def test_mass_ratio_scales_grf_peak(human):
    m = MorphologyParams(human_avg_length=1.0, robot_avg_length=1.0, human_mass=70.0, robot_mass=0.43 * 70.0)
    out = transfer_surfaces(human, m)
    for s in human:
        if s.kind != "grf":
            continue
        _, _, a = sample_grid(s, 80, 9)
        _, _, b = sample_grid(out.get(s.kind, s.scenario, s.step, s.phase, s.leg), 80, 9)
        assert b.max() == pytest.approx(0.43 * a.max(), rel=1e-12)
        # coefficients are scaled, not samples, so ties can flip at the last bit
        assert b.flat[np.argmax(a)] >= b.max() * (1 - 1e-13)
        assert np.argmax(scale_grf(a, m)) == np.argmax(a)


def test_robot_surfaces_are_valid_and_consistent(human):
    m = MorphologyParams()
    out = transfer_surfaces(human, m)
    assert out.timings.T_SSP == pytest.approx(human.timings.T_SSP * np.sqrt(0.85))
    assert out.mass == 33.0
    # accelerations are unchanged, so F = m (zdd + g) still holds on the robot
    com = out.get("com", "flat", "nominal", "SSP")
    grf = out.get("grf", "flat", "nominal", "SSP", "other")
    for t in np.linspace(0, com.duration, 7):
        zdd = com.evaluate(t, 0.0).dtt
        assert grf.evaluate(t, 0.0).value == pytest.approx(33.0 * (zdd + 9.81), rel=1e-9)
    # flat CoM at the VLO keeps its fractional offset about the averaged length
    z_h = human.get("com", "flat", "nominal", "SSP").evaluate(0.5 * human.timings.T_SSP, 0.0).value
    z_r = com.evaluate(0.5 * out.timings.T_SSP, 0.0).value
    assert (z_r - 0.85) / 0.85 == pytest.approx((z_h - 1.0) / 1.0, abs=1e-12)


def test_invalid_transfer_names_failed_check(human):
    m = MorphologyParams()
    broken = transfer_surfaces(human, m)
    dsp = broken.get("com", "flat", "nominal", "DSP")
    broken.add(dsp.affine(1.0, 1.0, about=0.0, new_about=0.01))
    assert any("periodic closure" in p for p in _closure_problems(broken))
    with pytest.raises(SurfaceError, match="periodic closure"):
        # re-running the validation on an already broken set
        transfer_surfaces(broken, MorphologyParams.identity())


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.4), st.floats(0.0, 0.1), st.floats(0.5, 1.5))
def test_surface_scaling_follows_the_time_map(t, h, length):
    m = MorphologyParams(robot_avg_length=length, robot_mass=40.0)
    out = transfer_surfaces(HUMAN, m, validate=False)
    a = HUMAN.get("com", "planned", "downstep", "SSP")
    b = out.get("com", "planned", "downstep", "SSP")
    expected = length + (a.evaluate(t, h).value - 1.0) * length
    assert b.evaluate(m.time_ratio * t, h).value == pytest.approx(expected, abs=1e-12)
