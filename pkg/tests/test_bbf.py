import numpy as np
import pytest

from downstep.aslip import AslipState, LegParams, dynamics, rk4_step, vertical_grf
from downstep.bbf import (
    BbfController,
    BbfError,
    BbfGains,
    EmptyTubeError,
    RefSample,
    backstepping_clf_constraint,
    bbf_qp_tick,
    force_state_dynamics,
    grf_tube_cbf_constraints,
    lyapunov_value,
    output_dynamics,
    virtual_force,
)
from downstep.profiles import build_synthetic_surfaces

P = LegParams()
G = BbfGains.for_params(P)


def ssp_state(x=0.05, z=0.97, xd=1.0, zd=-0.1, L0=1.0, L0d=0.05):
    return AslipState.from_parts([x, z], [xd, zd], [L0, 1.0], [L0d, 0.0], [[0, 0], [0.5, 0]], (True, False))


def dsp_state():
    return AslipState.from_parts([0.25, 0.96], [1.0, -0.05], [1.02, 1.02], [0.1, -0.1],
                                 [[0, 0], [0.5, 0]], (True, True))


def rollout(state, u, dt):
    f = lambda q: dynamics(state.replace(q=q), None, P, u)
    return state.replace(q=rk4_step(f, state.q, dt))


def test_gains_defaults_and_validation():
    assert G.delta_F == pytest.approx(0.05 * 70 * 9.81)
    assert np.all(np.linalg.eigvalsh(G.P) > 0)
    # shifted closed loop is Hurwitz, so the eta part decays at least at rate gamma
    Acl = G.A_cl
    Q = -(G.P @ Acl + Acl.T @ G.P)
    assert np.min(np.linalg.eigvalsh(Q - G.gamma * G.P)) > 0
    with pytest.raises(ValueError):
        BbfGains(c=1.2)
    with pytest.raises(ValueError):
        BbfGains(delta_F=-1.0)
    with pytest.raises(ValueError):
        BbfGains(P=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        BbfGains(q_over_r=1.0)  # too slow for gamma = 20
    with pytest.raises(EmptyTubeError):
        G.check_surface_range(10.0)


def test_output_dynamics_examples():
    ref = RefSample([0.97, -0.1, 0.0, 0.0])
    eta, f_eta, g_eta = output_dynamics(ssp_state(), P, ref)
    np.testing.assert_allclose(g_eta, [0, 1 / 70])
    np.testing.assert_allclose(eta, 0, atol=1e-15)
    # with F_z = m g, eta_dot = 0
    np.testing.assert_allclose(f_eta + g_eta * P.mass * P.gravity, 0, atol=1e-12)


def test_output_dynamics_rollout_oracle():
    s = ssp_state()
    ref = RefSample([0.96, 0.0, 0.0, 0.0])
    eta, f_eta, g_eta = output_dynamics(s, P, ref)
    F_z = vertical_grf(s, P, 0)
    dt = 1e-6
    ep = output_dynamics(rollout(s, [0, 0], dt), P, ref)[0]
    em = output_dynamics(rollout(s, [0, 0], -dt), P, ref)[0]
    np.testing.assert_allclose((ep - em) / (2 * dt), f_eta + g_eta * F_z, rtol=1e-6, atol=1e-6)


def test_force_rate_matches_rollout():
    rng = np.random.default_rng(7)
    for s in (ssp_state(), ssp_state(-0.1, 0.93, 0.8, 0.3, 0.98, -0.2), dsp_state()):
        fd = force_state_dynamics(s, P)
        u = np.zeros(2)
        u[list(fd.legs)] = rng.uniform(-20, 20, len(fd.legs))
        dt = 1e-6
        sp, sm = rollout(s, u, dt), rollout(s, u, -dt)
        for i, j in enumerate(fd.legs):
            fd_rate = (vertical_grf(sp, P, j) - vertical_grf(sm, P, j)) / (2 * dt)
            assert fd.f[i] + fd.g[i] * u[j] == pytest.approx(fd_rate, rel=1e-4, abs=1e-3)


def test_no_damping_means_no_actuation():
    p = LegParams(damping=0.0)
    fd = force_state_dynamics(ssp_state(), p)
    np.testing.assert_allclose(fd.g, 0)
    with pytest.raises(ValueError):
        BbfController(p)


def test_frozen_vertical_leg_rate_is_rest_length_term():
    s = AslipState.from_parts([0, 0.98], [0, 0], [1.0, 1.0], [0.2, 0], [[0, 0], [0, 0]], (True, False))
    fd = force_state_dynamics(s, P, acc=np.zeros(2))
    K, Kp = P.stiffness(1.0), P.stiffness_slope(1.0)
    assert fd.f[0] == pytest.approx(Kp * 0.2 * 0.02 + K * 0.2)


def test_clf_origin_has_margin():
    s = ssp_state()
    fd = force_state_dynamics(s, P)
    # reference built so that eta = 0 and F_z = Fbar
    zdd = fd.F_z / P.mass - P.gravity
    ref = RefSample([s.q[1], s.q[3], zdd, 0.0])
    row = backstepping_clf_constraint(np.zeros(2), fd, ref, G)
    assert row.V == pytest.approx(0, abs=1e-9)
    assert row.xi == pytest.approx(0, abs=1e-9)
    assert 0.0 <= row.b + 1e-9


def test_clf_eta_part_negative_definite():
    rng = np.random.default_rng(0)
    Acl = G.A_cl
    M = G.P @ Acl + Acl.T @ G.P
    for _ in range(50):
        eta = rng.normal(size=2)
        assert eta @ M @ eta < -G.gamma * eta @ G.P @ eta


def test_clf_vdot_matches_rollout():
    ss = build_synthetic_surfaces()
    surf = ss.get("com", "flat", "nominal", "SSP")

    def ref_at(t):
        v = surf.evaluate(t, 0.0)
        return RefSample([v.value, v.dt, v.dtt, v.dttt])

    s = ssp_state(z=0.975, zd=0.05)
    t0 = 0.15
    fd = force_state_dynamics(s, P)
    eta = output_dynamics(s, P, ref_at(t0))[0]
    row = backstepping_clf_constraint(eta, fd, ref_at(t0), G)
    u = np.array([7.0, 0.0])
    Vdot = row.Vdot_drift + row.a @ u[[0]]

    def V_at(state, t):
        r = ref_at(t)
        e = output_dynamics(state, P, r)[0]
        return lyapunov_value(e, vertical_grf(state, P, 0), virtual_force(e, r, G), G)

    dt = 1e-6
    fd_V = (V_at(rollout(s, u, dt), t0 + dt) - V_at(rollout(s, u, -dt), t0 - dt)) / (2 * dt)
    assert Vdot == pytest.approx(fd_V, rel=1e-3)


def test_tube_rows_examples():
    F_d = 700.0
    lo, up = G.tube(F_d)
    rows, rhs, bounds, h = grf_tube_cbf_constraints(0.5 * (lo + up), 0.0, 400.0, F_d, 0.0, G)
    assert np.all(rows * 0.0 <= rhs) and np.all(rhs > 0)
    # on the lower bound the row is hdot_lo >= 0: -g u <= f
    rows, rhs, _, h = grf_tube_cbf_constraints(lo, 12.0, 400.0, F_d, 0.0, G)
    assert h[0] == pytest.approx(0.0)
    assert rhs[0] == pytest.approx(12.0)
    with pytest.raises(EmptyTubeError):
        grf_tube_cbf_constraints(10.0, 0.0, 400.0, 20.0, 0.0, G)


def test_tick_perfect_tracking_gives_small_input():
    # vertical leg compressed so that the spring carries the weight
    z = 1.0 - P.mass * P.gravity / P.stiffness(1.0)
    s = AslipState.from_parts([0, z], [0, 0], [1.0, 1.0], [0, 0], [[0, 0], [0, 0]], (True, False))
    Fz = vertical_grf(s, P, 0)
    assert Fz == pytest.approx(P.mass * P.gravity)
    ref = RefSample([z, 0.0, 0.0, 0.0], {0: (Fz, 0.0)})
    res = bbf_qp_tick(s, P, ref, G)
    assert res.ok and abs(res.u[0]) < 1e-6 and np.isnan(res.u[1])
    assert res.slack == pytest.approx(0.0, abs=1e-9)


def test_tick_enforces_clf_decrease():
    ctrl = BbfController(P, G)
    rng = np.random.default_rng(2)
    for _ in range(20):
        s = ssp_state(z=rng.uniform(0.95, 0.99), zd=rng.uniform(-0.2, 0.2), L0=1.03, L0d=rng.uniform(-0.2, 0.2))
        F = vertical_grf(s, P, 0)
        ref = RefSample([0.97, 0.0, 0.5, 0.0], {0: (F * rng.uniform(0.9, 1.1), 0.0)})
        res = ctrl.tick(s, ref)
        assert res.ok
        if res.slack < 1e-12:
            assert res.Vdot <= -G.gamma * res.V + 1e-8 * (1 + res.V)
        lo, up = res.tube[0]
        # barrier rows hold at the returned input
        fd = force_state_dynamics(s, P)
        Fdot = fd.f[0] + fd.g[0] * res.u[0]
        assert Fdot - (1 - G.c) * 0.0 >= -G.alpha * (F - lo) - 1e-6
        assert (1 + G.c) * 0.0 - Fdot >= -G.alpha * (up - F) - 1e-6


def test_tick_infeasible_raises():
    s = ssp_state()
    F = vertical_grf(s, P, 0)
    tight = BbfGains.for_params(P, u_max=1e-6, alpha=1e-3)
    # desired force far from the actual one: barrier rows cannot be met with tiny inputs
    ref = RefSample([0.97, 0.0, 0.0, 0.0], {0: (3 * F, 0.0)})
    with pytest.raises(BbfError):
        bbf_qp_tick(s, P, ref, tight)
