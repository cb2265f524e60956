import numpy as np
import pytest

from dacsim.airframe import G0, InertialParams, coriolis_matrix, gravity_wrench, mass_matrix
from dacsim.controller import ControllerGains
from dacsim.supervisor import (
    CostConfig,
    DecisionState,
    ModelSide,
    RolloutContext,
    WindowHistory,
    advance_lambda,
    blend,
    blend_params,
    cost_from_errors,
    descend,
    manual_override,
    trapezoid,
    window_cost,
)

P_MODEL = InertialParams(m=49.6 / G0, Ixx=1.0, Iyy=4.2, Izz=5.0, Ixz=0.18).vector
P_EST = InertialParams(m=49.47 / G0, Ixx=0.99654, Iyy=4.13302, Izz=4.93648, Ixz=0.16591,
                       rho=np.array([0.0105, 0.0, 0.0023])).vector
B = np.array([[0, 0, 0, 30.0], [0, 21, 0, 0], [-53, 0, 0, 0], [0, 7, 108, 0], [-145, 0, 0, 0], [0, -72, -7, 0]])


def side(params, scale=1.0):
    return ModelSide(params, B * scale, -np.eye(6), np.zeros(6))


def test_blend_endpoints_and_range():
    a, b = side(P_MODEL), side(P_EST, 0.8)
    np.testing.assert_array_equal(blend(a, b, 0.0).params, P_MODEL)
    np.testing.assert_array_equal(blend(a, b, 1.0).B, B * 0.8)
    with pytest.raises(ValueError):
        blend(a, b, 1.2)


def test_blended_matrices_are_elementwise_blends():
    v = np.array([120.0, 2.0, 5.0, 0.1, -0.05, 0.02])
    euler = np.array([0.1, 0.05, 0.0])
    for lam in (0.25, 0.5, 0.9):
        p = blend_params(P_MODEL, P_EST, lam)
        np.testing.assert_allclose(mass_matrix(p), (1 - lam) * mass_matrix(P_MODEL) + lam * mass_matrix(P_EST),
                                   atol=1e-13)
        np.testing.assert_allclose(coriolis_matrix(v, p),
                                   (1 - lam) * coriolis_matrix(v, P_MODEL) + lam * coriolis_matrix(v, P_EST),
                                   atol=1e-11)
        np.testing.assert_allclose(gravity_wrench(euler, p),
                                   (1 - lam) * gravity_wrench(euler, P_MODEL) + lam * gravity_wrench(euler, P_EST),
                                   atol=1e-12)
        m = blend(side(P_MODEL), side(P_EST, 0.5), lam)
        np.testing.assert_allclose(m.B, (1 - lam) * B + lam * 0.5 * B)


def test_trapezoid_and_cost():
    t = np.linspace(0, 2, 21)
    assert trapezoid(3 * t + 1, t) == pytest.approx(8.0)
    cfg = CostConfig(H_l=2 * np.eye(6), Q_l=np.eye(6))
    e = np.tile(np.array([1.0, 0, 0, 0, 0, 1.0]), (21, 1))
    # terminal 0.5*e'He = 2, running 0.5*e'Qe*T = 2
    assert cost_from_errors(e, t, cfg) == pytest.approx(4.0)
    assert cost_from_errors(np.zeros((21, 6)), t, cfg) == 0.0


def test_descend_directions():
    cfg = CostConfig()

    def bowl(centre):
        return lambda lams: 100 * (lams - centre) ** 2 + 1.0

    lam, (lams, costs) = descend(0.5, bowl(0.9), cfg)
    assert lam == pytest.approx(0.5 + cfg.gamma_step)
    assert lams == pytest.approx((0.48, 0.52))
    assert costs[1] < costs[0]
    assert descend(0.5, bowl(0.1), cfg)[0] == pytest.approx(0.45)
    assert descend(0.5, lambda l: np.ones_like(l), cfg)[0] == 0.5
    assert descend(0.5, lambda l: np.full_like(l, np.inf), cfg)[0] == 0.5
    assert descend(0.5, lambda l: np.where(l > 0.5, np.inf, 1.0), cfg)[0] == pytest.approx(0.45)
    # one-sided at the boundary
    assert descend(1.0, bowl(0.7), cfg)[0] == pytest.approx(0.95)
    assert descend(0.0, bowl(0.3), cfg)[0] == pytest.approx(cfg.gamma_step)


def test_rate_limit_exact_and_lag():
    cfg = CostConfig(rate_limit=0.25, lag=1.5)
    dt = 0.005
    st = DecisionState(lambda_opt=1.0)
    lams = []
    for k in range(2000):
        st = advance_lambda(st, k * dt, dt, cfg, converged=True)
        lams.append(st.lambda_actual)
    lams = np.array(lams)
    t = np.arange(2000) * dt
    assert np.all(lams[t < 1.5] == 0.0)
    steps = np.abs(np.diff(lams))
    assert steps.max() <= cfg.rate_limit * dt
    assert lams[-1] == 1.0


def test_lag_restarts_when_convergence_drops():
    cfg = CostConfig(lag=1.0)
    st = DecisionState(lambda_opt=1.0)
    for k in range(150):
        st = advance_lambda(st, k * 0.01, 0.01, cfg, converged=k != 80)
    # flag dropped at 0.8 s, so motion starts at 1.81 s at the earliest
    assert st.lambda_actual == 0.0


def test_manual_override_and_release():
    cfg = CostConfig(lag=0.5)
    st = DecisionState(lambda_actual=1.0, lambda_opt=1.0)
    st = manual_override(st, 0.0, t=10.0)
    assert st.target == 0.0
    st = advance_lambda(st, 10.2, 0.01, cfg)
    assert st.lambda_actual == 1.0
    st = advance_lambda(st, 10.6, 0.01, cfg)
    assert st.lambda_actual == pytest.approx(1.0 - 0.0025)
    st = manual_override(st, None, t=11.0)
    assert st.mode == "auto" and st.target == 1.0
    with pytest.raises(ValueError):
        manual_override(st, 1.5)
    with pytest.raises(ValueError):
        DecisionState(mode="pilot")


def history(n=201, dt=0.005, n_act=6):
    t = np.arange(n) * dt
    v_d = np.tile([0.0, 0, 0, 0, 0, 0], (n, 1))
    return WindowHistory(t, np.array([0.5, 0, 0, 0, 0, 0]), v_d, np.zeros((n, 6)), np.zeros((n, 6)),
                         np.zeros((n, n_act)))


def context():
    full = np.hstack([B, np.eye(6)[:, [1, 2]]])
    return full, RolloutContext(ControllerGains(), -np.full(6, 1e3), np.full(6, 1e3), 1e-6, np.zeros(6))


def test_cost_independent_of_lambda_when_sides_agree():
    full, ctx = context()
    a = ModelSide(P_MODEL, full, -np.eye(6), np.zeros(6))
    J = window_cost(history(), np.array([0.0, 0.3, 1.0]), a, a, ctx, CostConfig())
    np.testing.assert_allclose(J, J[0], rtol=1e-12)


def test_cost_prefers_correct_model():
    full, ctx = context()
    truth = ModelSide(P_MODEL, full, -np.eye(6), np.zeros(6))
    wrong = ModelSide(P_MODEL, full * 0.3, -np.eye(6), np.array([5.0, 0, 0, 0, 0, 0]))
    J = window_cost(history(), np.array([0.0, 1.0]), wrong, truth, ctx, CostConfig())
    assert J[1] < J[0]


def test_cost_config_validation():
    with pytest.raises(ValueError):
        CostConfig(Q_l=-np.eye(6))
    with pytest.raises(ValueError):
        CostConfig(rate_limit=0.0)
