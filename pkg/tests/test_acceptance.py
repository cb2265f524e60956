"""Acceptance criteria 1-11, one test each; results are summarised at the end of the run."""
import time

import numpy as np
import pytest

from conftest import report
from dacsim import cli, metrics
from dacsim.airframe import (
    Airframe,
    InertialParams,
    PlantState,
    RegressorSet,
    coriolis_matrix,
    dynamics_rhs,
    mass_matrix,
    rk4_step,
    trim_tau0,
)
from dacsim.controller import ControllerGains, DesiredMotion, allocate, control_wrench
from dacsim.estimator import SL_P, UnscentedKalmanFilter, numerical_rank, observability_matrix, velocity_dynamics
from dacsim.identifier import RlsState, SampleWindow, fit_window, regressor, rls_update
from dacsim.scenario import COL, S_VERR, load_scenario
from dacsim.supervisor import BlendedModel, ModelSide


def random_params(rng):
    I = np.diag(rng.uniform(1.0, 6.0, 3))
    off = rng.uniform(-0.2, 0.2, 3)
    return InertialParams(rng.uniform(0.5, 3.0), I[0, 0], I[1, 1], I[2, 2], *off,
                          rho=rng.uniform(-0.05, 0.05, 3))


def test_criterion_01_structural_invariants():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    skew_err = sym_err = power_err = 0.0
    for _ in range(1000):
        p = random_params(rng).vector
        v = rng.uniform(-50, 50, 6)
        C = coriolis_matrix(v, p)
        M = mass_matrix(p)
        skew_err = max(skew_err, np.abs(C + C.T).max())
        sym_err = max(sym_err, np.abs(M - M.T).max())
        power_err = max(power_err, abs(v @ C @ v) / max(1.0, v @ v))
    elapsed = time.perf_counter() - start
    ok = skew_err < 1e-12 and sym_err == 0 and power_err < 1e-12 and elapsed < 1.0
    report(1, ok, f"max|C+C^T|={skew_err:.1e} max|M-M^T|={sym_err:.0e} "
                  f"max|v'Cv|/|v|^2={power_err:.1e} runtime={elapsed:.2f}s")
    assert ok


def test_criterion_02_energy_conservation():
    p = random_params(np.random.default_rng(102)).vector
    M = mass_matrix(p)
    v = np.array([30.0, -4.0, 6.0, 0.8, -0.5, 1.1])
    pose = np.zeros(6)
    tau = np.zeros(6)

    def f(t, x):
        return dynamics_rhs(x, pose, tau, p, g=0.0, M=M)[0]

    start = time.perf_counter()
    E0 = 0.5 * v @ M @ v
    dt = 1e-3
    drift = 0.0
    for k in range(10000):
        v = rk4_step(f, k * dt, v, dt)
        drift = max(drift, abs(0.5 * v @ M @ v - E0) / E0)
    elapsed = time.perf_counter() - start
    ok = drift < 1e-6 and elapsed < 5.0
    report(2, ok, f"max relative energy drift={drift:.2e} runtime={elapsed:.2f}s")
    assert ok


def test_criterion_03_lyapunov_regulation():
    sc = load_scenario("nominal")
    regs = sc.model_regressors
    # two extra force columns make the plant fully actuated, so allocation is exact
    B6 = np.hstack([regs.B, np.eye(6)[:, [1, 2]]])
    delta_trim = np.concatenate([sc.trim_delta, np.zeros(2)])
    tau0 = trim_tau0(sc.model_params, sc.trim_v, sc.trim_euler, B6, regs.D, delta_trim, np.zeros(6), sc.g)
    truth = RegressorSet(B6, regs.D, tau0)
    plant = Airframe(sc.model_params, truth, None, sc.g)
    model = BlendedModel.from_side(ModelSide(sc.model_params.vector, B6, regs.D, tau0), 0.0, sc.g)
    gains = ControllerGains(Gamma=sc.gains.Gamma)
    desired = DesiredMotion(sc.trim_v)
    state = PlantState(sc.trim_v + np.array([3.0, 1.0, -2.0, 0.05, -0.04, 0.03]),
                       np.concatenate([np.zeros(3), sc.trim_euler]), 0.0)
    M = mass_matrix(sc.model_params)
    dt = 0.005
    start = time.perf_counter()
    t, lnV = [], []
    while state.t <= 5.0 + 1e-9:
        e = state.v - desired.v_d
        t.append(state.t)
        lnV.append(np.log(0.5 * e @ M @ e))
        tau_c = control_wrench(state.v, state.pose, desired, model, gains)
        delta = allocate(tau_c, B6, 1e-6).delta
        state = plant.step(state, delta, dt)
    elapsed = time.perf_counter() - start
    t, lnV = np.array(t), np.array(lnV)
    sel = t >= 0.5
    slope = np.polyfit(t[sel], lnV[sel], 1)[0]
    worst = (np.diff(lnV[sel]) / dt).max()
    bound = -1.8 * gains.Gamma.min() / np.linalg.eigvalsh(M).max()
    ok = slope <= bound and worst <= bound and elapsed < 10.0
    report(3, ok, f"ln V slope fit={slope:.3f} worst step={worst:.3f} bound={bound:.3f} runtime={elapsed:.2f}s")
    assert ok


def test_criterion_04_ukf_matches_linear_kalman_filter():
    # surge speed driven by an unknown constant axial force: u' = tau_x / m, tau_x' = 0
    p = InertialParams(m=1.54, Ixx=1.0, Iyy=4.2, Izz=5.0).vector
    m = p[0]
    dt = 0.01

    def fx(pts, h):
        out = pts.copy()
        v = np.zeros((len(pts), 6))
        v[:, 0] = pts[:, 0]
        tau = np.zeros((len(pts), 6))
        tau[:, 0] = pts[:, 1]
        k = velocity_dynamics(v, tau, p, np.zeros(3), np.zeros(6), g=0.0)
        out[:, 0] = pts[:, 0] + h * k[:, 0]
        return out

    F = np.array([[1.0, dt / m], [0.0, 1.0]])
    H = np.array([[1.0, 0.0]])
    Q, R = np.diag([1e-4, 1e-2]), np.array([[0.05 ** 2]])
    x0, P0 = np.array([120.0, 0.0]), np.diag([1.0, 4.0])
    ukf = UnscentedKalmanFilter(x0, P0, Q, R, fx, lambda pts: pts[:, :1], kappa=1.0)
    rng = np.random.default_rng(104)
    truth = np.array([120.0, 2.0])
    x, P = x0.copy(), P0.copy()
    start = time.perf_counter()
    err_x = err_P = 0.0
    for _ in range(100):
        truth = F @ truth
        y = H @ truth + rng.normal(scale=0.05, size=1)
        ukf.predict(dt)
        ukf.update(y)
        x, P = F @ x, F @ P @ F.T + Q
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x, P = x + K @ (y - H @ x), P - K @ S @ K.T
        err_x = max(err_x, np.abs(ukf.x - x).max())
        err_P = max(err_P, np.abs(ukf.P - P).max())
    elapsed = time.perf_counter() - start
    ok = err_x < 1e-8 and err_P < 1e-8 and elapsed < 1.0
    report(4, ok, f"max|mean diff|={err_x:.1e} max|cov diff|={err_P:.1e} runtime={elapsed:.2f}s")
    assert ok


def test_criterion_05_parameter_recovery(damage_dac):
    rec = damage_dac.value
    t0 = metrics.damage_time(rec)
    t = rec.t
    details, ok = [], True
    for name, band in (("m", 0.02), ("Iyy", 0.05)):
        conv = metrics.convergence_time(t, rec.col(f"phat_{name}"), rec.col(f"p_{name}"), band, t0)
        hit = np.isfinite(conv) and conv <= 15.0
        ok &= bool(hit)
        at = np.searchsorted(t, t0 + 15.0)
        rel = abs(rec.col(f"phat_{name}")[at] / rec.col(f"p_{name}")[at] - 1)
        details.append(f"{name}: in +/-{band:.0%} from {conv:.2f}s after damage, error at +15s {rel:.2%}")
    # only the first 25 s of the shared run are needed here
    needed = damage_dac.seconds * 25.0 / 62.0
    ok = ok and needed < 60.0
    report(5, ok, "; ".join(details) + f" runtime~{needed:.0f}s")
    assert ok


def test_criterion_06_koopman_exact_recovery():
    rng = np.random.default_rng(106)
    P = np.hstack([rng.normal(scale=50, size=(6, 4)), rng.normal(scale=2, size=(6, 6)), rng.normal(scale=10, size=(6, 1))])
    start = time.perf_counter()
    m = 200
    tt = np.arange(m) * 0.01
    delta = 0.05 * np.column_stack([np.sin((1 + 0.7 * i) * 3 * tt + i) for i in range(4)])
    v = np.column_stack([np.cos((0.5 + 0.9 * i) * 2 * tt) for i in range(6)]) + rng.normal(scale=0.1, size=(m, 6))
    v[:, 0] += 120.0
    w = SampleWindow(m)
    for k in range(m):
        w.append(P @ regressor(delta[k], v[k]), delta[k], v[k], tt[k])
    est = fit_window(w)
    exact = np.linalg.norm(est.P_hat - P) / np.linalg.norm(P)
    noisy = SampleWindow(m)
    for s in w.samples():
        noisy.append(s.tau_hat + rng.normal(scale=0.2, size=6), s.delta, s.v, s.t)
    st = RlsState.initial(p0=1e10, forgetting=1.0)
    for s in noisy.samples():
        st = rls_update(st, s.tau_hat, s.delta, s.v)
    batch = fit_window(noisy, ridge=0.0)
    rls_gap = np.linalg.norm(st.P_hat - batch.P_hat) / np.linalg.norm(batch.P_hat)
    elapsed = time.perf_counter() - start
    ok = exact < 1e-8 and rls_gap < 1e-6 and elapsed < 2.0
    report(6, ok, f"relative error={exact:.1e} RLS vs batch={rls_gap:.1e} runtime={elapsed:.2f}s")
    assert ok


def test_criterion_07_koopman_vs_rls(damage_dac):
    pairs = metrics.koopman_vs_rls(damage_dac.value, after=32.0, width=2.0)
    wins = [k <= r for _, k, r in pairs]
    frac = float(np.mean(wins)) if wins else 0.0
    k_mean = np.mean([k for _, k, _ in pairs]) if pairs else np.nan
    r_mean = np.mean([r for _, _, r in pairs]) if pairs else np.nan
    ok = len(pairs) >= 10 and frac >= 0.9
    report(7, ok, f"Koopman <= RLS in {sum(wins)}/{len(pairs)} windows ({frac:.0%}), "
                  f"mean RMS {k_mean:.4f} vs {r_mean:.4f}")
    assert ok


def test_criterion_08_dac_vs_mbc(damage_dac, damage_mbc, nominal_pair):
    dac, mbc = damage_dac.value, damage_mbc.value
    a = metrics.window_rms(mbc.t, mbc.data[:, S_VERR], 20.0, 30.0)
    b = metrics.window_rms(dac.t, dac.data[:, S_VERR], 20.0, 30.0)
    n_mbc, n_dac = (x.value for x in nominal_pair)
    na, nb = metrics.rms(n_mbc.data[:, S_VERR]), metrics.rms(n_dac.data[:, S_VERR])
    nominal_gap = abs(nb - na) / na
    # the paired damage runs share the DAC run with criteria 5, 7, 9 and 10
    total = damage_mbc.seconds + damage_dac.seconds * 30.0 / 62.0 + sum(x.seconds for x in nominal_pair)
    ok = b < 0.3 * a and nominal_gap < 0.1 and total < 120.0
    report(8, ok, f"[20,30] RMS dac={b:.3f} mbc={a:.3f} ratio={b / a:.3f}; nominal gap={nominal_gap:.1%}; "
                  f"runtime~{total:.0f}s")
    assert ok


def test_criterion_09_observability(damage_dac):
    rec = damage_dac.value
    sv = np.array([s for _, s in rec.obs_sv])
    all_positive = sv.size > 0 and bool(np.all(sv > 0))
    ranks = [numerical_rank(s) for s in sv]
    k = len(rec) - 1
    x = np.zeros(34)
    x[:6] = rec.data[k, COL["vhat_0"]:COL["vhat_0"] + 6]
    x[6:12] = rec.data[k, COL["tauhat_0"]:COL["tauhat_0"] + 6]
    x[SL_P] = rec.data[k, COL["phat_m"]:COL["phat_m"] + 10]
    pose = np.concatenate([np.zeros(3), rec.data[k, COL["euler_0"]:COL["euler_0"] + 3]])
    cfg = load_scenario("paper_damage1").ukf
    _, sv0 = observability_matrix(x, cfg, pose, zero_dp=True)
    dropped = numerical_rank(sv0)
    ok = all_positive and dropped < 34
    report(9, ok, f"{sv.shape[0]} checks, min singular value={sv.min():.1e} > 0; "
                  f"numerical rank with parameter coupling {min(ranks)}-{max(ranks)}, without {dropped}")
    assert ok


def test_criterion_10_lambda_transitions(damage_dac):
    rec = damage_dac.value
    t, lam = rec.t, rec.col("lambda_actual")
    verr = rec.data[:, S_VERR]
    dt = load_scenario("paper_damage1").dt
    rate = load_scenario("paper_damage1").decision.rate_limit
    max_step = np.abs(np.diff(lam)).max()
    segs = metrics.lambda_segments(t, lam)
    auto = next(s for s in segs if s[0] > metrics.damage_time(rec))
    manual = [s for s in segs if 50.0 <= s[0] <= 62.0]
    ratios = {}
    for label, (s, e) in [("auto", auto)] + [(f"manual@{s:.1f}", (s, e)) for s, e in manual]:
        pre, peak = metrics.ramp_excursion(t, verr, s, e)
        ratios[label] = peak / pre
    # the pilot selects 0 over [50, 55) and releases at 55 s; with the lag and rate limit
    # lambda cannot reach 0 before the release, so the ramp down is partial
    sel = rec.col("lambda_sel")
    commanded = np.all(sel[(t >= 50.0) & (t < 55.0)] == 0.0)
    low = lam[(t > 50) & (t < 57)].min()
    # after the release lambda climbs back and auto mode resumes tracking lambda_opt,
    # which itself wanders between about 0.85 and 1 once the damage is identified
    after = t >= 55.0 + load_scenario("paper_damage1").decision.lag
    peak_back = lam[after].max()
    tracking = np.abs(lam - rec.col("lambda_opt"))[after] <= rate * dt
    came_back = peak_back > 0.9 and tracking[-1]
    ok = (max_step <= rate * dt and len(manual) >= 2 and commanded and low < 0.5 and came_back
          and all(r < 5.0 for r in ratios.values()))
    report(10, ok, f"max|dlambda|={max_step:.6f} limit={rate * dt:.6f}; manual low {low:.3f}, "
           f"back to {peak_back:.3f}; peak/pre "
           + ", ".join(f"{k}={v:.2f}" for k, v in ratios.items()))
    assert ok


def test_criterion_11_determinism(tmp_path):
    start = time.perf_counter()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["run", "--scenario", "paper_damage1", "--mode", "dac", "--seed", "7",
                         "--out", str(out), "--duration", "12"]) == cli.EXIT_OK
        outs.append((out / "run.csv").read_bytes())
    elapsed = time.perf_counter() - start
    ok = outs[0] == outs[1] and elapsed < 120.0
    report(11, ok, f"run.csv byte-identical ({len(outs[0])} bytes) runtime={elapsed:.1f}s")
    assert ok
