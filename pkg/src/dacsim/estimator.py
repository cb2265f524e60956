"""Joint unscented Kalman filter over velocities, force-moments and mass properties.

State layout (34)::

    [ v (6) | tau (6) | zeta1 (6) | zeta2 (6) | p (10) ]

``tau`` follows a third-order Gauss-Markov (triple integrator) model and the
mass properties a random walk. The measurement is the velocity itself.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .airframe import (
    G0,
    N_PARAMS,
    coriolis_product,
    gravity_wrench,
    inertia_tensor,
    mass_matrix,
)

log = logging.getLogger(__name__)

NV, NTAU_A, NP = 6, 18, N_PARAMS
N_STATE = NV + NTAU_A + NP
SL_V = slice(0, 6)
SL_TAU = slice(6, 12)
SL_Z1 = slice(12, 18)
SL_Z2 = slice(18, 24)
SL_TAU_A = slice(6, 24)
SL_P = slice(24, 34)


class SigmaPointError(np.linalg.LinAlgError):
    pass


def gauss_markov_matrix(n=6):
    """Block shift matrix of the triple integrator ``tau' = z1, z1' = z2, z2' = 0``."""
    A = np.zeros((3 * n, 3 * n))
    A[:n, n:2 * n] = np.eye(n)
    A[n:2 * n, 2 * n:] = np.eye(n)
    return A


def unscented_weights(n, kappa):
    wm = np.full(2 * n + 1, 0.5 / (n + kappa))
    wm[0] = kappa / (n + kappa)
    return wm, wm.copy()


def sigma_points(mean, cov, kappa=0.0, jitter=1e-12, max_tries=8):
    """Symmetric 2n+1 point set ``mean, mean +/- columns of chol((n+kappa) cov)``."""
    mean = np.asarray(mean, dtype=float)
    n = mean.size
    scaled = (n + kappa) * np.asarray(cov, dtype=float)
    eye = np.eye(n)
    bump = 0.0
    for _ in range(max_tries):
        try:
            L = np.linalg.cholesky(scaled + bump * eye)
            break
        except np.linalg.LinAlgError:
            bump = jitter * max(1.0, np.abs(np.diag(scaled)).max()) if bump == 0 else bump * 100
    else:
        raise SigmaPointError("covariance is not positive definite even with jitter")
    pts = np.empty((2 * n + 1, n))
    pts[0] = mean
    pts[1:n + 1] = mean + L.T
    pts[n + 1:] = mean - L.T
    wm, wc = unscented_weights(n, kappa)
    return pts, wm, wc


def symmetrize(P):
    return 0.5 * (P + P.T)


def floor_eigenvalues(S, floor):
    if not np.all(np.isfinite(S)):
        raise np.linalg.LinAlgError("non-finite covariance")
    w, V = np.linalg.eigh(symmetrize(S))
    if w[0] >= floor:
        return symmetrize(S)
    return symmetrize((V * np.maximum(w, floor)) @ V.T)


def adapt_covariances(Q, R, K, d, eps_res, H, P_minus, alpha_forget, r_min_eig=0.0):
    """Innovation/residual-based forgetting update of ``(Q, R)``."""
    a = alpha_forget
    Kd = K @ d
    Q_new = symmetrize(a * Q + (1 - a) * np.outer(Kd, Kd))
    R_new = a * R + (1 - a) * (np.outer(eps_res, eps_res) + H @ P_minus @ H.T)
    R_new = floor_eigenvalues(R_new, r_min_eig) if r_min_eig > 0 else symmetrize(R_new)
    return Q_new, R_new


class UnscentedKalmanFilter:
    """Additive-noise UKF.

    ``fx(points, dt) -> points`` and ``hx(points) -> measurements`` operate on
    batches with one sigma point per row.
    """

    def __init__(self, x0, P0, Q, R, fx, hx, kappa=0.0, H=None, alpha_forget=1.0,
                 adapt_q=False, adapt_r=False, r_min_eig=0.0, gate=None):
        self.x = np.array(x0, dtype=float)
        self.P = np.array(P0, dtype=float)
        self.Q = np.array(Q, dtype=float)
        self.R = np.array(R, dtype=float)
        self.fx, self.hx = fx, hx
        self.kappa = kappa
        self.H = H
        self.alpha_forget = alpha_forget
        self.adapt_q, self.adapt_r = adapt_q, adapt_r
        self.r_min_eig = r_min_eig
        self.gate = gate
        self.x_prior, self.P_prior = self.x.copy(), self.P.copy()
        self.innovation = np.zeros(self.R.shape[0])
        self.residual = np.zeros(self.R.shape[0])
        self.S = self.R.copy()
        self.nis = 0.0
        self.rejected = 0

    def predict(self, dt, **kwargs):
        pts, wm, wc = sigma_points(self.x, self.P, self.kappa)
        prop = self.fx(pts, dt, **kwargs)
        x = wm @ prop
        dx = prop - x
        self.x = x
        self.P = symmetrize((wc[:, None] * dx).T @ dx + self.Q)
        self.x_prior, self.P_prior = self.x.copy(), self.P.copy()
        return self.x

    def update(self, y):
        y = np.asarray(y, dtype=float)
        pts, wm, wc = sigma_points(self.x, self.P, self.kappa)
        Z = self.hx(pts)
        z = wm @ Z
        dz = Z - z
        dx = pts - self.x
        Pzz = (wc[:, None] * dz).T @ dz
        S = symmetrize(Pzz + self.R)
        Pxz = (wc[:, None] * dx).T @ dz
        d = y - z
        Sinv_d = np.linalg.solve(S, d)
        self.innovation, self.S = d, S
        self.nis = float(d @ Sinv_d)
        if self.gate is not None and self.nis > self.gate:
            self.rejected += 1
            log.info("measurement rejected, NIS %.1f above gate %.1f", self.nis, self.gate)
            return False
        K = np.linalg.solve(S, Pxz.T).T
        P_minus = self.P
        self.x = self.x + K @ d
        self.P = symmetrize(self.P - K @ S @ K.T)
        self.residual = y - self.hx(self.x[None, :])[0]
        if self.adapt_q or self.adapt_r:
            if self.H is not None:
                H, Pm = self.H, P_minus
            else:
                # unscented stand-in for H P- H^T
                H, Pm = np.eye(len(z)), Pzz
            Q_new, R_new = adapt_covariances(
                self.Q, self.R, K, d, self.residual, H, Pm, self.alpha_forget, self.r_min_eig
            )
            if self.adapt_q:
                self.Q = Q_new
            if self.adapt_r:
                self.R = R_new
        return True


@dataclass
class UkfConfig:
    kappa: float = 0.0
    Q0: np.ndarray = None
    R0: np.ndarray = None
    P0: np.ndarray = None
    alpha_forget: float = 0.98
    adapt_q: bool = True
    adapt_r: bool = True
    r_min_eig: float = 1e-8
    fd_step: float = 1e-6
    obs_check_period: int = 50
    gate: float | None = None
    # innovation-based convergence flag
    converge_window: float = 1.0
    converge_threshold: float = 18.0

    def __post_init__(self):
        for name, shape in (("Q0", (N_STATE, N_STATE)), ("R0", (NV, NV)), ("P0", (N_STATE, N_STATE))):
            val = getattr(self, name)
            if val is None:
                raise ValueError(f"UkfConfig.{name} is required")
            val = np.asarray(val, dtype=float)
            if val.shape != shape:
                raise ValueError(f"UkfConfig.{name} must be {shape}, got {val.shape}")
            setattr(self, name, val)
        if not 0 < self.alpha_forget <= 1:
            raise ValueError("alpha_forget must lie in (0, 1]")
        if np.linalg.eigvalsh(self.Q0)[0] < -1e-12:
            raise ValueError("Q0 must be positive semi-definite")
        if np.linalg.eigvalsh(self.R0)[0] <= 0:
            raise ValueError("R0 must be positive definite")


@dataclass
class EstimateOutput:
    x_hat: np.ndarray
    P: np.ndarray
    innovation: np.ndarray
    residual: np.ndarray
    nis: float = 0.0
    accepted: bool = True
    converged: bool = False
    obs_singular_values: np.ndarray | None = None

    @property
    def v(self):
        return self.x_hat[SL_V]

    @property
    def tau(self):
        return self.x_hat[SL_TAU]

    @property
    def p(self):
        return self.x_hat[SL_P]


def velocity_dynamics(v, tau, p, euler, tau_r, g=G0, Minv=None):
    """``M^-1 (tau + tau_r - C(v) v - G)`` batched over leading axes."""
    if Minv is None:
        Minv = np.linalg.inv(mass_matrix(p, check=False))
    rhs = tau + tau_r - coriolis_product(v, p) - gravity_wrench(euler, p, g)
    return np.einsum("...ij,...j->...i", Minv, rhs)


def project_params(P, m_min, i_min):
    """Push mass properties back into the physical set; returns (params, n_fixed)."""
    P = np.array(P, dtype=float)
    try:
        np.linalg.cholesky(mass_matrix(P, check=False))
        return P, 0
    except np.linalg.LinAlgError:
        pass
    fixed = 0
    for k in range(P.shape[0]):
        row = P[k]
        try:
            np.linalg.cholesky(mass_matrix(row, check=False))
            continue
        except np.linalg.LinAlgError:
            pass
        fixed += 1
        row[0] = max(row[0], m_min)
        w, V = np.linalg.eigh(inertia_tensor(row))
        I = (V * np.maximum(w, i_min)) @ V.T
        row[1:7] = [I[0, 0], I[1, 1], I[2, 2], -I[0, 2], -I[1, 2], -I[0, 1]]
        for _ in range(30):
            try:
                np.linalg.cholesky(mass_matrix(row, check=False))
                break
            except np.linalg.LinAlgError:
                row[7:10] *= 0.5
        P[k] = row
    return P, fixed


class ConvergenceMonitor:
    """True once the moving-average NIS stays below threshold for a full window."""

    def __init__(self, window_steps, threshold):
        self.buf = deque(maxlen=window_steps)
        self.threshold = threshold
        self.below = 0

    def update(self, nis):
        self.buf.append(nis)
        avg = float(np.mean(self.buf))
        self.below = self.below + 1 if avg < self.threshold else 0
        return self.below >= self.buf.maxlen


class DualEstimator:
    """Joint augmented UKF over ``[v; tau_a; p]``.

    Pose, ``tau_r`` and gravity are treated as known inputs.
    """

    def __init__(self, x0, cfg, dt, tau_r=None, g=G0, m_min=None, i_min=1e-3):
        self.cfg = cfg
        self.dt = dt
        self.tau_r = np.zeros(6) if tau_r is None else np.asarray(tau_r, dtype=float)
        self.g = g
        self.m_min = 0.1 * x0[SL_P][0] if m_min is None else m_min
        self.i_min = i_min
        self.A_tau = gauss_markov_matrix()
        self.H = np.hstack([np.eye(NV), np.zeros((NV, N_STATE - NV))])
        self.ukf = UnscentedKalmanFilter(
            x0, cfg.P0, cfg.Q0, cfg.R0, self._fx, self._hx, kappa=cfg.kappa, H=self.H,
            alpha_forget=cfg.alpha_forget, adapt_q=cfg.adapt_q, adapt_r=cfg.adapt_r,
            r_min_eig=cfg.r_min_eig, gate=cfg.gate,
        )
        self.monitor = ConvergenceMonitor(max(1, int(round(cfg.converge_window / dt))),
                                          cfg.converge_threshold)
        self.projections = 0
        self.resets = 0
        self.steps = 0
        self.pose = np.zeros(6)
        self.last_obs_sv = None

    @staticmethod
    def _hx(pts):
        return pts[:, SL_V]

    def _fx(self, pts, dt, euler):
        pts = pts.copy()
        params, fixed = project_params(pts[:, SL_P], self.m_min, self.i_min)
        if fixed:
            self.projections += fixed
            pts[:, SL_P] = params
        Minv = np.linalg.inv(mass_matrix(params, check=False))
        tau_a0 = pts[:, SL_TAU_A]

        def tau_at(s):
            # exact triple-integrator flow over a sub-step of length s
            tau, z1, z2 = tau_a0[:, :6], tau_a0[:, 6:12], tau_a0[:, 12:]
            return tau + s * z1 + 0.5 * s * s * z2

        def vdot(v, s):
            return velocity_dynamics(v, tau_at(s), params, euler, self.tau_r, self.g, Minv)

        v0 = pts[:, SL_V]
        k1 = vdot(v0, 0.0)
        k2 = vdot(v0 + 0.5 * dt * k1, 0.5 * dt)
        k3 = vdot(v0 + 0.5 * dt * k2, 0.5 * dt)
        k4 = vdot(v0 + dt * k3, dt)
        out = pts
        out[:, SL_V] = v0 + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        z1, z2 = tau_a0[:, 6:12], tau_a0[:, 12:]
        out[:, SL_TAU] = tau_a0[:, :6] + dt * z1 + 0.5 * dt * dt * z2
        out[:, SL_Z1] = z1 + dt * z2
        return out

    @property
    def x(self):
        return self.ukf.x

    @property
    def P(self):
        return self.ukf.P

    def predict(self, pose, dt=None):
        self.pose = np.asarray(pose, dtype=float)
        dt = self.dt if dt is None else dt
        try:
            self.ukf.predict(dt, euler=self.pose[3:])
        except SigmaPointError:
            self._reset()
            self.ukf.predict(dt, euler=self.pose[3:])
        return self.ukf.x

    def update(self, y):
        try:
            accepted = self.ukf.update(y)
        except SigmaPointError:
            self._reset()
            accepted = self.ukf.update(y)
        self.steps += 1
        converged = self.monitor.update(self.ukf.nis)
        sv = None
        if self.cfg.obs_check_period and self.steps % self.cfg.obs_check_period == 0:
            _, sv = observability_matrix(self.ukf.x, self.cfg, self.pose, self.tau_r, self.g)
            self.last_obs_sv = sv
        return EstimateOutput(
            self.ukf.x.copy(), self.ukf.P.copy(), self.ukf.innovation.copy(),
            self.ukf.residual.copy(), self.ukf.nis, accepted, converged, sv,
        )

    def step(self, y, pose, dt=None):
        self.predict(pose, dt)
        return self.update(y)

    def _reset(self):
        self.resets += 1
        log.warning("sigma-point generation failed; resetting covariance to P0")
        self.ukf.P = self.cfg.P0.copy()


def jacobians(x, cfg, pose, tau_r=None, g=G0):
    """Partial derivatives of the velocity dynamics.

    ``df_dtau_a`` is analytic; ``df_dv`` and ``df_dp`` use central
    differences with per-component step ``fd_step * max(|x_i|, 1)``.
    """
    x = np.asarray(x, dtype=float)
    tau_r = np.zeros(6) if tau_r is None else tau_r
    euler = np.asarray(pose)[3:]
    v, tau, p = x[SL_V], x[SL_TAU], x[SL_P]
    Minv = np.linalg.inv(mass_matrix(p))
    df_dtau_a = np.zeros((6, NTAU_A))
    df_dtau_a[:, :6] = Minv

    def f(vv, pp):
        return velocity_dynamics(vv, tau, pp, euler, tau_r, g)

    h = cfg.fd_step
    dv = h * np.maximum(np.abs(v), 1.0)
    # one batched call per block: rows are +h_i then -h_i
    V = np.concatenate([v + np.diag(dv), v - np.diag(dv)])
    fv = f(V, np.broadcast_to(p, (2 * NV, NP)))
    df_dv = ((fv[:NV] - fv[NV:]) / (2 * dv)[:, None]).T
    dp = h * np.maximum(np.abs(p), 1.0)
    Pp = np.concatenate([p + np.diag(dp), p - np.diag(dp)])
    fp = f(np.broadcast_to(v, (2 * NP, NV)), Pp)
    df_dp = ((fp[:NP] - fp[NP:]) / (2 * dp)[:, None]).T
    return df_dv, df_dtau_a, df_dp


def linearized_system(x, cfg, pose, tau_r=None, g=G0, zero_dp=False):
    df_dv, df_dtau_a, df_dp = jacobians(x, cfg, pose, tau_r, g)
    if zero_dp:
        df_dp = np.zeros_like(df_dp)
    A = np.zeros((N_STATE, N_STATE))
    A[SL_V, SL_V] = df_dv
    A[SL_V, SL_TAU_A] = df_dtau_a
    A[SL_V, SL_P] = df_dp
    A[SL_TAU_A, SL_TAU_A] = gauss_markov_matrix()
    C = np.zeros((NV, N_STATE))
    C[:, SL_V] = np.eye(NV)
    return A, C


def observability(A, C, balance=True):
    """Stacked ``[C; CA; ...; CA^(n-1)]`` and its singular values.

    With ``balance`` each block row is scaled to unit Frobenius norm.
    """
    n = A.shape[0]
    blocks = []
    blk = C.copy()
    for _ in range(n):
        if balance:
            nrm = np.linalg.norm(blk)
            blocks.append(blk / nrm if nrm > 0 else blk)
        else:
            blocks.append(blk)
        blk = blk @ A
    O = np.vstack(blocks)
    return O, np.linalg.svd(O, compute_uv=False)


def observability_matrix(x, cfg, pose, tau_r=None, g=G0, zero_dp=False):
    A, C = linearized_system(x, cfg, pose, tau_r, g, zero_dp)
    return observability(A, C)


def numerical_rank(sv, rtol=None, n_rows=None):
    """Count of singular values above ``rtol * max(sv)``.

    The default tolerance is ``max(n_rows, n) * eps`` as in ``matrix_rank``;
    ``n_rows`` defaults to the ``NV * n`` rows of a stacked observability matrix.
    """
    sv = np.asarray(sv)
    if rtol is None:
        n = max(sv.size, 1)
        rtol = max(n_rows or NV * n, n) * np.finfo(float).eps
    return int(np.sum(sv > rtol * sv.max()))


def build_covariance(block_std, param_std):
    """Diagonal 34x34 covariance from per-block standard deviations.

    ``block_std`` maps ``v``, ``tau``, ``zeta1``, ``zeta2`` to a scalar or
    6-vector; ``param_std`` is a 10-vector.
    """
    diag = np.concatenate(
        [np.broadcast_to(np.asarray(block_std[k], dtype=float), (6,)) for k in ("v", "tau", "zeta1", "zeta2")]
        + [np.asarray(param_std, dtype=float).reshape(NP)]
    )
    return np.diag(diag ** 2)
