"""Decision factor: model/estimate blending, windowed cost and rate-limited motion."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .airframe import G0, coriolis_matrix, coriolis_product, gravity_wrench, mass_matrix
from .controller import AllocationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSide:
    """One side of the blend: mass properties plus the affine force-moment model."""

    params: np.ndarray
    B: np.ndarray
    D: np.ndarray
    tau0: np.ndarray

    def __post_init__(self):
        for name in ("params", "B", "D", "tau0"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))


@dataclass(frozen=True)
class BlendedModel:
    params: np.ndarray
    B: np.ndarray
    D: np.ndarray
    tau0: np.ndarray
    lambda_used: float
    g: float = G0
    M: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "M", mass_matrix(self.params))

    def C(self, v):
        return coriolis_matrix(v, self.params)

    def G(self, euler):
        return gravity_wrench(euler, self.params, self.g)

    @classmethod
    def from_side(cls, side, lam, g=G0):
        return cls(side.params, side.B, side.D, side.tau0, float(lam), g)


def blend_params(p_model, p_est, lam):
    """Convex combination in ``(m, I, m*rho)`` coordinates.

    M, C and G are linear in these coordinates, so the matrices built from the
    result equal the element-wise blend of the two sides' matrices.
    """
    p_model = np.asarray(p_model, float)
    p_est = np.asarray(p_est, float)
    out = (1 - lam) * p_model + lam * p_est
    h = (1 - lam) * p_model[..., :1] * p_model[..., 7:10] + lam * p_est[..., :1] * p_est[..., 7:10]
    out[..., 7:10] = h / out[..., :1]
    return out


def blend(model_side, estimate_side, lam, g=G0, min_step=1e-3):
    """Blend the two sides at ``lam``; backs ``lam`` off toward the model if M loses definiteness."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    lam = float(lam)
    while True:
        if lam == 0.0:
            return BlendedModel.from_side(model_side, 0.0, g)
        if lam == 1.0:
            side = estimate_side
            try:
                return BlendedModel.from_side(side, 1.0, g)
            except np.linalg.LinAlgError:
                pass
        else:
            params = blend_params(model_side.params, estimate_side.params, lam)
            try:
                return BlendedModel(
                    params,
                    (1 - lam) * model_side.B + lam * estimate_side.B,
                    (1 - lam) * model_side.D + lam * estimate_side.D,
                    (1 - lam) * model_side.tau0 + lam * estimate_side.tau0,
                    lam,
                    g,
                )
            except np.linalg.LinAlgError:
                pass
        log.warning("blended mass matrix not positive definite at lambda=%.3f; backing off", lam)
        lam = 0.0 if lam < min_step else 0.5 * lam


@dataclass(frozen=True)
class CostConfig:
    H_l: np.ndarray = field(default_factory=lambda: np.eye(6))
    Q_l: np.ndarray = field(default_factory=lambda: np.eye(6))
    t_p: float = 2.0
    gamma_step: float = 0.05
    rate_limit: float = 0.25
    lag: float = 1.5
    update_period: float = 0.25
    fd_h: float = 0.02
    grad_tol_rel: float = 0.05
    grad_tol_abs: float = 1e-9
    rollout_dt: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "H_l", np.asarray(self.H_l, float))
        object.__setattr__(self, "Q_l", np.asarray(self.Q_l, float))
        for name in ("H_l", "Q_l"):
            if np.linalg.eigvalsh(getattr(self, name))[0] < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")
        if self.t_p <= 0 or self.rate_limit <= 0:
            raise ValueError("t_p and rate_limit must be positive")


@dataclass(frozen=True)
class WindowHistory:
    """Recorded closed-loop window replayed by the cost rollout.

    ``v0`` is the velocity at the window start; the per-sample arrays hold
    the desired motion, the attitude, and the additive actuator signal
    (excitation plus scripted disturbances).
    """

    t: np.ndarray
    v0: np.ndarray
    v_d: np.ndarray
    vdot_d: np.ndarray
    pose: np.ndarray
    delta_add: np.ndarray


@dataclass(frozen=True)
class RolloutContext:
    gains: object
    lower: np.ndarray
    upper: np.ndarray
    eps_delta: float
    tau_r: np.ndarray
    g: float = G0


def trapezoid(y, x):
    y = np.asarray(y, float)
    x = np.asarray(x, float)
    if len(x) < 2:
        return np.zeros(y.shape[1:])
    dx = np.diff(x)
    return np.tensordot(dx, 0.5 * (y[1:] + y[:-1]), axes=(0, 0))


def cost_from_errors(v_err, t, cfg):
    """``J = 1/2 e(t0)^T H e(t0) + 1/2 int e^T Q e dt`` for errors shaped (k, ..., 6)."""
    v_err = np.asarray(v_err, float)
    terminal = 0.5 * np.einsum("...i,ij,...j->...", v_err[-1], cfg.H_l, v_err[-1])
    running = 0.5 * np.einsum("k...i,ij,k...j->k...", v_err, cfg.Q_l, v_err)
    return terminal + trapezoid(running, t)


def _pseudo_inverses(Bs, eps_delta):
    out = np.zeros((Bs.shape[0], Bs.shape[2], Bs.shape[1]))
    for i, B in enumerate(Bs):
        keep = np.linalg.norm(B, axis=0) > eps_delta
        Bk = B[:, keep]
        BtB = Bk.T @ Bk
        if not keep.any() or np.linalg.cond(BtB) > 1e12:
            raise AllocationError("blended B is rank deficient")
        out[i][keep] = np.linalg.solve(BtB, Bk.T)
    return out


def rollout_errors(history, lams, model_side, estimate_side, ctx, cfg, plant_side=None):
    """Replay the window for several lambdas at once; returns errors (k, L, 6).

    The plant is ``plant_side`` (default: the estimate side). A probe whose
    rollout turns non-finite is reported with NaN errors.
    """
    lams = np.atleast_1d(np.asarray(lams, float))
    plant = estimate_side if plant_side is None else plant_side
    models = [blend(model_side, estimate_side, float(l), ctx.g) for l in lams]
    P_l = np.stack([m.params for m in models])
    M_l = np.stack([m.M for m in models])
    D_l = np.stack([m.D for m in models])
    t0_l = np.stack([m.tau0 for m in models])
    pinv = _pseudo_inverses(np.stack([m.B for m in models]), ctx.eps_delta)
    Minv_p = np.linalg.inv(mass_matrix(plant.params))
    L = len(lams)

    # resample the recorded window on the coarser rollout grid
    t_rec = history.t
    n_sub = max(1, int(round(cfg.rollout_dt / max(np.median(np.diff(t_rec)), 1e-12)))) if len(t_rec) > 1 else 1
    idx = np.arange(0, len(t_rec), n_sub)
    if idx[-1] != len(t_rec) - 1:
        idx = np.append(idx, len(t_rec) - 1)
    t = t_rec[idx]
    gains = ctx.gains

    def plant_vdot(v, delta, euler):
        tau = plant.tau0 + delta @ plant.B.T + v @ plant.D.T
        rhs = tau + ctx.tau_r - coriolis_product(v, plant.params) - gravity_wrench(euler, plant.params, ctx.g)
        return rhs @ Minv_p.T

    v = np.broadcast_to(history.v0, (L, 6)).copy()
    errs = np.empty((len(idx), L, 6))
    with np.errstate(all="ignore"):
        for k, i in enumerate(idx):
            v_d, vdot_d, pose = history.v_d[i], history.vdot_d[i], history.pose[i]
            e = v - v_d
            errs[k] = e
            if k == len(idx) - 1:
                break
            euler = pose[3:]
            tau_c = (
                gravity_wrench(euler, P_l, ctx.g)
                + coriolis_product(v, P_l, v_d)
                + M_l @ vdot_d
                - gains.Gamma * e
                - t0_l
                - np.einsum("lij,lj->li", D_l, v)
                - gains.chi * np.tanh(e / gains.epsilon)
                - ctx.tau_r
            )
            delta = np.einsum("lij,lj->li", pinv, tau_c) + history.delta_add[i]
            delta = np.clip(delta, ctx.lower, ctx.upper)
            h = t[k + 1] - t[k]
            k1 = plant_vdot(v, delta, euler)
            k2 = plant_vdot(v + 0.5 * h * k1, delta, euler)
            k3 = plant_vdot(v + 0.5 * h * k2, delta, euler)
            k4 = plant_vdot(v + h * k3, delta, euler)
            v = v + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = ~np.all(np.isfinite(v), axis=1) | (np.abs(v).max(axis=1) > 1e4)
            v[bad] = np.nan
    return errs, t


def window_cost(history, lams, model_side, estimate_side, ctx, cfg, plant_side=None):
    """Cost of each lambda in ``lams``; unstable rollouts cost ``+inf``."""
    errs, t = rollout_errors(history, lams, model_side, estimate_side, ctx, cfg, plant_side)
    J = cost_from_errors(errs, t, cfg)
    return np.where(np.isfinite(J), J, np.inf)


def descend(lambda_prev, cost, cfg):
    """One normalised steepest-descent step on ``cost(lams) -> costs``.

    Uses a central difference of width ``2 fd_h`` (one-sided at the bounds).
    Returns ``(lambda_new, (lam_lo, lam_hi), (J_lo, J_hi))``.
    """
    lo = max(0.0, lambda_prev - cfg.fd_h)
    hi = min(1.0, lambda_prev + cfg.fd_h)
    J_lo, J_hi = (float(j) for j in cost(np.array([lo, hi])))
    probes = ((lo, hi), (J_lo, J_hi))
    if not np.isfinite(J_lo) and not np.isfinite(J_hi):
        return lambda_prev, probes
    if np.isfinite(J_lo) and np.isfinite(J_hi):
        diff = J_hi - J_lo
        if abs(diff) <= cfg.grad_tol_rel * max(abs(J_lo), abs(J_hi)) + cfg.grad_tol_abs:
            return lambda_prev, probes
        direction = np.sign(diff)
    else:
        direction = 1.0 if not np.isfinite(J_hi) else -1.0
    return float(np.clip(lambda_prev - cfg.gamma_step * direction, 0.0, 1.0)), probes


@dataclass(frozen=True)
class DecisionState:
    lambda_actual: float = 0.0
    lambda_opt: float = 0.0
    lambda_sel: float | None = None
    mode: str = "auto"
    last_update_t: float = 0.0
    last_switch_t: float = -np.inf
    converged_since: float | None = None

    def __post_init__(self):
        for name in ("lambda_actual", "lambda_opt"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name}={val} outside [0, 1]")
        if self.mode not in ("auto", "manual"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def target(self):
        return self.lambda_sel if self.mode == "manual" else self.lambda_opt


def manual_override(state, lambda_sel, t=None):
    """Pilot selection; ``None`` releases back to automatic."""
    t = state.last_update_t if t is None else t
    if lambda_sel is None:
        return replace(state, mode="auto", lambda_sel=None, last_switch_t=t)
    if not 0.0 <= lambda_sel <= 1.0:
        raise ValueError(f"selected lambda {lambda_sel} outside [0, 1]")
    return replace(state, mode="manual", lambda_sel=float(lambda_sel), last_switch_t=t)


def _limited_step(current, target, max_step):
    new = current + float(np.clip(target - current, -max_step, max_step))
    new = min(1.0, max(0.0, new))
    # guard against the addition rounding past the limit
    while abs(new - current) > max_step:
        new = np.nextafter(new, current)
    return float(new)


def advance_lambda(state, t, dt, cfg, converged=True):
    """Move ``lambda_actual`` toward the active target under the rate limit and lag.

    In automatic mode motion waits ``lag`` seconds after the estimator's
    convergence flag rose; in both modes it waits ``lag`` after a mode switch.
    """
    since = state.converged_since
    if converged and since is None:
        since = t
    elif not converged:
        since = None
    after_switch = t - state.last_switch_t >= cfg.lag
    if state.mode == "manual":
        ready = after_switch
    else:
        ready = after_switch and since is not None and t - since >= cfg.lag
    lam = state.lambda_actual
    if ready:
        lam = _limited_step(lam, state.target, cfg.rate_limit * dt)
    return replace(state, lambda_actual=lam, last_update_t=t, converged_since=since)
