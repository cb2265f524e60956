"""Batch (Koopman) and recursive least-squares fits of the force-moment regressor.

The regression is ``tau_hat = P [delta; v; 1]`` with ``P = [B | D | tau0]``
of shape 6x11.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

N_DELTA, N_V = 4, 6
N_REG = N_DELTA + N_V + 1


class IllConditionedFit(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Sample:
    tau_hat: np.ndarray
    delta: np.ndarray
    v: np.ndarray
    t: float


class SampleWindow:
    """Ring buffer of the most recent ``capacity`` samples."""

    def __init__(self, capacity=400):
        if capacity < N_REG:
            raise ValueError(f"window capacity must be at least {N_REG}")
        self.capacity = capacity
        self._buf = deque(maxlen=capacity)

    def append(self, tau_hat, delta, v, t):
        if self._buf and t < self._buf[-1].t:
            raise ValueError("samples must be appended in time order")
        self._buf.append(Sample(np.array(tau_hat, float), np.array(delta, float),
                                np.array(v, float), float(t)))

    def __len__(self):
        return len(self._buf)

    @property
    def ready(self):
        return len(self._buf) >= N_REG

    @property
    def t_last(self):
        return self._buf[-1].t if self._buf else None

    def samples(self):
        return list(self._buf)

    def clear(self):
        self._buf.clear()


class Prefilter:
    """Cascade of identical first-order low-pass stages applied per channel.

    Filtering ``tau_hat`` and the regressors with the same linear filter keeps
    the affine relation between them intact while removing the band where
    the pseudo-observation lags the true force-moment.
    """

    def __init__(self, cutoff, dt, order=2):
        self.a = float(np.exp(-cutoff * dt)) if cutoff > 0 else 0.0
        self.order = order
        self.state = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.a == 0.0:
            return x.copy()
        if self.state is None:
            self.state = [x.copy() for _ in range(self.order)]
        u = x
        for i in range(self.order):
            self.state[i] = self.a * self.state[i] + (1.0 - self.a) * u
            u = self.state[i]
        return u.copy()


def regressor(delta, v):
    return np.concatenate([np.asarray(delta, float), np.asarray(v, float), [1.0]])


def build_stacks(window):
    """``(T_hat, Y)`` with samples as columns; ``Y`` rows are ``[delta; v; 1]``."""
    samples = window.samples() if isinstance(window, SampleWindow) else list(window)
    T_hat = np.column_stack([s.tau_hat for s in samples])
    Y = np.column_stack([regressor(s.delta, s.v) for s in samples])
    rank = np.linalg.matrix_rank(Y)
    if rank < N_REG:
        log.debug("regressor stack has rank %d < %d (insufficient excitation)", rank, N_REG)
    return T_hat, Y


@dataclass(frozen=True)
class RegressorEstimate:
    P_hat: np.ndarray
    condition_number: float
    fit_residual_rms: float
    ridge: float = 0.0
    t: float | None = None

    @property
    def B(self):
        return self.P_hat[:, :N_DELTA]

    @property
    def D(self):
        return self.P_hat[:, N_DELTA:N_DELTA + N_V]

    @property
    def tau0(self):
        return self.P_hat[:, -1]

    def predict(self, delta, v):
        return self.P_hat @ regressor(delta, v)


def koopman_fit(T_hat, Y, ridge=None, cond_threshold=1e8, cond_ceiling=1e14, t=None,
                prior=None, prior_weight=0.0):
    """``P = T Y^T (Y Y^T + ridge I)^-1``.

    The regressor rows are equilibrated to unit RMS first (airspeed and the
    constant row would otherwise swamp the small deflection rows); the
    condition checks and the ridge act on the equilibrated Gram matrix.
    ``ridge=None`` applies ``1e-8 trace(YY^T)/11`` only when ``cond(YY^T)``
    exceeds ``cond_threshold``.

    With ``prior`` (6x11) and ``prior_weight > 0`` the deflection and
    velocity columns are shrunk toward ``prior`` (ridge regression in
    standardised regressors: ``prior_weight * m`` times each row's variance);
    the constant column is left free.
    """
    T_hat = np.asarray(T_hat, float)
    Y = np.asarray(Y, float)
    m = Y.shape[1]
    scale = np.sqrt(np.mean(Y ** 2, axis=1))
    scale[scale == 0] = 1.0
    Ys = Y / scale[:, None]
    G = Ys @ Ys.T
    cond = float(np.linalg.cond(G))
    if cond > cond_ceiling:
        raise IllConditionedFit(f"cond(YY^T) = {cond:.3g} exceeds ceiling {cond_ceiling:.3g}")
    if ridge is None:
        ridge = 1e-8 * np.trace(G) / Y.shape[0] if cond > cond_threshold else 0.0
    lhs = G + ridge * np.eye(Y.shape[0])
    rhs = Ys @ T_hat.T
    if prior is not None and prior_weight > 0:
        w = prior_weight * m * np.var(Y, axis=1) / scale ** 2
        w[-1] = 0.0
        lhs = lhs + np.diag(w)
        rhs = rhs + w[:, None] * (np.asarray(prior, float) * scale).T
    P_hat = np.linalg.solve(lhs, rhs).T / scale
    resid = T_hat - P_hat @ Y
    rms = float(np.sqrt(np.mean(resid ** 2))) if resid.size else 0.0
    return RegressorEstimate(P_hat, cond, rms, float(ridge), t)


def fit_window(window, **kwargs):
    """Batch fit over the window's samples; keyword arguments go to :func:`koopman_fit`."""
    T_hat, Y = build_stacks(window)
    return koopman_fit(T_hat, Y, t=window.t_last, **kwargs)


@dataclass
class RlsState:
    """RLS weights with the information matrix kept in square-root form.

    ``R`` is upper triangular with ``R^T R`` the (forgetting-weighted)
    information matrix, so ``P_cov = (R^T R)^-1``. Updating ``R`` by QR
    instead of propagating ``P_cov`` keeps the recursion equal to the batch
    solution to rounding even when the prior is negligibly weak.
    """

    theta: np.ndarray
    R: np.ndarray
    forgetting: float = 1.0

    @classmethod
    def initial(cls, p0=1e6, forgetting=1.0, theta=None):
        if not 0 < forgetting <= 1:
            raise ValueError("forgetting factor must lie in (0, 1]")
        if p0 <= 0:
            raise ValueError("p0 must be positive")
        theta = np.zeros((N_REG, 6)) if theta is None else np.array(theta, float)
        return cls(theta, np.eye(N_REG) / np.sqrt(p0), forgetting)

    @property
    def P_cov(self):
        Rinv = np.linalg.inv(self.R)
        return Rinv @ Rinv.T

    @property
    def P_hat(self):
        return self.theta.T


def rls_update(state, tau_hat, delta, v):
    """Exponentially weighted RLS step shared by all six output channels."""
    phi = regressor(delta, v)
    s = np.sqrt(state.forgetting)
    A = np.empty((N_REG + 1, N_REG + 6))
    A[:N_REG, :N_REG] = s * state.R
    A[:N_REG, N_REG:] = s * (state.R @ state.theta)
    A[N_REG, :N_REG] = phi
    A[N_REG, N_REG:] = tau_hat
    Rf = np.linalg.qr(A, mode="r")
    R = Rf[:N_REG, :N_REG]
    theta = np.linalg.solve(R, Rf[:N_REG, N_REG:])
    return RlsState(theta, R, state.forgetting)


def estimate_extra_term(window, estimate):
    """Per-sample residual ``tau_hat - P_hat [delta; v; 1]`` (6 x m) and sample times."""
    T_hat, Y = build_stacks(window)
    times = np.array([s.t for s in (window.samples() if isinstance(window, SampleWindow) else window)])
    P_hat = estimate.P_hat if hasattr(estimate, "P_hat") else np.asarray(estimate)
    return T_hat - P_hat @ Y, times


def residual_rms(window, P_hat):
    r, _ = estimate_extra_term(window, P_hat)
    return float(np.sqrt(np.mean(r ** 2)))
