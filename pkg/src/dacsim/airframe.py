"""Rigid-body airframe with centre-of-gravity offset.

Equations are written about a body reference point that may differ from the
centre of mass by ``rho``::

    M v' + C(v) v + G(eta) = tau + tau_r

with ``v = [u, v, w, p, q, r]`` and ``eta = [X, Y, Z, phi, theta, psi]``.
All functions broadcast over leading axes so that the estimator can push a
whole batch of sigma points through the same code path.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

G0 = 32.174  # ft/s^2
LB_PER_SLUG = G0

PARAM_NAMES = ("m", "Ixx", "Iyy", "Izz", "Ixz", "Iyz", "Ixy", "rho_x", "rho_y", "rho_z")
N_PARAMS = len(PARAM_NAMES)
GIMBAL_LIMIT = np.pi / 2 - 0.01
YAW_ROW = 5
RUDDER = 1


class UnphysicalParamsError(ValueError):
    """Mass properties that do not give a positive-definite mass matrix."""


class NonFiniteStateError(FloatingPointError):
    """NaN/Inf reached the integrator."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class GimbalLockError(FloatingPointError):
    pass


def mass_to_slug(value, unit="slug"):
    unit = unit.lower()
    if unit in ("slug", "slugs"):
        return float(value)
    if unit in ("lb", "lbs", "lbm"):
        return float(value) / LB_PER_SLUG
    raise ValueError(f"unknown mass unit {unit!r} (expected 'slug' or 'lb')")


def skew(a):
    """Cross-product matrix: ``skew(a) @ b == cross(a, b)``."""
    a = np.asarray(a, dtype=float)
    out = np.zeros(a.shape[:-1] + (3, 3))
    out[..., 0, 1] = -a[..., 2]
    out[..., 0, 2] = a[..., 1]
    out[..., 1, 0] = a[..., 2]
    out[..., 1, 2] = -a[..., 0]
    out[..., 2, 0] = -a[..., 1]
    out[..., 2, 1] = a[..., 0]
    return out


def cross(a, b):
    """Broadcasting 3-vector cross product (cheaper than ``np.cross`` for small arrays)."""
    if np.ndim(a) == 1 and np.ndim(b) == 1:
        # single vectors: scalar arithmetic avoids the per-slice array overhead
        a1, a2, a3 = a.tolist()
        b1, b2, b3 = b.tolist()
        return np.array([a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1])
    a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2]
    b1, b2, b3 = b[..., 0], b[..., 1], b[..., 2]
    c1 = a2 * b3 - a3 * b2
    out = np.empty(np.shape(c1) + (3,))
    out[..., 0] = c1
    out[..., 1] = a3 * b1 - a1 * b3
    out[..., 2] = a1 * b2 - a2 * b1
    return out


@dataclass(frozen=True)
class InertialParams:
    m: float
    Ixx: float
    Iyy: float
    Izz: float
    Ixz: float = 0.0
    Iyz: float = 0.0
    Ixy: float = 0.0
    rho: np.ndarray = field(default_factory=lambda: np.zeros(3))
    damage_applied: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float).reshape(3))

    @property
    def vector(self):
        return np.array(
            [self.m, self.Ixx, self.Iyy, self.Izz, self.Ixz, self.Iyz, self.Ixy, *self.rho]
        )

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(*x[:7].tolist(), rho=x[7:10].copy())

    @property
    def inertia(self):
        return inertia_tensor(self.vector)

    def validate(self):
        if not np.all(np.isfinite(self.vector)):
            raise UnphysicalParamsError("non-finite inertial parameters")
        if self.m <= 0:
            raise UnphysicalParamsError(f"mass must be positive, got {self.m}")
        if np.linalg.eigvalsh(self.inertia)[0] <= 0:
            raise UnphysicalParamsError("inertia tensor is not positive definite")
        mass_matrix(self)
        return self


def _pvec(p):
    if isinstance(p, InertialParams):
        return p.vector
    return np.asarray(p, dtype=float)


def inertia_tensor(p):
    """3x3 inertia tensor; products of inertia use the ``-Ixy`` sign convention."""
    p = _pvec(p)
    out = np.empty(p.shape[:-1] + (3, 3))
    out[..., 0, 0] = p[..., 1]
    out[..., 1, 1] = p[..., 2]
    out[..., 2, 2] = p[..., 3]
    out[..., 0, 2] = out[..., 2, 0] = -p[..., 4]
    out[..., 1, 2] = out[..., 2, 1] = -p[..., 5]
    out[..., 0, 1] = out[..., 1, 0] = -p[..., 6]
    return out


def mass_matrix(p, check=True):
    """6x6 mass-inertia matrix ``[[m I, -m S(rho)], [m S(rho), I_M]]``."""
    p = _pvec(p)
    m = p[..., 0][..., None, None]
    Srho = skew(p[..., 7:10])
    out = np.zeros(p.shape[:-1] + (6, 6))
    out[..., :3, :3] = m * np.eye(3)
    out[..., :3, 3:] = -m * Srho
    out[..., 3:, :3] = m * Srho
    out[..., 3:, 3:] = inertia_tensor(p)
    if check:
        try:
            np.linalg.cholesky(out)
        except np.linalg.LinAlgError as exc:
            raise UnphysicalParamsError("mass matrix is not positive definite") from exc
    return out


def coriolis_matrix(v, p):
    """Coriolis/centripetal matrix arranged so that ``C + C^T = 0``."""
    v = np.asarray(v, dtype=float)
    p = _pvec(p)
    V, w = v[..., :3], v[..., 3:]
    rho = p[..., 7:10]
    m = p[..., 0][..., None, None]
    I = inertia_tensor(p)
    w_x_rho = cross(w, rho)
    V_x_rho = cross(V, rho)
    Iw = np.einsum("...ij,...j->...i", I, w)
    shape = np.broadcast_shapes(v.shape[:-1], p.shape[:-1])
    out = np.zeros(shape + (6, 6))
    off = -m * skew(w_x_rho)
    out[..., :3, :3] = m * skew(w)
    out[..., :3, 3:] = off
    out[..., 3:, :3] = off
    out[..., 3:, 3:] = -skew(Iw) + m * skew(V_x_rho)
    return out


def coriolis_product(v, p, u=None):
    """``C(v) @ u`` (``u`` defaults to ``v``) without forming the matrix."""
    v = np.asarray(v, dtype=float)
    p = _pvec(p)
    u = v if u is None else np.asarray(u, dtype=float)
    V, w = v[..., :3], v[..., 3:]
    uL, uA = u[..., :3], u[..., 3:]
    rho = p[..., 7:10]
    m = p[..., :1]
    w_x_rho = cross(w, rho)
    Iw = np.einsum("...ij,...j->...i", inertia_tensor(p), w)
    out = np.empty(np.broadcast_shapes(v.shape, u.shape, p.shape[:-1] + (6,)))
    out[..., :3] = m * (cross(w, uL) - cross(w_x_rho, uA))
    out[..., 3:] = cross(m * cross(V, rho) - Iw, uA) - m * cross(w_x_rho, uL)
    return out


def weight_vector(euler, m, g=G0):
    phi, theta = euler[..., 0], euler[..., 1]
    mg = m * g
    return np.stack(
        [-mg * np.sin(theta), mg * np.cos(theta) * np.sin(phi), mg * np.cos(theta) * np.cos(phi)],
        axis=-1,
    )


def gravity_wrench(euler, p, g=G0):
    """``G = [-W; -rho x W]`` for body attitude ``euler = (phi, theta, psi)``."""
    euler = np.asarray(euler, dtype=float)
    p = _pvec(p)
    W = weight_vector(euler, p[..., 0], g)
    return np.concatenate([-W, -cross(p[..., 7:10], W)], axis=-1)


@dataclass(frozen=True)
class RegressorSet:
    """Affine force-moment model ``tau = tau0 + B delta + D v``.

    ``B_neg`` optionally replaces columns of ``B`` for negative deflections.
    """

    B: np.ndarray
    D: np.ndarray
    tau0: np.ndarray
    tauR: np.ndarray = field(default_factory=lambda: np.zeros(6))
    B_neg: np.ndarray | None = None

    def __post_init__(self):
        for name, shape in (("B", (6, None)), ("D", (6, 6))):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[0] != 6 or (shape[1] and arr.shape[1] != shape[1]):
                raise ValueError(f"{name} has shape {arr.shape}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "tau0", np.asarray(self.tau0, dtype=float).reshape(6))
        object.__setattr__(self, "tauR", np.asarray(self.tauR, dtype=float).reshape(6))
        if self.B_neg is not None:
            object.__setattr__(self, "B_neg", np.asarray(self.B_neg, dtype=float).reshape(self.B.shape))
        for arr in (self.B, self.D, self.tau0, self.tauR):
            if not np.all(np.isfinite(arr)):
                raise ValueError("regressor set contains non-finite entries")

    @property
    def column_norms(self):
        return np.linalg.norm(self.B, axis=0)

    def effective_B(self, delta):
        if self.B_neg is None:
            return self.B
        return np.where(np.asarray(delta)[None, :] < 0, self.B_neg, self.B)


@dataclass(frozen=True)
class ExtraTermSpec:
    """``amplitude * sin(frequency_gain * r) * delta_scale * delta_ru`` on one wrench row, ramped in.

    ``delta_scale`` converts the stored deflection (rad) to the unit the
    amplitude is quoted per, e.g. ``180 / pi`` for degrees.
    """

    amplitude: float = 5.0
    frequency_gain: float = 10.0
    target_channel: int = YAW_ROW
    ramp_time_constant: float = 2.0
    activation_time: float = 30.0
    delta_channel: int = RUDDER
    delta_scale: float = 1.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("extra-term amplitude must be non-negative")
        if self.ramp_time_constant <= 0:
            raise ValueError("ramp_time_constant must be positive")

    def value(self, delta, v, t):
        out = np.zeros(6)
        if t < self.activation_time:
            return out
        ramp = 1.0 - np.exp(-(t - self.activation_time) / self.ramp_time_constant)
        r = v[5]
        out[self.target_channel] = (
            ramp * self.amplitude * np.sin(self.frequency_gain * r) * self.delta_scale * delta[self.delta_channel]
        )
        return out


def generalized_force(delta, v, t, truth, extra=None):
    delta = np.asarray(delta, dtype=float)
    v = np.asarray(v, dtype=float)
    tau = truth.tau0 + truth.effective_B(delta) @ delta + truth.D @ v
    if extra is not None:
        tau = tau + extra.value(delta, v, t)
    return tau


def euler_kinematics(v, pose):
    """Earth-frame position rate and Euler-angle rates from body velocities."""
    phi, theta, psi = pose[3], pose[4], pose[5]
    if abs(theta) >= GIMBAL_LIMIT:
        raise GimbalLockError(f"pitch angle {theta:.4f} rad reached the gimbal guard")
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cps, sps = np.cos(psi), np.sin(psi)
    R = np.array(
        [
            [cth * cps, sph * sth * cps - cph * sps, cph * sth * cps + sph * sps],
            [cth * sps, sph * sth * sps + cph * cps, cph * sth * sps - sph * cps],
            [-sth, sph * cth, cph * cth],
        ]
    )
    E = np.array(
        [
            [1.0, sph * sth / cth, cph * sth / cth],
            [0.0, cph, -sph],
            [0.0, sph / cth, cph / cth],
        ]
    )
    return np.concatenate([R @ v[:3], E @ v[3:]])


def wrap_angles(pose):
    pose = np.array(pose, dtype=float)
    pose[3:] = np.pi - np.mod(np.pi - pose[3:], 2 * np.pi)
    return pose


def dynamics_rhs(v, pose, tau, p, tauR=None, g=G0, M=None):
    """Return ``(vdot, posedot)`` for the full rigid body.

    ``M`` may be passed in when the caller already holds ``mass_matrix(p)``.
    """
    v = np.asarray(v, dtype=float)
    if M is None:
        M = mass_matrix(p)
    rhs = np.asarray(tau, dtype=float) - coriolis_product(v, p) - gravity_wrench(pose[3:], p, g)
    if tauR is not None:
        rhs = rhs + tauR
    vdot = np.linalg.solve(M, rhs)
    return vdot, euler_kinematics(v, pose)


def rk4_step(fun, t, x, dt):
    """One classical Runge-Kutta step of ``x' = fun(t, x)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = fun(t, x)
    k2 = fun(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = fun(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = fun(t + dt, x + dt * k3)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteStateError(
            f"non-finite state after RK4 step at t={t:.6f}",
            dump={"t": t, "x": np.asarray(x).tolist(), "dt": dt},
        )
    return out


@dataclass(frozen=True)
class PlantState:
    v: np.ndarray
    pose: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(6))
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=float).reshape(6))

    @property
    def x(self):
        return np.concatenate([self.v, self.pose])


class Airframe:
    """Truth plant: mass properties, force-moment model and optional extra term."""

    def __init__(self, params, regressors, extra=None, g=G0, airspeed_ceiling=500.0):
        self.params = params
        self.regressors = regressors
        self.extra = extra
        self.g = g
        self.airspeed_ceiling = airspeed_ceiling

    @property
    def params(self):
        return self._params

    @params.setter
    def params(self, value):
        self._params = value.validate()
        self._pvec = value.vector
        self._M = mass_matrix(self._pvec)

    def wrench(self, delta, v, t):
        return generalized_force(delta, v, t, self.regressors, self.extra)

    def rhs(self, t, x, delta):
        v, pose = x[:6], x[6:]
        tau = self.wrench(delta, v, t)
        vdot, posedot = dynamics_rhs(v, pose, tau, self._pvec, self.regressors.tauR, self.g, self._M)
        return np.concatenate([vdot, posedot])

    def step(self, state, delta, dt):
        x = rk4_step(lambda t, x: self.rhs(t, x, delta), state.t, state.x, dt)
        if np.linalg.norm(x[:3]) > self.airspeed_ceiling:
            raise NonFiniteStateError(
                f"airspeed {np.linalg.norm(x[:3]):.1f} ft/s above ceiling",
                dump={"t": state.t, "x": x.tolist()},
            )
        return PlantState(x[:6], wrap_angles(x[6:]), state.t + dt)

    def apply_damage(self, damage):
        self.params = apply_damage(self.params, damage)
        if damage.delta_B is not None:
            self.regressors = replace(self.regressors, B=self.regressors.B + damage.delta_B)


@dataclass(frozen=True)
class DamageCase:
    """Additive mass/inertia deltas, a replacement CG offset and optional B change.

    ``delta_I`` is ordered ``(Ixx, Iyy, Izz, Ixz, Iyz, Ixy)``.
    """

    id: str
    delta_m: float = 0.0
    delta_I: tuple = (0.0,) * 6
    new_rho: np.ndarray | None = None
    delta_B: np.ndarray | None = None

    def __post_init__(self):
        if len(self.delta_I) != 6:
            raise ValueError("delta_I needs six entries")
        object.__setattr__(self, "delta_I", tuple(float(x) for x in self.delta_I))
        if self.new_rho is not None:
            object.__setattr__(self, "new_rho", np.asarray(self.new_rho, dtype=float).reshape(3))
        if self.delta_B is not None:
            object.__setattr__(self, "delta_B", np.asarray(self.delta_B, dtype=float))


def apply_damage(p, d):
    """Apply ``d`` to ``p``. Repeated application of the same case warns."""
    if d.id in p.damage_applied:
        warnings.warn(
            f"damage case {d.id!r} applied twice; deltas accumulate", RuntimeWarning, stacklevel=2
        )
    dI = d.delta_I
    out = InertialParams(
        m=p.m + d.delta_m,
        Ixx=p.Ixx + dI[0],
        Iyy=p.Iyy + dI[1],
        Izz=p.Izz + dI[2],
        Ixz=p.Ixz + dI[3],
        Iyz=p.Iyz + dI[4],
        Ixy=p.Ixy + dI[5],
        rho=p.rho if d.new_rho is None else d.new_rho,
        damage_applied=p.damage_applied + (d.id,),
    )
    return out.validate()


def trim_tau0(p, v_trim, euler_trim, B, D, delta_trim, tauR, g=G0):
    """Static force-moment that makes ``(v_trim, euler_trim, delta_trim)`` an equilibrium."""
    v_trim = np.asarray(v_trim, dtype=float)
    return (
        gravity_wrench(euler_trim, p, g)
        + coriolis_matrix(v_trim, p) @ v_trim
        - np.asarray(tauR, dtype=float)
        - np.asarray(B) @ np.asarray(delta_trim, dtype=float)
        - np.asarray(D) @ v_trim
    )
