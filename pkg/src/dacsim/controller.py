"""Lyapunov velocity regulator, least-squares allocation and excitation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class AllocationError(np.linalg.LinAlgError):
    """B^T B is singular once ineffective actuators are removed.

    The supervisor reacts by lowering the decision factor.
    """


@dataclass(frozen=True)
class ControllerGains:
    Gamma: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0, 2.0, 4.0, 4.0, 4.0]))
    chi: np.ndarray = field(default_factory=lambda: np.zeros(6))
    epsilon: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "Gamma", np.asarray(self.Gamma, dtype=float).reshape(6))
        object.__setattr__(self, "chi", np.asarray(self.chi, dtype=float).reshape(6))
        if np.any(self.Gamma <= 0):
            raise ValueError("Gamma entries must be positive")
        if np.any(self.chi < 0):
            raise ValueError("chi entries must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class DesiredMotion:
    v_d: np.ndarray
    vdot_d: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        object.__setattr__(self, "v_d", np.asarray(self.v_d, dtype=float).reshape(6))
        object.__setattr__(self, "vdot_d", np.asarray(self.vdot_d, dtype=float).reshape(6))


def control_wrench(v, pose, desired, model, gains, tau_r=None):
    """Commanded wrench of the robust regulator.

    ``model`` must provide ``M``, ``C(v)``, ``G(euler)``, ``D`` and ``tau0``
    (a :class:`~dacsim.supervisor.BlendedModel`).
    """
    v = np.asarray(v, dtype=float)
    v_err = v - desired.v_d
    tau_c = (
        model.G(pose[3:])
        + model.C(v) @ desired.v_d
        + model.M @ desired.vdot_d
        - gains.Gamma * v_err
        - model.tau0
        - model.D @ v
        - gains.chi * np.tanh(v_err / gains.epsilon)
    )
    if tau_r is not None:
        tau_c = tau_c - tau_r
    return tau_c


@dataclass(frozen=True)
class Allocation:
    delta: np.ndarray
    redacted: frozenset


def allocate(tau_c, B, eps_delta, last_delta=None, max_cond=1e12):
    """Least-squares actuator commands with redaction of near-zero columns."""
    B = np.asarray(B, dtype=float)
    k = B.shape[1]
    norms = np.linalg.norm(B, axis=0)
    keep = norms > eps_delta
    redacted = frozenset(int(i) for i in np.flatnonzero(~keep))
    delta = np.zeros(k) if last_delta is None else np.array(last_delta, dtype=float)
    if not keep.any():
        raise AllocationError("every actuator column is below the redaction threshold")
    Bk = B[:, keep]
    BtB = Bk.T @ Bk
    if np.linalg.cond(BtB) > max_cond:
        raise AllocationError(
            f"B^T B ill-conditioned after redacting {sorted(redacted)}; lower the decision factor"
        )
    delta[keep] = np.linalg.solve(BtB, Bk.T @ np.asarray(tau_c, dtype=float))
    return Allocation(delta, redacted)


@dataclass(frozen=True)
class ExcitationConfig:
    # (channel, amplitude, frequency rad/s)
    sinusoids: tuple = ()
    noise_amplitude: np.ndarray | float = 0.0
    seed: int = 0
    n: int = 4


class Excitation:
    """Sum of sinusoids plus bounded uniform noise, one RNG draw per call."""

    def __init__(self, config):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self._noise = np.broadcast_to(
            np.asarray(config.noise_amplitude, dtype=float), (config.n,)
        ).copy()

    def __call__(self, t):
        out = np.zeros(self.config.n)
        for ch, amp, freq in self.config.sinusoids:
            out[int(ch)] += amp * np.sin(freq * t)
        draw = self.rng.uniform(-1.0, 1.0, self.config.n)
        return out + self._noise * draw


def default_excitation(lower, upper, seed=0, fraction=0.01, noise_fraction=0.002,
                       freqs=(0.7, 1.3, 2.1)):
    """Sinusoids on every actuator, sized as a fraction of its range.

    ``fraction`` and ``noise_fraction`` may be scalars or per-channel.
    """
    span = np.asarray(upper, dtype=float) - np.asarray(lower, dtype=float)
    n = len(span)
    frac = np.broadcast_to(np.asarray(fraction, dtype=float), (n,))
    sinusoids = []
    for i in range(n):
        for f in freqs:
            # per-channel frequency stagger keeps the channels linearly independent
            sinusoids.append((i, frac[i] * span[i] / len(freqs), f * (1.0 + 0.13 * i)))
    return ExcitationConfig(tuple(sinusoids), np.asarray(noise_fraction, dtype=float) * span, seed, n)


def saturate(delta, lower, upper):
    """Clamp to the actuator box; returns ``(clamped, saturated_mask)``."""
    delta = np.asarray(delta, dtype=float)
    clamped = np.clip(delta, lower, upper)
    return clamped, clamped != delta


class SaturationMonitor:
    """Raises a flag after ``hold_steps`` consecutive saturated steps on any channel."""

    def __init__(self, n, hold_steps):
        self.counts = np.zeros(n, dtype=int)
        self.hold_steps = hold_steps
        self.events = 0

    def update(self, mask):
        self.counts = np.where(mask, self.counts + 1, 0)
        self.events += int(np.any(mask))
        sustained = bool(np.any(self.counts >= self.hold_steps))
        if sustained and np.any(self.counts == self.hold_steps):
            log.warning("sustained actuator saturation on channels %s",
                        np.flatnonzero(self.counts >= self.hold_steps).tolist())
        return sustained
