"""Scenario configuration, event scheduling and the closed-loop run."""
from __future__ import annotations

import copy
import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .airframe import (
    G0,
    Airframe,
    DamageCase,
    ExtraTermSpec,
    GimbalLockError,
    InertialParams,
    NonFiniteStateError,
    PlantState,
    RegressorSet,
    UnphysicalParamsError,
    euler_kinematics,
    mass_to_slug,
    trim_tau0,
)
from .controller import (
    AllocationError,
    ControllerGains,
    DesiredMotion,
    Excitation,
    ExcitationConfig,
    SaturationMonitor,
    allocate,
    control_wrench,
    default_excitation,
    saturate,
)
from .estimator import SL_P, SL_TAU, SL_V, DualEstimator, UkfConfig, build_covariance
from .identifier import (IllConditionedFit, Prefilter, RlsState, SampleWindow, build_stacks, fit_window,
                         koopman_fit, rls_update)
from .supervisor import (
    CostConfig,
    DecisionState,
    ModelSide,
    RolloutContext,
    WindowHistory,
    advance_lambda,
    blend,
    descend,
    manual_override,
    window_cost,
)

log = logging.getLogger(__name__)

BUNDLED = Path(__file__).with_name("scenarios")
EVENT_KINDS = ("disturbance", "damage", "extra_term_on", "manual_lambda", "setpoint_change")
MODES = ("mbc", "dac")


class ConfigError(ValueError):
    """Scenario file violates the schema; the message names the field."""


class SimulationAbort(RuntimeError):
    """Non-finite values during a run; ``dump`` holds the last rows."""

    def __init__(self, message, dump=None, columns=None):
        super().__init__(message)
        self.dump = dump
        self.columns = columns


DEFAULTS = {
    "name": "unnamed",
    "duration": 10.0,
    "dt": 0.005,
    "seed": 0,
    "events": [],
    "plant": {
        "mass": {"value": 49.6, "unit": "lbm"},
        "inertia": {"Ixx": 1.0, "Iyy": 4.2, "Izz": 5.0, "Ixz": 0.18, "Iyz": 0.0, "Ixy": 0.0},
        "rho": [0.0, 0.0, 0.0],
        "g": G0,
        "B": None,
        "D": None,
        "tau0": "trim",
        "tauR": [0.0] * 6,
        "trim": {"v": [126.5, 0.0, 6.6, 0.0, 0.0, 0.0], "euler": [0.0, 0.052, 0.0],
                 "delta": [-0.05, 0.0, 0.0, 0.4]},
        "damage_cases": {},
        "extra_term": {"amplitude": 5.0, "frequency_gain": 10.0, "target_channel": 5,
                       "ramp_time_constant": 2.0, "delta_channel": 1},
    },
    "actuators": {"lower": [-0.5, -0.5, -0.5, 0.0], "upper": [0.5, 0.5, 0.5, 1.0]},
    "controller": {
        "Gamma": [2.0, 2.0, 2.0, 4.0, 4.0, 4.0],
        "chi_fraction": 0.1,
        "epsilon": 0.05,
        "eps_delta": None,
        "excitation": {"fraction": 0.01, "noise_fraction": 0.002, "freqs": [0.7, 1.3, 2.1]},
        "excitation_injection": "post",
        "saturation_hold": 40,
    },
    "desired": {"overlay": [], "attitude_hold": [0.0, 0.0]},
    "sensors": {"sigma_V": 0.05, "sigma_omega": 0.002},
    "estimator": {
        "kappa": 0.0,
        "alpha_forget": 0.98,
        "adapt_q": True,
        "adapt_r": True,
        "P0_std": {"v": 0.1, "tau": 2.0, "zeta1": 2.0, "zeta2": 2.0},
        "P0_param_std": [0.02, 0.05, 0.1, 0.1, 0.02, 0.01, 0.01, 0.005, 0.005, 0.005],
        "Q_std": {"v": 1e-3, "tau": 1e-3, "zeta1": 1e-2, "zeta2": 0.5},
        "Q_param_std": [1e-6] * 10,
        "obs_check_period": 50,
        "converge_window": 1.0,
        "converge_threshold": 18.0,
        "structure": "joint",
    },
    "identifier": {"window": 400, "fit_period": 0.25, "cond_threshold": 1e8,
                   "cond_ceiling": 1e14, "rls_forgetting": 0.998, "prefilter_cutoff": 0.0,
                   "prefilter_order": 2, "prior_weight": 0.0},
    "decision": {"t_p": 2.0, "gamma_step": 0.05, "rate_limit": 0.25, "lag": 1.5,
                 "update_period": 0.25, "fd_h": 0.02, "grad_tol_rel": 0.05,
                 "grad_tol_abs": 1e-9, "rollout_dt": 0.02, "H_l": None, "Q_l": None},
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key in out and isinstance(out[key], dict) and isinstance(val, dict) and key != "damage_cases":
            out[key] = _merge(out[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _array(value, shape, field_name):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{field_name}: expected numbers, got {value!r}") from exc
    if shape is not None and arr.shape != shape:
        raise ConfigError(f"{field_name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{field_name}: entries must be finite")
    return arr


def _positive(value, field_name):
    try:
        value = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{field_name}: expected a number, got {value!r}") from exc
    if not value > 0:
        raise ConfigError(f"{field_name}: must be > 0, got {value}")
    return value


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    payload: dict = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    duration: float
    dt: float
    seed: int
    events: list
    model_params: InertialParams
    model_regressors: RegressorSet
    damage_cases: dict
    extra_term: ExtraTermSpec
    g: float
    trim_v: np.ndarray
    trim_euler: np.ndarray
    trim_delta: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    gains: ControllerGains
    eps_delta: float
    excitation: ExcitationConfig
    excitation_injection: str
    saturation_hold: int
    overlay: list
    attitude_hold: np.ndarray
    sigma: np.ndarray
    ukf: UkfConfig
    identifier: dict
    decision: CostConfig
    resolved: dict

    def with_overrides(self, **changes):
        return replace(self, **changes)


def _parse_events(raw, damage_ids):
    if not isinstance(raw, list):
        raise ConfigError("events: expected a list")
    events = []
    for i, ev in enumerate(raw):
        where = f"events[{i}]"
        if not isinstance(ev, dict) or "time" not in ev or "kind" not in ev:
            raise ConfigError(f"{where}: needs 'time' and 'kind'")
        t = float(ev["time"])
        if t < 0 or not np.isfinite(t):
            raise ConfigError(f"{where}.time: must be finite and >= 0")
        kind = ev["kind"]
        if kind not in EVENT_KINDS:
            raise ConfigError(f"{where}.kind: {kind!r} not in {EVENT_KINDS}")
        payload = dict(ev.get("payload", {}))
        if kind == "damage" and str(payload.get("id")) not in damage_ids:
            raise ConfigError(f"{where}.payload.id: unknown damage case {payload.get('id')!r}")
        if kind == "manual_lambda":
            val = payload.get("value")
            if val is not None and not 0.0 <= float(val) <= 1.0:
                raise ConfigError(f"{where}.payload.value: must lie in [0, 1] or be null")
        if kind == "setpoint_change":
            _array(payload.get("v_d"), (6,), f"{where}.payload.v_d")
        if kind == "disturbance":
            _positive(payload.get("duration", 0.5), f"{where}.payload.duration")
        events.append(Event(t, kind, payload))
    # stable: equal times keep their listed order
    return sorted(events, key=lambda e: e.time)


def build_scenario(raw):
    """Resolve ``raw`` (a parsed config mapping) against the defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("scenario: top level must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    duration = _positive(cfg["duration"], "duration")
    dt = _positive(cfg["dt"], "dt")
    seed = cfg["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")

    pl = cfg["plant"]
    mass = pl["mass"]
    try:
        m = mass_to_slug(mass["value"], mass.get("unit", "slug"))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"plant.mass: {exc}") from exc
    inertia = pl["inertia"]
    try:
        params = InertialParams(m, *(float(inertia[k]) for k in ("Ixx", "Iyy", "Izz", "Ixz", "Iyz", "Ixy")),
                                rho=_array(pl["rho"], (3,), "plant.rho")).validate()
    except KeyError as exc:
        raise ConfigError(f"plant.inertia: missing {exc}") from exc
    except UnphysicalParamsError as exc:
        raise ConfigError(f"plant: {exc}") from exc
    g = _positive(pl["g"], "plant.g")
    if pl["B"] is None or pl["D"] is None:
        raise ConfigError("plant.B / plant.D: required (6x4 and 6x6 row-major)")
    B = _array(pl["B"], (6, 4), "plant.B")
    D = _array(pl["D"], (6, 6), "plant.D")
    tauR = _array(pl["tauR"], (6,), "plant.tauR")
    trim = pl["trim"]
    trim_v = _array(trim["v"], (6,), "plant.trim.v")
    trim_euler = _array(trim["euler"], (3,), "plant.trim.euler")
    trim_delta = _array(trim["delta"], (4,), "plant.trim.delta")
    if isinstance(pl["tau0"], str):
        if pl["tau0"] != "trim":
            raise ConfigError("plant.tau0: expected a 6-vector or 'trim'")
        tau0 = trim_tau0(params, trim_v, trim_euler, B, D, trim_delta, tauR, g)
    else:
        tau0 = _array(pl["tau0"], (6,), "plant.tau0")
    regressors = RegressorSet(B, D, tau0, tauR)

    damage_cases = {}
    for key, dc in pl["damage_cases"].items():
        where = f"plant.damage_cases.{key}"
        dm = dc.get("delta_m", {"value": 0.0, "unit": "slug"})
        try:
            delta_m = mass_to_slug(dm["value"], dm.get("unit", "slug"))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"{where}.delta_m: {exc}") from exc
        dI = dc.get("delta_I", {})
        damage_cases[str(key)] = DamageCase(
            str(key),
            delta_m,
            tuple(float(dI.get(k, 0.0)) for k in ("Ixx", "Iyy", "Izz", "Ixz", "Iyz", "Ixy")),
            None if dc.get("rho") is None else _array(dc["rho"], (3,), f"{where}.rho"),
            None if dc.get("delta_B") is None else _array(dc["delta_B"], (6, 4), f"{where}.delta_B"),
        )
    try:
        extra = ExtraTermSpec(**pl["extra_term"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"plant.extra_term: {exc}") from exc

    act = cfg["actuators"]
    lower = _array(act["lower"], (4,), "actuators.lower")
    upper = _array(act["upper"], (4,), "actuators.upper")
    if np.any(lower >= upper):
        raise ConfigError("actuators: lower must be below upper on every channel")
    if np.any(trim_delta < lower) or np.any(trim_delta > upper):
        raise ConfigError("plant.trim.delta: outside the actuator box")

    ct = cfg["controller"]
    chi = ct.get("chi")
    if chi is None:
        chi = ct["chi_fraction"] * np.abs(tau0)
    try:
        gains = ControllerGains(_array(ct["Gamma"], (6,), "controller.Gamma"),
                                _array(chi, (6,), "controller.chi"), float(ct["epsilon"]))
    except ValueError as exc:
        raise ConfigError(f"controller: {exc}") from exc
    eps_delta = ct["eps_delta"]
    eps_delta = 1e-4 * float(np.max(regressors.column_norms)) if eps_delta is None else float(eps_delta)
    ex = ct["excitation"]
    excitation = default_excitation(lower, upper, seed, ex["fraction"], ex["noise_fraction"],
                                    tuple(ex["freqs"]))
    if ct["excitation_injection"] not in ("post", "pre"):
        raise ConfigError("controller.excitation_injection: expected 'post' or 'pre'")

    overlay = []
    for i, item in enumerate(cfg["desired"]["overlay"]):
        ch = int(item["channel"])
        if not 0 <= ch < 6:
            raise ConfigError(f"desired.overlay[{i}].channel: must be 0..5")
        overlay.append((ch, float(item["amplitude"]), float(item["frequency"])))

    hold = _array(cfg["desired"]["attitude_hold"], (2,), "desired.attitude_hold")
    if np.any(hold < 0):
        raise ConfigError("desired.attitude_hold: gains must be >= 0")

    sn = cfg["sensors"]
    sigma = np.array([sn["sigma_V"]] * 3 + [sn["sigma_omega"]] * 3, dtype=float)
    if np.any(sigma < 0):
        raise ConfigError("sensors: noise levels must be >= 0")

    es = cfg["estimator"]
    if es["structure"] != "joint":
        # two parallel filters (state / parameter) are not implemented
        raise ConfigError(f"estimator.structure: only 'joint' is supported, got {es['structure']!r}")
    R0 = np.diag(np.maximum(sigma, 1e-4) ** 2)
    try:
        ukf = UkfConfig(
            kappa=float(es["kappa"]),
            Q0=build_covariance(es["Q_std"], es["Q_param_std"]),
            R0=R0,
            P0=build_covariance(es["P0_std"], es["P0_param_std"]),
            alpha_forget=float(es["alpha_forget"]),
            adapt_q=bool(es["adapt_q"]),
            adapt_r=bool(es["adapt_r"]),
            obs_check_period=int(es["obs_check_period"]),
            converge_window=float(es["converge_window"]),
            converge_threshold=float(es["converge_threshold"]),
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"estimator: {exc}") from exc

    ident = dict(cfg["identifier"])
    if int(ident["window"]) < 11:
        raise ConfigError("identifier.window: must be at least 11 samples")
    _positive(ident["fit_period"], "identifier.fit_period")

    dc = dict(cfg["decision"])
    try:
        decision = CostConfig(
            H_l=np.eye(6) if dc["H_l"] is None else _array(dc["H_l"], (6, 6), "decision.H_l"),
            Q_l=np.eye(6) if dc["Q_l"] is None else _array(dc["Q_l"], (6, 6), "decision.Q_l"),
            **{k: float(dc[k]) for k in ("t_p", "gamma_step", "rate_limit", "lag", "update_period",
                                         "fd_h", "grad_tol_rel", "grad_tol_abs", "rollout_dt")},
        )
    except ValueError as exc:
        raise ConfigError(f"decision: {exc}") from exc

    events = _parse_events(cfg["events"], set(damage_cases))
    resolved = copy.deepcopy(cfg)
    resolved["plant"]["tau0"] = tau0.tolist()
    return Scenario(
        name=str(cfg["name"]), duration=duration, dt=dt, seed=seed, events=events,
        model_params=params, model_regressors=regressors, damage_cases=damage_cases,
        extra_term=extra, g=g, trim_v=trim_v, trim_euler=trim_euler, trim_delta=trim_delta,
        lower=lower, upper=upper, gains=gains, eps_delta=eps_delta, excitation=excitation,
        excitation_injection=ct["excitation_injection"], saturation_hold=int(ct["saturation_hold"]),
        overlay=overlay, attitude_hold=hold, sigma=sigma, ukf=ukf, identifier=ident, decision=decision,
        resolved=resolved,
    )


def load_scenario(path):
    """Load a JSON scenario file, or a bundled scenario by name."""
    path = Path(path)
    if not path.exists() and (BUNDLED / f"{path.name}.json").exists():
        path = BUNDLED / f"{path.name}.json"
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return build_scenario(raw)


def write_resolved(scenario, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.resolved").write_text(json.dumps(scenario.resolved, indent=2, sort_keys=True) + "\n")


PARAM_COLS = ("m", "Ixx", "Iyy", "Izz", "Ixz", "Iyz", "Ixy", "rho_x", "rho_y", "rho_z")
COLUMNS = (
    ["t"]
    + [f"v_{i}" for i in range(6)]
    + [f"vd_{i}" for i in range(6)]
    + [f"verr_{i}" for i in range(6)]
    + [f"vhat_{i}" for i in range(6)]
    + [f"euler_{i}" for i in range(3)]
    + [f"delta_{i}" for i in range(4)]
    + [f"delta_add_{i}" for i in range(4)]
    + [f"tau_{i}" for i in range(6)]
    + [f"tauhat_{i}" for i in range(6)]
    + [f"p_{n}" for n in PARAM_COLS]
    + [f"phat_{n}" for n in PARAM_COLS]
    + [f"pstd_{n}" for n in PARAM_COLS]
    + ["lambda_actual", "lambda_opt", "lambda_sel", "J_lo", "J_hi"]
    + ["Bhat_4_0", "Bhat_5_1", "Bhat_3_2", "Bhat_0_3", "tau0hat_4", "tau0hat_5"]
    + ["fit_rms", "koopman_rms", "rls_rms", "fit_cond", "innovation_norm", "nis", "converged", "saturated", "redacted", "alloc_fail"]
)
COL = {name: i for i, name in enumerate(COLUMNS)}


def _span(first, n):
    return slice(COL[first], COL[first] + n)


S_V, S_VD, S_VERR, S_VHAT = _span("v_0", 6), _span("vd_0", 6), _span("verr_0", 6), _span("vhat_0", 6)
S_EUL, S_DELTA, S_ADD = _span("euler_0", 3), _span("delta_0", 4), _span("delta_add_0", 4)
S_TAU, S_TAUHAT = _span("tau_0", 6), _span("tauhat_0", 6)
S_P, S_PHAT, S_PSTD = _span("p_m", 10), _span("phat_m", 10), _span("pstd_m", 10)
S_LAM = _span("lambda_actual", 5)
S_FIT = _span("Bhat_4_0", 10)
S_FLAGS = _span("innovation_norm", 6)


@dataclass
class RunRecord:
    """Per-step table with the fixed :data:`COLUMNS` schema plus run metadata."""

    data: np.ndarray
    mode: str
    scenario: str
    seed: int
    events: list = field(default_factory=list)
    obs_sv: list = field(default_factory=list)
    fits: list = field(default_factory=list)

    columns = COLUMNS

    def __len__(self):
        return self.data.shape[0]

    def col(self, name):
        return self.data[:, COL[name]]

    def cols(self, prefix, n):
        return self.data[:, [COL[f"{prefix}_{i}"] for i in range(n)]]

    @property
    def t(self):
        return self.col("t")

    def write_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            fh.write(",".join(COLUMNS) + "\n")
            for row in self.data:
                fh.write(",".join(_fmt(x) for x in row) + "\n")

    def write_observability_csv(self, path):
        """Singular-value snapshots of the observability matrix, one row per check."""
        n = len(self.obs_sv[0][1]) if self.obs_sv else 0
        with Path(path).open("w", newline="") as fh:
            fh.write(",".join(["t"] + [f"sv_{i}" for i in range(n)]) + "\n")
            for t, sv in self.obs_sv:
                fh.write(",".join(_fmt(x) for x in (t, *sv)) + "\n")


def _fmt(x):
    if np.isnan(x):
        return "nan"
    return repr(float(x))


def _damaged_truth(scenario):
    return Airframe(scenario.model_params, scenario.model_regressors, None, scenario.g)


def _desired(scenario, base, t, pose, v_hat):
    """Base setpoint plus sinusoidal overlay plus a weak roll/pitch attitude hold."""
    v_d = base.copy()
    vdot_d = np.zeros(6)
    for ch, amp, freq in scenario.overlay:
        v_d[ch] += amp * np.sin(freq * t)
        vdot_d[ch] += amp * freq * np.cos(freq * t)
    k = scenario.attitude_hold
    if np.any(k > 0):
        err = pose[3:5] - scenario.trim_euler[:2]
        rates = euler_kinematics(v_hat, pose)[3:5]
        v_d[3:5] -= k * err
        vdot_d[3:5] -= k * rates
    return v_d, vdot_d


def run(scenario, mode="dac", duration=None):
    """Closed-loop run; ``mode`` is ``'mbc'`` (lambda forced to 0) or ``'dac'``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    dt = scenario.dt
    duration = scenario.duration if duration is None else duration
    n_steps = int(round(duration / dt))
    rng = np.random.default_rng(scenario.seed)
    excite = Excitation(scenario.excitation)
    pre_inject = scenario.excitation_injection == "pre"
    plant = _damaged_truth(scenario)
    regs = scenario.model_regressors
    tau_r = regs.tauR
    state = PlantState(scenario.trim_v, np.concatenate([np.zeros(3), scenario.trim_euler]), 0.0)
    delta = scenario.trim_delta.copy()
    model_side = ModelSide(scenario.model_params.vector, regs.B, regs.D, regs.tau0)
    estimate_side = None

    tau_trim = regs.tau0 + regs.B @ delta + regs.D @ state.v
    x0 = np.concatenate([state.v, tau_trim, np.zeros(12), scenario.model_params.vector])
    est = DualEstimator(x0, scenario.ukf, dt, tau_r, scenario.g)
    ident = scenario.identifier
    window = SampleWindow(int(ident["window"]))
    prefilter = Prefilter(float(ident["prefilter_cutoff"]), dt, int(ident["prefilter_order"]))
    prior = np.hstack([regs.B, regs.D, regs.tau0[:, None]])
    fit_every = max(1, int(round(float(ident["fit_period"]) / dt)))
    rls = RlsState.initial(forgetting=float(ident["rls_forgetting"]), theta=np.vstack(
        [regs.B.T, regs.D.T, regs.tau0[None, :]]), p0=1e2)

    cost_cfg = scenario.decision
    decide_every = max(1, int(round(cost_cfg.update_period / dt)))
    hist_len = int(round(cost_cfg.t_p / dt)) + 1
    history = deque(maxlen=hist_len)
    ctx = RolloutContext(scenario.gains, scenario.lower, scenario.upper, scenario.eps_delta, tau_r, scenario.g)
    decision = DecisionState()
    sat = SaturationMonitor(4, scenario.saturation_hold)

    events = list(scenario.events)
    next_event = 0
    fired = []
    v_base = scenario.trim_v.copy()
    pulse_until, pulse = -1.0, np.zeros(4)
    J_probe = (np.nan, np.nan)
    last_fit = None
    rls_rms = koopman_rms = np.nan
    obs = []
    fits = []
    rows = np.empty((n_steps + 1, len(COLUMNS)))
    redacted = frozenset()

    for k in range(n_steps + 1):
        t = k * dt
        # events fire at the first step with t >= event time
        while next_event < len(events) and t >= events[next_event].time - 1e-9 * dt:
            ev = events[next_event]
            next_event += 1
            fired.append((t, ev.kind, ev.payload))
            if ev.kind == "damage":
                plant.apply_damage(scenario.damage_cases[str(ev.payload["id"])])
            elif ev.kind == "extra_term_on":
                plant.extra = replace(scenario.extra_term, activation_time=t)
            elif ev.kind == "manual_lambda":
                val = ev.payload.get("value")
                decision = manual_override(decision, None if val is None else float(val), t)
            elif ev.kind == "setpoint_change":
                v_base = np.asarray(ev.payload["v_d"], float)
            elif ev.kind == "disturbance":
                frac = float(ev.payload.get("fraction", 0.02))
                chans = ev.payload.get("channels", [0, 1])
                pulse = np.zeros(4)
                pulse[chans] = frac * (scenario.upper - scenario.lower)[chans]
                pulse_until = t + float(ev.payload.get("duration", 0.5))

        # measure and estimate
        y = state.v + scenario.sigma * rng.standard_normal(6)
        try:
            out = est.step(y, state.pose)
        except np.linalg.LinAlgError as exc:
            raise SimulationAbort(f"estimator failure at t={t:.3f}: {exc}",
                                  rows[max(0, k - 100):k].copy(), COLUMNS) from exc
        if out.obs_singular_values is not None:
            obs.append((t, out.obs_singular_values))
        v_hat = out.v
        if k > 0:
            # delta is the command held over the step that produced this estimate
            filt = prefilter(np.concatenate([out.tau, delta, v_hat]))
            window.append(filt[:6], filt[6:10], filt[10:], t)
            rls = rls_update(rls, filt[:6], filt[6:10], filt[10:])

        if k % fit_every == 0 and window.ready and len(window) >= window.capacity // 2:
            try:
                last_fit = fit_window(window, cond_threshold=float(ident["cond_threshold"]),
                                      cond_ceiling=float(ident["cond_ceiling"]), prior=prior,
                                      prior_weight=float(ident["prior_weight"]))
                estimate_side = ModelSide(out.p.copy(), last_fit.B, last_fit.D, last_fit.tau0)
                # plain window fit, kept for reporting next to the shrunk one the blend uses
                T_w, Y_w = build_stacks(window)
                raw_fit = koopman_fit(T_w, Y_w, cond_threshold=float(ident["cond_threshold"]),
                                      cond_ceiling=float(ident["cond_ceiling"]), t=t)
                koopman_rms = raw_fit.fit_residual_rms
                rls_rms = float(np.sqrt(np.mean((T_w - rls.P_hat @ Y_w) ** 2)))
                fits.append((t, last_fit.P_hat.copy(), last_fit.condition_number,
                             last_fit.fit_residual_rms, rls.P_hat.copy(), rls_rms,
                             raw_fit.P_hat.copy(), koopman_rms))
            except IllConditionedFit as exc:
                log.warning("skipping fit at t=%.2f: %s", t, exc)

        v_d, vdot_d = _desired(scenario, v_base, t, state.pose, v_hat)

        # supervise
        if mode == "dac":
            if (k % decide_every == 0 and estimate_side is not None and out.converged
                    and len(history) == hist_len):
                wh = WindowHistory(
                    np.array([r[0] for r in history]), history[0][1],
                    np.array([r[2] for r in history]), np.array([r[3] for r in history]),
                    np.array([r[4] for r in history]), np.array([r[5] for r in history]),
                )

                def cost(lams):
                    return window_cost(wh, lams, model_side, estimate_side, ctx, cost_cfg)

                try:
                    lam_new, (_, J_probe) = descend(decision.lambda_opt, cost, cost_cfg)
                except AllocationError:
                    lam_new = max(0.0, decision.lambda_opt - cost_cfg.gamma_step)
                decision = replace(decision, lambda_opt=lam_new)
            decision = advance_lambda(decision, t, dt, cost_cfg, out.converged)
        lam = decision.lambda_actual if mode == "dac" else 0.0

        # control and allocate
        alloc_fail = 0.0
        model = blend(model_side, estimate_side, lam, scenario.g) if estimate_side is not None and lam > 0 \
            else blend(model_side, model_side, 0.0, scenario.g)
        desired = DesiredMotion(v_d, vdot_d)
        e_exc = excite(t)
        e_pulse = pulse if t < pulse_until else np.zeros(4)
        tau_c = control_wrench(v_hat, state.pose, desired, model, scenario.gains, tau_r)
        if pre_inject:
            # excitation enters the commanded wrench and goes through allocation
            tau_c = tau_c + model.B @ e_exc
        try:
            alloc = allocate(tau_c, model.B, scenario.eps_delta, last_delta=delta)
        except AllocationError as exc:
            log.warning("allocation failed at t=%.2f (%s); falling back to the model", t, exc)
            alloc_fail = 1.0
            decision = replace(decision, lambda_opt=max(0.0, decision.lambda_opt - cost_cfg.gamma_step))
            model = blend(model_side, model_side, 0.0, scenario.g)
            tau_c = control_wrench(v_hat, state.pose, desired, model, scenario.gains, tau_r)
            if pre_inject:
                tau_c = tau_c + model.B @ e_exc
            alloc = allocate(tau_c, model.B, scenario.eps_delta, last_delta=delta)
        redacted = alloc.redacted
        add = e_exc + e_pulse
        delta, mask = saturate(alloc.delta + (e_pulse if pre_inject else add), scenario.lower, scenario.upper)
        saturated = sat.update(mask)
        history.append((t, v_hat.copy(), v_d, vdot_d, state.pose.copy(), add))

        tau_true = plant.wrench(delta, state.v, t)
        row = rows[k]
        row[0] = t
        row[S_V] = state.v
        row[S_VD] = v_d
        row[S_VERR] = state.v - v_d
        row[S_VHAT] = v_hat
        row[S_EUL] = state.pose[3:]
        row[S_DELTA] = delta
        row[S_ADD] = add
        row[S_TAU] = tau_true
        row[S_TAUHAT] = out.tau
        row[S_P] = plant.params.vector
        row[S_PHAT] = out.p
        row[S_PSTD] = np.sqrt(np.maximum(np.diag(out.P)[SL_P], 0.0))
        row[S_LAM] = (decision.lambda_actual if mode == "dac" else 0.0, decision.lambda_opt,
                      np.nan if decision.lambda_sel is None else decision.lambda_sel, *J_probe)
        if last_fit is not None:
            P = last_fit.P_hat
            row[S_FIT] = (P[4, 0], P[5, 1], P[3, 2], P[0, 3], P[4, 10], P[5, 10],
                          last_fit.fit_residual_rms, koopman_rms, rls_rms, last_fit.condition_number)
        else:
            row[S_FIT] = np.nan
        row[S_FLAGS] = (np.linalg.norm(out.innovation), out.nis, float(out.converged), float(saturated),
                        float(len(redacted)), alloc_fail)

        if not np.all(np.isfinite(row[:S_LAM.start])):
            raise SimulationAbort(f"non-finite values at t={t:.3f}", rows[max(0, k - 99):k + 1].copy(), COLUMNS)
        if k == n_steps:
            break
        try:
            state = plant.step(state, delta, dt)
        except (NonFiniteStateError, GimbalLockError) as exc:
            raise SimulationAbort(str(exc), rows[max(0, k - 99):k + 1].copy(), COLUMNS) from exc

    return RunRecord(rows, mode, scenario.name, scenario.seed, fired, obs, fits)
