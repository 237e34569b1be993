"""Dynamic single-track vehicle model with combined-slip tires and
first-order actuators.

All operations are pure; batched hot paths live in ``_kernels`` and this
module provides the typed scalar API on top of them.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from importlib import resources

import numpy as np

from . import _kernels
from ._kernels import modelmath as mm
from .configfile import read_kv, write_kv
from .errors import ConfigError, NumericalBlowupError, ParseError

PARAM_FIELDS = mm.PARAM_FIELDS
STATE_FIELDS = mm.STATE_FIELDS

_NP_OPS = mm.ops_for(np)


@dataclass
class VehicleState:
    """Full dynamic state: global pose, body velocities, actuator states."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    r: float = 0.0
    delta: float = 0.0
    omega: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in STATE_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        return cls(**{f: float(v) for f, v in zip(STATE_FIELDS, arr)})


@dataclass
class ActuatorCommand:
    delta_ref: float = 0.0
    omega_ref: float = 0.0


@dataclass
class VehicleParams:
    """Single-track + tire + actuator parameters (SI units)."""

    m: float            # mass [kg]
    Iz: float           # yaw inertia [kg m^2]
    lf: float           # CoG to front axle [m]
    lr: float           # CoG to rear axle [m]
    R_w: float          # effective wheel radius [m]
    mu: float           # tire-track friction scale [-]
    tire_Bf: float      # front magic-formula stiffness factor
    tire_Cf: float      # front shape factor, in (1, 2]
    tire_Df: float      # front peak factor (scales mu * Fz)
    tire_Ef: float      # front curvature factor
    tire_Br: float
    tire_Cr: float
    tire_Dr: float
    tire_Er: float
    T_delta: float      # steering time constant [s]
    T_omega: float      # wheel-speed (ESC loop) time constant [s]
    c_drag: float       # aero drag [N s^2/m^2]
    c_roll: float       # rolling resistance [N]
    delta_max: float = 0.5   # steering limit [rad]
    omega_max: float = 200.0  # wheel speed limit [rad/s]

    def __post_init__(self):
        for name in ("m", "Iz", "lf", "lr", "R_w", "mu", "T_delta", "T_omega",
                     "tire_Bf", "tire_Br"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"parameter {name} must be > 0")
        for name in ("tire_Cf", "tire_Cr"):
            c = getattr(self, name)
            if not 1.0 < c <= 2.0:
                raise ConfigError(f"parameter {name} must be in (1, 2], got {c}")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PARAM_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "VehicleParams":
        return cls(**{f: float(v) for f, v in zip(PARAM_FIELDS, arr)})

    @classmethod
    def nominal(cls) -> "VehicleParams":
        """Placeholder scale-car defaults; meant to be replaced by sysid output."""
        ref = resources.files("apexracer.data").joinpath("nominal_params.txt")
        with resources.as_file(ref) as path:
            return read_params(path)


@dataclass
class RandomizationSpec:
    """Multiplicative Gaussian parameter perturbation, scale ~ N(1, sigma)."""

    sigma: float = 0.0
    mode: str = "friction_only"  # or "all_single_track"

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.mode not in ("friction_only", "all_single_track"):
            raise ConfigError(f"unknown randomization mode {self.mode!r}")


# parameters perturbed in all_single_track mode; actuator time constants and
# geometric limits stay fixed
_ALL_SINGLE_TRACK = ("m", "Iz", "lf", "lr", "mu", "tire_Df", "tire_Dr")
_SCALE_CLIP = (0.5, 1.5)


def randomize_params(params: VehicleParams, spec: RandomizationSpec,
                     rng: np.random.Generator) -> VehicleParams:
    """Perturb parameters per the spec; deterministic for a seeded rng."""
    names = ("mu",) if spec.mode == "friction_only" else _ALL_SINGLE_TRACK
    scales = np.clip(rng.normal(1.0, spec.sigma, size=len(names)), *_SCALE_CLIP)
    if spec.sigma == 0.0:
        return replace(params)
    return replace(params, **{n: getattr(params, n) * s for n, s in zip(names, scales)})


def tire_forces(params: VehicleParams, alpha: float, kappa: float, fz: float):
    """Combined-slip tire force (front-axle curve), wheel frame.

    Magnitude from the magic formula at the combined slip, direction from
    the slip vector; never exceeds mu * Fz * D.
    """
    if fz <= 0:
        raise ValueError("normal load must be > 0")
    fx, fy = mm.axle_forces(
        np.float64(kappa), np.float64(alpha),
        params.mu * fz * params.tire_Df,
        params.tire_Bf, params.tire_Cf, params.tire_Ef, 1.0, _NP_OPS)
    return float(fx), float(fy)


def derivatives(state: VehicleState, cmd: ActuatorCommand,
                params: VehicleParams, model_actuators: bool = True) -> VehicleState:
    """Time derivative of every state, returned in VehicleState form."""
    s = state.to_array()
    p = {f: np.float64(getattr(params, f)) for f in PARAM_FIELDS}
    d = mm.derivatives_cols(
        np.float64(s[2]), np.float64(s[3]), np.float64(s[4]), np.float64(s[5]),
        np.float64(s[6]), np.float64(s[7]),
        np.float64(cmd.delta_ref), np.float64(cmd.omega_ref),
        p, _NP_OPS, model_actuators)
    return VehicleState.from_array(np.array(d, dtype=np.float64))


def integrate_step(state: VehicleState, cmd: ActuatorCommand, params: VehicleParams,
                   dt: float = 0.05, substeps: int = 10,
                   model_actuators: bool = True) -> VehicleState:
    """Advance one control step with fixed-substep RK4; deterministic.

    Steering and wheel speed are clamped to their limits after every substep.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    st = state.to_array().reshape(1, 8)
    cm = np.array([[cmd.delta_ref, cmd.omega_ref]], dtype=np.float64)
    pa = params.to_array().reshape(1, -1)
    bad_env, bad_ss = _kernels.integrate_batch(st, cm, pa, dt, substeps,
                                               model_actuators)
    if bad_env >= 0:
        raise NumericalBlowupError(
            f"non-finite state at substep {bad_ss}", env_index=0, substep=bad_ss)
    return VehicleState.from_array(st[0])


def simulate(state: VehicleState, commands, params: VehicleParams,
             dt: float = 0.05, substeps: int = 10, model_actuators: bool = True):
    """Roll out a command sequence; returns the (len(commands)+1, 8) state
    trajectory including the initial state."""
    out = np.empty((len(commands) + 1, 8), dtype=np.float64)
    out[0] = state.to_array()
    st = out[0].copy().reshape(1, 8)
    pa = params.to_array().reshape(1, -1)
    cm = np.empty((1, 2), dtype=np.float64)
    for k, cmd in enumerate(commands):
        cm[0, 0] = cmd.delta_ref
        cm[0, 1] = cmd.omega_ref
        bad_env, bad_ss = _kernels.integrate_batch(st, cm, pa, dt, substeps,
                                                   model_actuators)
        if bad_env >= 0:
            raise NumericalBlowupError(
                f"non-finite state at step {k}, substep {bad_ss}",
                env_index=0, substep=bad_ss)
        out[k + 1] = st[0]
    return out


def read_params(path) -> VehicleParams:
    """Read a flat ``name = value`` parameter file."""
    raw = read_kv(path)
    values = {}
    for name in PARAM_FIELDS:
        if name not in raw:
            raise ParseError(f"{path}: missing parameter {name!r}")
        try:
            values[name] = float(raw[name])
        except ValueError:
            raise ParseError(f"{path}: non-numeric value for {name!r}: "
                             f"{raw[name]!r}") from None
    extra = set(raw) - set(PARAM_FIELDS)
    if extra:
        raise ParseError(f"{path}: unknown parameters {sorted(extra)}")
    return VehicleParams(**values)


def write_params(path, params: VehicleParams, header: str | None = None):
    write_kv(path, {f: getattr(params, f) for f in PARAM_FIELDS},
             header=header or "vehicle parameters (SI units)")
