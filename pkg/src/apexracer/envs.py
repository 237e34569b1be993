"""Racing RL environment: observation assembly, action resolution with an
integrated wheel-speed reference, progress reward, reset-on-violation, and a
vectorized batch over many instances.

``RacingVecEnv`` owns all per-instance state in batched arrays and is the
throughput path (one kernel call per operation per step).  ``RacingEnv`` is
the single-instance view (a batch of one) whose step semantics match the
vectorized path bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .configfile import parse_bool, read_kv
from .dynamics import (PARAM_FIELDS, RandomizationSpec, VehicleParams,
                       randomize_params, read_params)
from .errors import ConfigError, EnvUsageError, NumericalBlowupError
from .track import TrackDefinition, load_track, progress_delta, wrap_angle

_I_OMEGA_MAX = PARAM_FIELDS.index("omega_max")
_I_DELTA_MAX = PARAM_FIELDS.index("delta_max")


@dataclass
class EnvConfig:
    dt: float = 0.05
    n_lookahead: int = 10
    lookahead_spacing: float = 0.3
    action_scale_delta: float = 0.5     # rad per unit action
    action_scale_accel: float = 5.0     # m/s^2 at the contact patch per unit action
    randomization: RandomizationSpec = field(default_factory=RandomizationSpec)
    track_representation: str = "geometric"   # geometric | progress
    action_space: str = "wheel_accel"         # wheel_accel | wheel_speed
    model_actuators: bool = True
    max_episode_steps: int = 1024
    reset_speed_max: float = 2.0
    # observation normalization maxima (overridable from the config file);
    # delta uses action_scale_delta, omega the parameter limit, omega_dot_ref
    # the accel scale, and s the track length
    obs_max_vx: float = 8.0
    obs_max_vy: float = 3.0
    obs_max_r: float = 6.0
    obs_max_n: float = 1.0
    obs_max_u: float = math.pi
    obs_max_curvature: float = 3.0
    obs_max_width: float = 1.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be > 0")
        if self.track_representation not in ("geometric", "progress"):
            raise ConfigError(f"unknown track_representation {self.track_representation!r}")
        if self.action_space not in ("wheel_accel", "wheel_speed"):
            raise ConfigError(f"unknown action_space {self.action_space!r}")
        for name in ("n_lookahead", "max_episode_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lookahead_spacing", "action_scale_delta", "action_scale_accel",
                     "obs_max_vx", "obs_max_vy", "obs_max_r", "obs_max_n",
                     "obs_max_u", "obs_max_curvature", "obs_max_width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")

    def observation_size(self) -> int:
        if self.track_representation == "progress":
            return 11
        return 10 + 2 * self.n_lookahead


@dataclass
class CommandState:
    """Most recent resolved command, as exposed in the observation."""

    delta_ref: float = 0.0
    omega_ref: float = 0.0
    omega_dot_ref: float = 0.0  # rad/s^2


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    info: dict


@dataclass
class VecStepResult:
    """Batched step outcome; arrays are indexed by env."""

    observation: np.ndarray   # (B, obs_dim) float32
    reward: np.ndarray        # (B,) float64
    terminated: np.ndarray    # (B,) bool
    truncated: np.ndarray     # (B,) bool
    info: dict


def observation_scales(config: EnvConfig, params: VehicleParams,
                       track: TrackDefinition) -> np.ndarray:
    """Per-element normalization maxima for the configured variant."""
    odr_max = config.action_scale_accel / params.R_w
    core = dict(vx=config.obs_max_vx, vy=config.obs_max_vy, u=config.obs_max_u,
                n=config.obs_max_n, r=config.obs_max_r,
                delta=config.action_scale_delta, delta_ref=config.action_scale_delta,
                omega_dot_ref=odr_max, omega_ref=params.omega_max,
                omega=params.omega_max)
    if config.track_representation == "progress":
        order = ("n", "u", "vx", "vy", "r", "delta", "delta_ref",
                 "omega_dot_ref", "omega_ref", "omega")
        return np.array([core[k] for k in order] + [track.total_length])
    order = ("vx", "vy", "u", "n", "r", "delta", "delta_ref",
             "omega_dot_ref", "omega_ref", "omega")
    return np.concatenate([
        [core[k] for k in order],
        np.full(config.n_lookahead, config.obs_max_curvature),
        np.full(config.n_lookahead, config.obs_max_width),
    ])


def build_observation(state, cmd: CommandState, track: TrackDefinition,
                      config: EnvConfig, params: VehicleParams,
                      pose=None) -> np.ndarray:
    """Assemble and normalize one observation (scalar reference path)."""
    from .track import global_to_frenet
    if pose is None:
        pose = global_to_frenet(track, state.x, state.y, state.yaw)
    scales = observation_scales(config, params, track)
    if config.track_representation == "progress":
        raw = np.array([pose.n, pose.u, state.vx, state.vy, state.r,
                        state.delta, cmd.delta_ref, cmd.omega_dot_ref,
                        cmd.omega_ref, state.omega, pose.s])
    else:
        c, w = _kernels.lookahead_batch(
            track.curvature, track.width_full, track.resolution,
            track.total_length, np.array([pose.s]),
            config.n_lookahead, config.lookahead_spacing)
        raw = np.concatenate([
            [state.vx, state.vy, pose.u, pose.n, state.r,
             state.delta, cmd.delta_ref, cmd.omega_dot_ref,
             cmd.omega_ref, state.omega],
            c[0], w[0]])
    return (raw / scales).astype(np.float32)


class RacingVecEnv:
    """B racing-car instances stepped in lockstep.

    Instances share only the immutable track; each owns its state row and a
    seeded rng stream, so results do not depend on batch order or thread
    scheduling.  Terminated or truncated instances are auto-reset inside
    :meth:`step` and their fresh observation is returned alongside the flags
    (the final pre-reset observation rides in ``info["final_observation"]``).
    """

    def __init__(self, track: TrackDefinition, params: VehicleParams,
                 config: EnvConfig, n_envs: int, seed: int = 0):
        if n_envs < 1:
            raise ConfigError("n_envs must be >= 1")
        self.track = track
        self.base_params = params
        self.config = config
        self.n_envs = n_envs
        self.obs_dim = config.observation_size()
        self._scales = observation_scales(config, params, track)
        self._rngs = [np.random.default_rng(s)
                      for s in np.random.SeedSequence(seed).spawn(n_envs)]
        self._base_arr = params.to_array()
        from .dynamics import _ALL_SINGLE_TRACK, _SCALE_CLIP
        names = (("mu",) if config.randomization.mode == "friction_only"
                 else _ALL_SINGLE_TRACK)
        self._rand_idx = np.array([PARAM_FIELDS.index(n) for n in names])
        self._scale_clip = _SCALE_CLIP
        self._state = np.zeros((n_envs, 8))
        self._params = np.tile(params.to_array(), (n_envs, 1))
        self._obs_buf = np.empty((n_envs, self.obs_dim))
        self._cmd = np.zeros((n_envs, 2))
        self._omega_dot_ref = np.zeros(n_envs)
        self._hint = np.full(n_envs, -1, dtype=np.int64)
        self._s = np.zeros(n_envs)
        self._n = np.zeros(n_envs)
        self._u = np.zeros(n_envs)
        self._steps = np.zeros(n_envs, dtype=np.int64)
        self._progress = np.zeros(n_envs)
        self._ready = False

    # -- lifecycle ---------------------------------------------------------

    def reset(self) -> np.ndarray:
        """Reset every instance; returns the (B, obs_dim) observations."""
        self._reset_rows(np.arange(self.n_envs))
        self._ready = True
        return self._observe()

    def _reset_rows(self, rows):
        trk = self.track
        sigma = self.config.randomization.sigma
        for i in rows:
            rng = self._rngs[i]
            s0 = rng.uniform(0.0, trk.total_length)
            vx0 = rng.uniform(0.0, self.config.reset_speed_max)
            # same draws as dynamics.randomize_params, without the dataclass
            # round trip (this loop is hot under exploration-heavy policies)
            scales = np.clip(rng.normal(1.0, sigma, size=len(self._rand_idx)),
                             *self._scale_clip)
            self._params[i] = self._base_arr
            if sigma > 0.0:
                self._params[i, self._rand_idx] *= scales
            idx = min(int(s0 / trk.resolution), trk.n_segments - 1)
            t = s0 / trk.resolution - idx
            dth = wrap_angle(trk.theta[idx + 1] - trk.theta[idx])
            yaw0 = wrap_angle(trk.theta[idx] + t * dth)
            x0 = trk.xs[idx] + t * (trk.xs[idx + 1] - trk.xs[idx])
            y0 = trk.ys[idx] + t * (trk.ys[idx + 1] - trk.ys[idx])
            omega0 = vx0 / self.base_params.R_w
            self._state[i] = (x0, y0, yaw0, vx0, 0.0, 0.0, 0.0, omega0)
            self._cmd[i] = (0.0, omega0)
            self._omega_dot_ref[i] = 0.0
            self._hint[i] = idx
            self._s[i] = s0
            self._n[i] = 0.0
            self._u[i] = 0.0
            self._steps[i] = 0
            self._progress[i] = 0.0

    # -- stepping ----------------------------------------------------------

    def step(self, actions, auto_reset: bool = True) -> VecStepResult:
        """Resolve actions, integrate one control step, score progress."""
        if not self._ready:
            raise EnvUsageError("step() before reset()")
        actions = np.asarray(actions, dtype=np.float64).reshape(self.n_envs, 2)
        cfg = self.config
        a = np.clip(actions, -1.0, 1.0)
        omega_max = self._params[:, _I_OMEGA_MAX]
        delta_max = self._params[:, _I_DELTA_MAX]
        self._cmd[:, 0] = np.clip(a[:, 0] * cfg.action_scale_delta,
                                  -delta_max, delta_max)
        if cfg.action_space == "wheel_accel":
            odr = a[:, 1] * cfg.action_scale_accel / self.base_params.R_w
            self._cmd[:, 1] = np.clip(self._cmd[:, 1] + odr * cfg.dt, 0.0, omega_max)
        else:
            new_ref = np.clip((a[:, 1] + 1.0) / 2.0 * omega_max, 0.0, omega_max)
            odr = (new_ref - self._cmd[:, 1]) / cfg.dt
            self._cmd[:, 1] = new_ref
        self._omega_dot_ref = odr

        bad_env, bad_ss = _kernels.integrate_batch(
            self._state, self._cmd, self._params, cfg.dt, 10,
            cfg.model_actuators)
        if bad_env >= 0:
            raise NumericalBlowupError(
                f"env {bad_env}: non-finite state at substep {bad_ss}",
                env_index=bad_env, substep=bad_ss)

        trk = self.track
        s_prev = self._s.copy()
        s_new, n_new, u_new = _kernels.frenet_batch(
            trk.xs, trk.ys, trk.theta, trk.resolution, trk.total_length,
            np.ascontiguousarray(self._state[:, 0]),
            np.ascontiguousarray(self._state[:, 1]),
            np.ascontiguousarray(self._state[:, 2]), self._hint)
        self._s, self._n, self._u = s_new, n_new, u_new

        delta_s = progress_delta(s_prev, s_new, trk.total_length)
        half_w = trk.width_at(s_new) / 2.0
        inside = np.abs(n_new) <= half_w
        reward = np.where(inside, delta_s, -1.0)
        terminated = ~inside
        self._steps += 1
        self._progress += delta_s
        truncated = (~terminated) & (self._steps >= cfg.max_episode_steps)

        info = {
            "s": s_new.copy(), "n": n_new.copy(), "u": u_new.copy(),
            "state": self._state.copy(),
            "laps": np.floor_divide(self._progress, trk.total_length).astype(np.int64),
            "episode_progress": self._progress.copy(),
        }
        done = terminated | truncated
        if done.any():
            final_obs = self._observe()
            info["final_observation"] = final_obs
            info["episode_steps"] = self._steps.copy()
            if auto_reset:
                self._reset_rows(np.where(done)[0])
        obs = self._observe()
        return VecStepResult(observation=obs, reward=reward,
                             terminated=terminated, truncated=truncated,
                             info=info)

    # -- observations ------------------------------------------------------

    def _observe(self) -> np.ndarray:
        cfg = self.config
        st = self._state
        buf = self._obs_buf
        if cfg.track_representation == "progress":
            cols = (self._n, self._u, st[:, 3], st[:, 4], st[:, 5],
                    st[:, 6], self._cmd[:, 0], self._omega_dot_ref,
                    self._cmd[:, 1], st[:, 7], self._s)
            for k, col in enumerate(cols):
                buf[:, k] = col
        else:
            cols = (st[:, 3], st[:, 4], self._u, self._n, st[:, 5],
                    st[:, 6], self._cmd[:, 0], self._omega_dot_ref,
                    self._cmd[:, 1], st[:, 7])
            for k, col in enumerate(cols):
                buf[:, k] = col
            c, w = _kernels.lookahead_batch(
                self.track.curvature, self.track.width_full,
                self.track.resolution, self.track.total_length,
                self._s, cfg.n_lookahead, cfg.lookahead_spacing)
            buf[:, 10:10 + cfg.n_lookahead] = c
            buf[:, 10 + cfg.n_lookahead:] = w
        buf /= self._scales
        return buf.astype(np.float32)

    # -- diagnostics -------------------------------------------------------

    def frenet(self, i: int = 0):
        from .track import FrenetPose
        return FrenetPose(s=float(self._s[i]), n=float(self._n[i]),
                          u=float(self._u[i]))

    def state(self, i: int = 0):
        from .dynamics import VehicleState
        return VehicleState.from_array(self._state[i])

    def command(self, i: int = 0) -> CommandState:
        return CommandState(delta_ref=float(self._cmd[i, 0]),
                            omega_ref=float(self._cmd[i, 1]),
                            omega_dot_ref=float(self._omega_dot_ref[i]))

    def params(self, i: int = 0) -> VehicleParams:
        return VehicleParams.from_array(self._params[i])


class RacingEnv(RacingVecEnv):
    """Single racing-car instance (a batch of one).

    Unlike the vectorized path, stepping after termination without an
    explicit reset is a usage error here.
    """

    def __init__(self, track, params, config, seed: int = 0):
        super().__init__(track, params, config, n_envs=1, seed=seed)
        self._needs_reset = True

    def reset(self) -> np.ndarray:
        obs = super().reset()
        self._needs_reset = False
        return obs[0]

    def step(self, action, auto_reset: bool = False) -> StepResult:
        if self._needs_reset and not auto_reset:
            raise EnvUsageError("episode over: call reset() before step()")
        res = super().step(np.asarray(action).reshape(1, 2), auto_reset=auto_reset)
        done = bool(res.terminated[0] or res.truncated[0])
        if not auto_reset:
            self._needs_reset = done
        info = {k: (v[0] if isinstance(v, np.ndarray) else v)
                for k, v in res.info.items()}
        return StepResult(observation=res.observation[0],
                          reward=float(res.reward[0]),
                          terminated=bool(res.terminated[0]),
                          truncated=bool(res.truncated[0]),
                          info=info)


def step_batch(envs, actions):
    """Step a batch: either a RacingVecEnv or a sequence of RacingEnv.

    Results are independent of instance order because every instance owns
    its rng stream.  Terminated instances are auto-reset and their fresh
    observation is returned next to the terminal flag.
    """
    if isinstance(envs, RacingVecEnv) and not isinstance(envs, RacingEnv):
        actions = np.asarray(actions)
        if len(actions) != envs.n_envs:
            raise ValueError(f"expected {envs.n_envs} actions, got {len(actions)}")
        return envs.step(actions)
    envs = list(envs)
    actions = np.asarray(actions, dtype=np.float64)
    if len(actions) != len(envs):
        raise ValueError(f"expected {len(envs)} actions, got {len(actions)}")
    return [env.step(a, auto_reset=True) for env, a in zip(envs, actions)]


# ---------------------------------------------------------------------------
# Environment configuration files

_ENV_KEYS = {
    "dt": float, "n_lookahead": int, "lookahead_spacing": float,
    "action_scale_delta": float, "action_scale_accel": float,
    "track_representation": str, "action_space": str,
    "model_actuators": parse_bool, "max_episode_steps": int,
    "reset_speed_max": float,
    "obs_max_vx": float, "obs_max_vy": float, "obs_max_r": float,
    "obs_max_n": float, "obs_max_u": float, "obs_max_curvature": float,
    "obs_max_width": float,
}


def load_env_setup(path, overrides: dict | None = None):
    """Read an environment config file.

    Returns (track, params, EnvConfig).  ``track`` and ``params`` entries
    are paths resolved relative to the config file.  ``overrides`` (already
    typed) take precedence over file values.
    """
    path = Path(path)
    raw = read_kv(path)
    base = path.parent

    def take(key, default=None):
        return raw.pop(key, default)

    track_file = take("track")
    params_file = take("params")
    if track_file is None:
        raise ConfigError(f"{path}: missing 'track' entry")
    sigma = float(take("randomization_sigma", "0.0"))
    mode = take("randomization_mode", "friction_only")
    vehicle_width = float(take("vehicle_width", "0.0"))
    resolution = float(take("track_resolution", "0.05"))

    kwargs = {}
    for key, conv in _ENV_KEYS.items():
        if key in raw:
            try:
                kwargs[key] = conv(raw.pop(key))
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {key}: {exc}") from None
    if raw:
        raise ConfigError(f"{path}: unknown keys {sorted(raw)}")
    if overrides:
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
    config = EnvConfig(randomization=RandomizationSpec(sigma=sigma, mode=mode),
                       **kwargs)

    track = load_track(base / track_file, resolution=resolution,
                       vehicle_width=vehicle_width)
    if params_file is None:
        params = VehicleParams.nominal()
    else:
        params = read_params(base / params_file)
    return track, params, config


def apply_ablation(config: EnvConfig, name: str) -> EnvConfig:
    """Map an ablation preset name onto config changes."""
    if name == "obs-s":
        return replace(config, track_representation="progress")
    if name == "wheel-speed":
        return replace(config, action_space="wheel_speed")
    if name == "no-actuators":
        return replace(config, model_actuators=False)
    for prefix, mode in (("dr-friction-", "friction_only"),
                         ("dr-all-", "all_single_track")):
        if name.startswith(prefix):
            try:
                sigma = float(name[len(prefix):])
            except ValueError:
                raise ConfigError(f"bad ablation sigma in {name!r}") from None
            return replace(config,
                           randomization=RandomizationSpec(sigma=sigma, mode=mode))
    raise ConfigError(f"unknown ablation preset {name!r}")
