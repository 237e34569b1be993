"""Closed-loop evaluation: lap timing, integrated off-track error, crash
statistics, trajectory export, and a geometric pure-pursuit baseline."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import ActuatorCommand, VehicleParams, VehicleState
from .envs import RacingEnv
from .errors import ApexError, ConfigError
from .track import (TrackDefinition, frenet_to_global, global_to_frenet,
                    progress_delta, sample_lookahead, wrap_angle)


@dataclass
class TrajectoryLog:
    """Per-control-step record of an evaluation run.

    ``violation`` flags boundary-exceeded steps; ``reset`` marks rows that
    start a fresh attempt (initial reset or post-crash), where the pose jump
    must not count as progress.
    """

    dt: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    yaw: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    r: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    s: np.ndarray
    n: np.ndarray
    u: np.ndarray
    delta_ref: np.ndarray
    omega_ref: np.ndarray
    reward: np.ndarray
    violation: np.ndarray
    reset: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass
class EvalReport:
    fastest_clean_lap: float | None
    mean_lap: float | None
    lap_std: float | None
    e_off: float
    crash_rate: float
    lap_count: int


# ---------------------------------------------------------------------------
# Controllers

class PolicyController:
    """Deterministic policy rollout: raw action = tanh mean."""

    def __init__(self, net):
        self.net = net

    def act(self, obs, env: RacingEnv):
        from .trainer import policy_forward
        mean, _, _ = policy_forward(self.net, obs)
        return mean


@dataclass
class BaselineConfig:
    v_cap: float = 3.0          # speed ceiling [m/s]
    a_lat_max: float = 2.5      # lateral acceleration budget [m/s^2]
    lookahead_gain: float = 0.45  # pure-pursuit lookahead per unit speed [s]
    lookahead_min: float = 0.35
    lookahead_max: float = 1.2
    preview_dist: float = 1.6   # curvature preview for the speed target [m]
    v_floor: float = 0.4


def baseline_controller(state: VehicleState, track: TrackDefinition,
                        params: VehicleParams,
                        config: BaselineConfig | None = None,
                        pose=None) -> ActuatorCommand:
    """Pure-pursuit steering toward a speed-scaled centerline point with a
    curvature-limited speed target."""
    cfg = config or BaselineConfig()
    if pose is None:
        pose = global_to_frenet(track, state.x, state.y, state.yaw)
    lookahead = float(np.clip(cfg.lookahead_gain * max(state.vx, 0.0),
                              cfg.lookahead_min, cfg.lookahead_max))
    tx, ty, _ = frenet_to_global(track, pose.s + lookahead, 0.0)
    dx = tx - state.x
    dy = ty - state.y
    cos_y, sin_y = math.cos(state.yaw), math.sin(state.yaw)
    bx = cos_y * dx + sin_y * dy
    by = -sin_y * dx + cos_y * dy
    alpha = math.atan2(by, max(bx, 1e-6))
    wheelbase = params.lf + params.lr
    delta_ref = math.atan2(2.0 * wheelbase * math.sin(alpha), lookahead)
    delta_ref = float(np.clip(delta_ref, -params.delta_max, params.delta_max))

    n_prev = max(int(cfg.preview_dist / 0.3), 2)
    curvs, _ = sample_lookahead(track, pose.s, n_prev, 0.3)
    c_max = float(np.abs(curvs).max())
    v_target = min(cfg.v_cap, math.sqrt(cfg.a_lat_max / max(c_max, 1e-6)))
    v_target = max(v_target, cfg.v_floor)
    omega_ref = float(np.clip(v_target / params.R_w, 0.0, params.omega_max))
    return ActuatorCommand(delta_ref=delta_ref, omega_ref=omega_ref)


class BaselineController:
    """Adapts the pure-pursuit command to the env's raw action space."""

    def __init__(self, config: BaselineConfig | None = None):
        self.config = config or BaselineConfig()

    def act(self, obs, env: RacingEnv):
        state = env.state(0)
        pose = env.frenet(0)
        cmd = baseline_controller(state, env.track, env.base_params,
                                  self.config, pose=pose)
        ecfg = env.config
        a0 = np.clip(cmd.delta_ref / ecfg.action_scale_delta, -1.0, 1.0)
        if ecfg.action_space == "wheel_speed":
            a1 = np.clip(2.0 * cmd.omega_ref / env.base_params.omega_max - 1.0,
                         -1.0, 1.0)
        else:
            now = env.command(0).omega_ref
            slew = (cmd.omega_ref - now) * env.base_params.R_w \
                / (ecfg.action_scale_accel * ecfg.dt)
            a1 = np.clip(slew, -1.0, 1.0)
        return np.array([a0, a1])


# ---------------------------------------------------------------------------
# Closed-loop evaluation

def _warp_to_line(env: RacingEnv):
    """Flying start: move the (already reset) car onto s = 0, n = 0."""
    trk = env.track
    env._state[0, 0] = trk.xs[0]
    env._state[0, 1] = trk.ys[0]
    env._state[0, 2] = trk.theta[0]
    env._s[0] = 0.0
    env._n[0] = 0.0
    env._u[0] = 0.0
    env._hint[0] = 0


def run_eval(controller, env: RacingEnv, n_laps: int,
             max_steps: int | None = None) -> TrajectoryLog:
    """Run deterministically until ``n_laps`` start/finish crossings.

    The session begins with a flying start on the line (s = 0), so each
    crossing completes one lap.  Violations are logged and the run continues
    from the auto-reset, like a timed session containing crashes.
    ``max_steps`` bounds runaway controllers (default: generous per-lap
    budget).
    """
    if n_laps < 1:
        raise ConfigError("n_laps must be >= 1")
    if max_steps is None:
        max_steps = n_laps * 40_000
    cols = {name: [] for name in
            ("t", "x", "y", "yaw", "vx", "vy", "r", "delta", "omega",
             "s", "n", "u", "delta_ref", "omega_ref", "reward",
             "violation", "reset")}
    obs = env.reset()
    _warp_to_line(env)
    obs = env._observe()[0]
    dt = env.config.dt
    total = env.track.total_length
    # t = 0 row: the flying-start state on the line
    st0 = env.state(0)
    cmd0 = env.command(0)
    for key, val in (("t", 0.0), ("x", st0.x), ("y", st0.y), ("yaw", st0.yaw),
                     ("vx", st0.vx), ("vy", st0.vy), ("r", st0.r),
                     ("delta", st0.delta), ("omega", st0.omega),
                     ("s", 0.0), ("n", 0.0), ("u", 0.0),
                     ("delta_ref", cmd0.delta_ref),
                     ("omega_ref", cmd0.omega_ref),
                     ("reward", 0.0), ("violation", False), ("reset", True)):
        cols[key].append(val)
    s_prev = 0.0
    crossings = 0
    fresh = False
    for k in range(max_steps):
        action = controller.act(obs, env)
        res = env.step(action, auto_reset=True)
        st = res.info["state"]
        cmd = env.command(0)
        s_now = float(res.info["s"])
        if not fresh:
            delta = progress_delta(s_prev, s_now, total)
            if delta > 0 and s_now < s_prev:
                crossings += 1
        cols["t"].append((k + 1) * dt)
        cols["x"].append(st[0]); cols["y"].append(st[1]); cols["yaw"].append(st[2])
        cols["vx"].append(st[3]); cols["vy"].append(st[4]); cols["r"].append(st[5])
        cols["delta"].append(st[6]); cols["omega"].append(st[7])
        cols["s"].append(s_now)
        cols["n"].append(float(res.info["n"]))
        cols["u"].append(float(res.info["u"]))
        cols["delta_ref"].append(cmd.delta_ref)
        cols["omega_ref"].append(cmd.omega_ref)
        cols["reward"].append(res.reward)
        cols["violation"].append(res.terminated)
        cols["reset"].append(fresh)
        fresh = bool(res.terminated or res.truncated)
        # after an auto-reset the env already sits at the new pose
        s_prev = env.frenet(0).s if fresh else s_now
        obs = res.observation
        if crossings >= n_laps:
            break
    arrays = {key: np.array(vals) for key, vals in cols.items()}
    arrays["violation"] = arrays["violation"].astype(bool)
    arrays["reset"] = arrays["reset"].astype(bool)
    return TrajectoryLog(dt=dt, **arrays)


def lap_times(traj: TrajectoryLog, total_length: float):
    """Completed laps as (duration, clean) pairs.

    Lap boundaries are forward crossings of s = 0, timed with linear
    sub-step interpolation.  A reset row sitting exactly on the line (the
    flying start) anchors the first lap; other resets break lap continuity.
    A violation marks the enclosing lap attempt not clean.
    """
    laps = []
    lap_start = None
    clean = True
    for k in range(len(traj)):
        if traj.reset[k]:
            on_line = traj.s[k] < 1e-9 or traj.s[k] > total_length - 1e-9
            lap_start = traj.t[k] if on_line else None
            clean = True
        elif k > 0:
            s0, s1 = traj.s[k - 1], traj.s[k]
            delta = progress_delta(s0, s1, total_length)
            if delta > 0 and s1 < s0:
                gap = (total_length - s0) + s1
                frac = (total_length - s0) / gap if gap > 0 else 0.0
                t_cross = traj.t[k - 1] + frac * traj.dt
                if lap_start is not None:
                    laps.append((float(t_cross - lap_start), clean))
                lap_start = t_cross
                clean = True
        if traj.violation[k]:
            clean = False
            lap_start = None  # the attempt ends here
    return laps


def compute_e_off(traj: TrajectoryLog, track: TrackDefinition,
                  n_laps: int) -> float:
    """Per-lap time integral of the boundary excess, trapezoidal rule."""
    if n_laps < 1:
        raise ConfigError("n_laps must be >= 1")
    if len(traj) == 0:
        return 0.0
    half_w = track.width_at(traj.s) / 2.0
    excess = np.maximum(np.abs(traj.n) - half_w, 0.0)
    return float(np.trapezoid(excess, dx=traj.dt) / n_laps)


def count_crossings(traj: TrajectoryLog, total_length: float) -> int:
    """Forward start-line crossings, ignoring reset teleports."""
    crossings = 0
    for k in range(1, len(traj)):
        if traj.reset[k]:
            continue
        s0, s1 = traj.s[k - 1], traj.s[k]
        if s1 < s0 and progress_delta(s0, s1, total_length) > 0:
            crossings += 1
    return crossings


def crash_rate(traj: TrajectoryLog, completed_laps: int) -> float:
    """Fraction of lap attempts containing a violation."""
    crashes = int(traj.violation.sum())
    attempts = completed_laps + crashes
    return crashes / attempts if attempts else 0.0


def build_report(traj: TrajectoryLog, track: TrackDefinition,
                 n_laps: int | None = None) -> EvalReport:
    """Summary statistics.  ``lap_count`` counts start-line crossings (with
    the flying start each one completes a lap); timing statistics come from
    the fully-timed line-to-line laps."""
    laps = lap_times(traj, track.total_length)
    times = np.array([t for t, _ in laps])
    clean = [t for t, ok in laps if ok]
    lap_count = count_crossings(traj, track.total_length)
    return EvalReport(
        fastest_clean_lap=float(min(clean)) if clean else None,
        mean_lap=float(times.mean()) if len(laps) else None,
        lap_std=float(times.std()) if len(laps) else None,
        e_off=compute_e_off(traj, track, n_laps or max(lap_count, 1)),
        crash_rate=crash_rate(traj, lap_count),
        lap_count=lap_count,
    )


# ---------------------------------------------------------------------------
# Export

def export_report(traj: TrajectoryLog, report: EvalReport, track, out_dir):
    """Write trajectory CSV, report JSON, and the per-s velocity profile.

    Fails before creating any file when the trajectory is empty.
    """
    if len(traj) == 0:
        raise ApexError("empty trajectory: nothing to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "y", "yaw", "vx", "vy", "r", "delta",
                         "omega", "s", "n", "reward", "terminated"])
        for k in range(len(traj)):
            writer.writerow([
                f"{traj.t[k]:.6g}", f"{traj.x[k]:.9g}", f"{traj.y[k]:.9g}",
                f"{traj.yaw[k]:.9g}", f"{traj.vx[k]:.9g}", f"{traj.vy[k]:.9g}",
                f"{traj.r[k]:.9g}", f"{traj.delta[k]:.9g}",
                f"{traj.omega[k]:.9g}", f"{traj.s[k]:.9g}", f"{traj.n[k]:.9g}",
                f"{traj.reward[k]:.9g}", int(traj.violation[k])])

    with open(out_dir / "report.json", "w") as fh:
        json.dump({
            "fastest_lap": report.fastest_clean_lap,
            "avg_lap_time": report.mean_lap,
            "lap_time_std": report.lap_std,
            "e_off": report.e_off,
            "crash_rate": report.crash_rate,
            "lap_count": report.lap_count,
        }, fh, indent=2)
        fh.write("\n")

    _export_velocity_profile(traj, track, out_dir / "velocity_profile.csv")
    return [out_dir / "trajectory.csv", out_dir / "report.json",
            out_dir / "velocity_profile.csv"]


def _fastest_clean_slice(traj: TrajectoryLog, total_length: float):
    """Sample range of the fastest clean lap, or the whole log if none."""
    best = None
    lap_start_idx = None
    lap_start_t = None
    clean = True
    for k in range(len(traj)):
        if traj.reset[k]:
            on_line = traj.s[k] < 1e-9 or traj.s[k] > total_length - 1e-9
            if on_line:
                lap_start_idx = k
                lap_start_t = traj.t[k]
            else:
                lap_start_idx = None
            clean = True
        elif k > 0:
            s0, s1 = traj.s[k - 1], traj.s[k]
            if progress_delta(s0, s1, total_length) > 0 and s1 < s0:
                if lap_start_idx is not None and clean:
                    duration = traj.t[k] - lap_start_t
                    if best is None or duration < best[0]:
                        best = (duration, lap_start_idx, k + 1)
                lap_start_idx = k
                lap_start_t = traj.t[k]
                clean = True
        if traj.violation[k]:
            clean = False
            lap_start_idx = None
    if best is None:
        return 0, len(traj)
    return best[1], best[2]


def _export_velocity_profile(traj: TrajectoryLog, track, path):
    """Fig-5-style data: vx and arrival time on the resampled s grid, taken
    from the fastest clean lap (whole log if no clean lap exists)."""
    lo, hi = _fastest_clean_slice(traj, track.total_length)
    s = traj.s[lo:hi]
    vx = traj.vx[lo:hi]
    t = traj.t[lo:hi] - traj.t[lo]
    # unwrap lap progress so interpolation over s is monotone
    s_unwrapped = np.concatenate(
        [[s[0]], s[0] + np.cumsum(progress_delta(s[:-1], s[1:],
                                                 track.total_length))])
    grid = track.arc_length[:-1]
    base = s_unwrapped[0]
    rel = (grid - base) % track.total_length
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "vx", "t_arrival"])
        for sg, soff in zip(grid, rel):
            target = base + soff
            if target > s_unwrapped[-1]:
                vx_i, t_i = math.nan, math.nan
            else:
                vx_i = float(np.interp(target, s_unwrapped, vx))
                t_i = float(np.interp(target, s_unwrapped, t))
            writer.writerow([f"{sg:.9g}", f"{vx_i:.9g}", f"{t_i:.9g}"])
