"""Parameter identification from 100 Hz drive logs.

The fit minimizes the weighted MSE between measured state trajectories and
model rollouts over fixed-horizon segments, with gradients obtained either
by reverse-mode differentiation through the rollout (torch) or by central
finite differences in log-parameter space.  Parameters are optimized in
log space so they stay positive.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import savgol_filter

from ._kernels import modelmath as mm
from .dynamics import (PARAM_FIELDS, STATE_FIELDS, ActuatorCommand,
                       VehicleParams, VehicleState, simulate)
from .errors import ConfigError, DivergenceError, LogGapError, ParseError

MAX_GAP_S = 0.011  # tolerated timestamp gap at 100 Hz
NONFINITE_PENALTY = 1e6

LOG_COLUMNS = ("t", "x", "y", "yaw", "omega", "delta", "delta_ref", "omega_ref")

# position and yaw integrate velocity errors, so they are down-weighted;
# wheel speed is weighted by ~R_w^2 to express its error in contact-speed
# units comparable to the body velocities
DEFAULT_STATE_WEIGHTS = {
    "x": 0.1, "y": 0.1, "yaw": 0.1,
    "vx": 1.0, "vy": 1.0, "r": 1.0,
    "delta": 1.0, "omega": 0.0025,
}

DEFAULT_FIT_PARAMS = ("m", "Iz", "mu", "T_delta", "T_omega")

_TORCH_OPS = mm.ops_for(torch)


@dataclass
class DriveLog:
    """Synchronous 100 Hz identification dataset."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    yaw: np.ndarray
    omega: np.ndarray
    delta: np.ndarray
    delta_ref: np.ndarray
    omega_ref: np.ndarray

    def __len__(self):
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.t)))


@dataclass
class TrainingSegment:
    """One fixed-horizon training example.

    ``target_states[0]`` is the measured initial state itself (its error is
    identically zero); commands are the per-sample inputs, of which the
    first ``horizon - 1`` drive the transitions.
    """

    initial_state: np.ndarray    # (8,)
    command_sequence: np.ndarray  # (horizon, 2)
    target_states: np.ndarray    # (horizon, 8)


@dataclass
class SysIdConfig:
    horizon: int = 85
    learning_rate: float = 0.03
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 100
    state_weights: dict = field(default_factory=lambda: dict(DEFAULT_STATE_WEIGHTS))
    gradient_mode: str = "analytic"   # analytic | fd
    fit_params: tuple = DEFAULT_FIT_PARAMS
    fd_step: float = 1e-4             # central-difference step in log space
    max_grad_norm: float = 50.0       # BPTT gradients spike near unstable rollouts
    reject_grad_norm: float = 1e4     # skip steps whose raw gradient exploded
    dt: float = 0.01
    substeps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 2:
            raise ConfigError("horizon must be >= 2")
        if self.gradient_mode not in ("analytic", "fd"):
            raise ConfigError(f"unknown gradient_mode {self.gradient_mode!r}")
        w = np.array([self.state_weights.get(f, 0.0) for f in STATE_FIELDS])
        if np.any(w < 0) or not np.any(w > 0):
            raise ConfigError("state_weights must be >= 0 with at least one > 0")
        unknown = set(self.fit_params) - set(PARAM_FIELDS)
        if unknown:
            raise ConfigError(f"unknown fit parameters {sorted(unknown)}")

    def weights_array(self) -> np.ndarray:
        return np.array([self.state_weights.get(f, 0.0) for f in STATE_FIELDS],
                        dtype=np.float64)


# ---------------------------------------------------------------------------
# Log ingestion and preprocessing

def ingest_log(path) -> DriveLog:
    """Read and validate a drive-log CSV (header ``t,x,y,yaw,omega,delta,
    delta_ref,omega_ref``)."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file")
        cols = [c.strip().lower() for c in header]
        if tuple(cols) != LOG_COLUMNS:
            raise ParseError(
                f"{path}:1: expected header {','.join(LOG_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(LOG_COLUMNS):
                raise ParseError(f"{path}:{lineno}: expected "
                                 f"{len(LOG_COLUMNS)} columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    t = data[:, 0]
    dts = np.diff(t)
    if np.any(dts <= 0):
        bad = int(np.argmax(dts <= 0))
        raise ParseError(f"{path}: non-increasing timestamp at t={t[bad + 1]:.4f}")
    if np.any(dts > MAX_GAP_S):
        bad = int(np.argmax(dts > MAX_GAP_S))
        raise LogGapError(
            f"{path}: {dts[bad] * 1e3:.1f} ms gap at t={t[bad]:.4f} s "
            f"(max {MAX_GAP_S * 1e3:.0f} ms)")
    return DriveLog(*(data[:, k] for k in range(len(LOG_COLUMNS))))


def write_log(path, log: DriveLog):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for k in range(len(log)):
            writer.writerow([f"{getattr(log, c)[k]:.9g}" for c in LOG_COLUMNS])


def estimate_velocities(log: DriveLog, window: int = 11, polyorder: int = 3):
    """Body-frame vx, vy, yaw rate from Savitzky-Golay differentiation."""
    if window % 2 != 1 or window <= polyorder:
        raise ConfigError("window must be odd and greater than polyorder")
    if len(log) < window:
        raise ConfigError(f"log length {len(log)} shorter than window {window}")
    dt = log.dt
    vx_w = savgol_filter(log.x, window, polyorder, deriv=1, delta=dt)
    vy_w = savgol_filter(log.y, window, polyorder, deriv=1, delta=dt)
    yaw_unwrapped = np.unwrap(log.yaw)
    r = savgol_filter(yaw_unwrapped, window, polyorder, deriv=1, delta=dt)
    cos_y, sin_y = np.cos(log.yaw), np.sin(log.yaw)
    vx = cos_y * vx_w + sin_y * vy_w
    vy = -sin_y * vx_w + cos_y * vy_w
    return vx, vy, r


def make_segments(log: DriveLog, velocities, horizon: int = 85):
    """Cut the log into overlapping segments (stride = horizon // 2)."""
    vx, vy, r = velocities
    states = np.column_stack([log.x, log.y, np.unwrap(log.yaw),
                              vx, vy, r, log.delta, log.omega])
    cmds = np.column_stack([log.delta_ref, log.omega_ref])
    stride = max(horizon // 2, 1)
    segments = []
    start = 0
    while start + horizon <= len(log):
        segments.append(TrainingSegment(
            initial_state=states[start].copy(),
            command_sequence=cmds[start:start + horizon].copy(),
            target_states=states[start:start + horizon].copy(),
        ))
        start += stride
    return segments


# ---------------------------------------------------------------------------
# Differentiable rollout and loss

def _param_tensors(base: VehicleParams, fit_params, log_p: torch.Tensor):
    p = {}
    fitted = {name: k for k, name in enumerate(fit_params)}
    for name in PARAM_FIELDS:
        if name in fitted:
            p[name] = torch.exp(log_p[fitted[name]])
        else:
            p[name] = torch.tensor(getattr(base, name), dtype=torch.float64)
    return p

def _rollout_batch(p: dict, init: torch.Tensor, cmds: torch.Tensor,
                   dt: float, substeps: int) -> torch.Tensor:
    """RK4 rollout matching the kernel integrator; returns (B, H, 8)."""
    n_steps = cmds.shape[1] - 1
    h = dt / substeps
    cols = list(init.unbind(dim=1))  # x, y, yaw, vx, vy, r, delta, omega
    out = [torch.stack(cols, dim=1)]

    def deriv(c, dref, oref):
        return mm.derivatives_cols(c[2], c[3], c[4], c[5], c[6], c[7],
                                   dref, oref, p, _TORCH_OPS, True)

    for k in range(n_steps):
        dref = cmds[:, k, 0]
        oref = cmds[:, k, 1]
        for _ in range(substeps):
            k1 = deriv(cols, dref, oref)
            y2 = [c + 0.5 * h * d for c, d in zip(cols, k1)]
            k2 = deriv(y2, dref, oref)
            y3 = [c + 0.5 * h * d for c, d in zip(cols, k2)]
            k3 = deriv(y3, dref, oref)
            y4 = [c + h * d for c, d in zip(cols, k3)]
            k4 = deriv(y4, dref, oref)
            cols = [c + (h / 6.0) * (a + 2 * b_ + 2 * c_ + d_)
                    for c, a, b_, c_, d_ in zip(cols, k1, k2, k3, k4)]
            cols[6] = torch.clamp(cols[6], -p["delta_max"], p["delta_max"])
            cols[7] = torch.clamp(cols[7], torch.zeros((), dtype=torch.float64),
                                  p["omega_max"])
        out.append(torch.stack(cols, dim=1))
    return torch.stack(out, dim=1)


def _batch_loss(p: dict, init: torch.Tensor, cmds: torch.Tensor,
                targets: torch.Tensor, weights: torch.Tensor,
                dt: float, substeps: int) -> torch.Tensor:
    pred = _rollout_batch(p, init, cmds, dt, substeps)
    err = (pred - targets) ** 2 * weights
    per_seg = err.mean(dim=(1, 2))
    finite = torch.isfinite(per_seg)
    if not bool(finite.all()):
        per_seg = torch.where(finite, per_seg,
                              torch.full_like(per_seg, NONFINITE_PENALTY).detach())
    return per_seg.mean()


def _segment_tensors(segments):
    init = torch.tensor(np.stack([s.initial_state for s in segments]),
                        dtype=torch.float64)
    cmds = torch.tensor(np.stack([s.command_sequence for s in segments]),
                        dtype=torch.float64)
    targets = torch.tensor(np.stack([s.target_states for s in segments]),
                           dtype=torch.float64)
    return init, cmds, targets


def rollout_loss(params: VehicleParams, segment: TrainingSegment,
                 weights=None, dt: float = 0.01, substeps: int = 1) -> float:
    """Weighted MSE between a rollout from the segment's initial state and
    its targets; non-finite rollouts score a large finite penalty."""
    if weights is None:
        weights = np.array([DEFAULT_STATE_WEIGHTS[f] for f in STATE_FIELDS])
    else:
        weights = np.asarray(weights, dtype=np.float64)
    init, cmds, targets = _segment_tensors([segment])
    p = {name: torch.tensor(getattr(params, name), dtype=torch.float64)
         for name in PARAM_FIELDS}
    with torch.no_grad():
        loss = _batch_loss(p, init, cmds, targets,
                           torch.tensor(weights), dt, substeps)
    return float(loss)


def batch_loss_at(log_p: np.ndarray, base: VehicleParams, fit_params,
                  init, cmds, targets, weights, dt, substeps) -> float:
    """Loss at a log-parameter point (used by FD gradients and probes)."""
    with torch.no_grad():
        p = _param_tensors(base, fit_params,
                           torch.tensor(log_p, dtype=torch.float64))
        return float(_batch_loss(p, init, cmds, targets, weights, dt, substeps))


def gradient(log_p: np.ndarray, base: VehicleParams, fit_params,
             init, cmds, targets, weights, dt, substeps,
             mode: str = "analytic", fd_step: float = 1e-4) -> np.ndarray:
    """Gradient of the batch loss w.r.t. log parameters."""
    if mode == "analytic":
        lp = torch.tensor(log_p, dtype=torch.float64, requires_grad=True)
        p = _param_tensors(base, fit_params, lp)
        loss = _batch_loss(p, init, cmds, targets, weights, dt, substeps)
        loss.backward()
        return lp.grad.detach().numpy().copy()
    grad = np.zeros(len(log_p))
    for k in range(len(log_p)):
        up, dn = log_p.copy(), log_p.copy()
        up[k] += fd_step
        dn[k] -= fd_step
        f_up = batch_loss_at(up, base, fit_params, init, cmds, targets,
                             weights, dt, substeps)
        f_dn = batch_loss_at(dn, base, fit_params, init, cmds, targets,
                             weights, dt, substeps)
        grad[k] = (f_up - f_dn) / (2.0 * fd_step)
    return grad


def fit(segments, init_params: VehicleParams, config: SysIdConfig):
    """Minimize mean rollout loss with AdamW over log parameters.

    Returns (best parameters, per-epoch mean loss history).
    """
    if not segments:
        raise ConfigError("need at least one segment")
    weights = torch.tensor(config.weights_array())
    init_t, cmds_t, targets_t = _segment_tensors(segments)

    log_p = torch.tensor(
        np.log([getattr(init_params, n) for n in config.fit_params]),
        dtype=torch.float64, requires_grad=True)
    opt = torch.optim.AdamW([log_p], lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(segments)
    history = []
    best_loss = math.inf
    best_log_p = log_p.detach().numpy().copy()
    bad_streak = 0

    for epoch in range(config.epochs):
        # cosine decay: Adam at a fixed lr oscillates by about the lr in log
        # space, which would cap the achievable parameter precision
        frac = 0.5 * (1.0 + math.cos(math.pi * epoch / max(config.epochs, 1)))
        lr_now = config.learning_rate * (0.02 + 0.98 * frac)
        for group in opt.param_groups:
            group["lr"] = lr_now
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            b_init, b_cmds, b_targets = init_t[idx], cmds_t[idx], targets_t[idx]
            lp_np = log_p.detach().numpy().copy()
            if config.gradient_mode == "analytic":
                opt.zero_grad()
                p = _param_tensors(init_params, config.fit_params, log_p)
                loss = _batch_loss(p, b_init, b_cmds, b_targets, weights,
                                   config.dt, config.substeps)
                loss.backward()
                if not bool(torch.isfinite(log_p.grad).all()):
                    # a diverged rollout poisons the gradient; the penalty on
                    # the loss already steers away, so drop the bad entries
                    log_p.grad = torch.nan_to_num(log_p.grad, nan=0.0,
                                                  posinf=0.0, neginf=0.0)
                epoch_losses.append(loss.item())
            else:
                g = gradient(lp_np, init_params, config.fit_params,
                             b_init, b_cmds, b_targets, weights,
                             config.dt, config.substeps,
                             mode="fd", fd_step=config.fd_step)
                epoch_losses.append(
                    batch_loss_at(lp_np, init_params, config.fit_params,
                                  b_init, b_cmds, b_targets, weights,
                                  config.dt, config.substeps))
                opt.zero_grad()
                log_p.grad = torch.tensor(g, dtype=torch.float64)
            # rollouts through marginally unstable parameter regions produce
            # chaotic gradient spikes; those directions carry no usable
            # signal, so extreme batches are skipped and moderate outliers
            # clipped (minibatch shuffling moves the iterate past them)
            raw_norm = float(torch.linalg.vector_norm(log_p.grad))
            if config.reject_grad_norm > 0 and raw_norm > config.reject_grad_norm:
                continue
            if config.max_grad_norm > 0:
                torch.nn.utils.clip_grad_norm_([log_p], config.max_grad_norm)
            opt.step()
        epoch_loss = float(np.mean(epoch_losses))
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_log_p = log_p.detach().numpy().copy()
        if epoch_loss > 10.0 * history[0]:
            bad_streak += 1
            if bad_streak >= 20:
                raise DivergenceError(
                    f"loss {epoch_loss:.3g} above 10x the initial "
                    f"{history[0]:.3g} for 20 consecutive epochs; "
                    "try a smaller learning rate")
        else:
            bad_streak = 0

    fitted = {n_: float(np.exp(v))
              for n_, v in zip(config.fit_params, best_log_p)}
    out = VehicleParams(**{
        name: fitted.get(name, getattr(init_params, name))
        for name in PARAM_FIELDS})
    return out, history


# ---------------------------------------------------------------------------
# Synthetic data (the acceptance path: no physical car at desk scale)

def make_synthetic_log(params: VehicleParams, duration: float = 60.0,
                       seed: int = 0, dt: float = 0.01,
                       substeps: int = 1) -> DriveLog:
    """Drive the model with a rich multi-sine excitation and emit a log.

    Steering sweeps both slip-angle signs, the speed profile covers
    acceleration, coasting and braking so that mass, inertia, friction and
    both actuator constants are all observable.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration / dt))
    t = np.arange(n) * dt
    ph = rng.uniform(0, 2 * np.pi, size=6)
    speed = np.clip(
        2.4
        + 1.3 * np.sin(2 * np.pi * 0.05 * t + ph[3])
        + 0.8 * np.sin(2 * np.pi * 0.17 * t + ph[4])
        + 0.4 * np.sin(2 * np.pi * 0.43 * t + ph[5]),
        0.6, 4.4)
    # periodic coast-downs isolate the resistance forces from tire action
    speed = np.where(np.mod(t, 12.0) > 10.0, 0.5, speed)
    # slew-limit the speed reference to the same contact-patch acceleration
    # budget the policy gets; instant steps drive the slip ratio deep into
    # saturation, which is neither drivable nor BPTT-friendly
    max_step = 5.0 * dt
    for k in range(1, len(speed)):
        speed[k] = speed[k - 1] + np.clip(speed[k] - speed[k - 1],
                                          -max_step, max_step)
    omega_ref = np.clip(speed / params.R_w, 0.0, params.omega_max)
    # back the steering off with speed so the lateral demand stays under the
    # grip ceiling (the resistance terms that anchor the inertial scale are
    # most visible in fast, controlled stretches)
    grip = np.minimum(1.0, (2.0 / speed) ** 1.5)
    delta_ref = np.clip(
        (0.30 * np.sin(2 * np.pi * 0.21 * t + ph[0])
         + 0.16 * np.sin(2 * np.pi * 0.73 * t + ph[1])
         + 0.05 * np.sin(2 * np.pi * 1.9 * t + ph[2])) * grip,
        -0.45, 0.45)

    init = VehicleState(vx=speed[0], omega=speed[0] / params.R_w)
    cmds = [ActuatorCommand(d, o) for d, o in zip(delta_ref, omega_ref)]
    traj = simulate(init, cmds[:-1], params, dt=dt, substeps=substeps)
    return DriveLog(t=t, x=traj[:, 0], y=traj[:, 1], yaw=traj[:, 2],
                    omega=traj[:, 7], delta=traj[:, 6],
                    delta_ref=delta_ref, omega_ref=omega_ref)
