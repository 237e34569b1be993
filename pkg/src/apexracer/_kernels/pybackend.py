"""Pure-numpy kernel backend.

Semantically identical to the compiled core in ``_fastcore``; used when the
extension is unavailable or when APEXRACER_BACKEND=python.
"""

from __future__ import annotations

import numpy as np

from . import modelmath as mm

BACKEND_NAME = "python"

K_WINDOW = 40   # vertex-search half window around the hint (grid cells)
N_ITER = 12     # Newton iterations (each may shift one cell)
RES_TOL = 1e-9  # accepted projection residual [m]

_OPS = mm.ops_for(np)


def _param_cols(params):
    return {name: params[:, k] for k, name in enumerate(mm.PARAM_FIELDS)}


def _deriv_matrix(state, cmd, p, model_actuators):
    d = mm.derivatives_cols(
        state[:, 2], state[:, 3], state[:, 4], state[:, 5],
        state[:, 6], state[:, 7], cmd[:, 0], cmd[:, 1],
        p, _OPS, model_actuators)
    return np.stack(d, axis=1)


def integrate_batch(state, cmd, params, dt, substeps, model_actuators=True):
    """Advance (B, 8) states in place by dt using RK4 substeps.

    Returns (bad_env, bad_substep); (-1, -1) when every state stayed finite.
    """
    p = _param_cols(params)
    h = dt / substeps
    for ss in range(substeps):
        if not model_actuators:
            state[:, 6] = np.clip(cmd[:, 0], -p["delta_max"], p["delta_max"])
            state[:, 7] = np.clip(cmd[:, 1], 0.0, p["omega_max"])
        k1 = _deriv_matrix(state, cmd, p, model_actuators)
        k2 = _deriv_matrix(state + 0.5 * h * k1, cmd, p, model_actuators)
        k3 = _deriv_matrix(state + 0.5 * h * k2, cmd, p, model_actuators)
        k4 = _deriv_matrix(state + h * k3, cmd, p, model_actuators)
        state += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        state[:, 6] = np.clip(state[:, 6], -p["delta_max"], p["delta_max"])
        state[:, 7] = np.clip(state[:, 7], 0.0, p["omega_max"])
        bad = ~(np.abs(state) < mm.BLOWUP_LIMIT)
        if bad.any():
            return int(np.argwhere(bad)[0][0]), ss
    return -1, -1


def _wrap_pi(a):
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def frenet_batch(xs, ys, theta, ds, total_length, qx, qy, yaw, hint):
    """Project (B,) global poses onto the centerline.

    ``hint`` (int64, in/out) holds the grid cell of the previous projection,
    or -1 for a full search.  Returns (s, n, u).
    """
    m = len(xs) - 1
    b = len(qx)
    j = np.empty(b, dtype=np.int64)

    has_hint = (hint >= 0) & (hint < m)
    full_rows = np.where(~has_hint)[0]
    if has_hint.any():
        rows = np.where(has_hint)[0]
        offs = np.arange(-K_WINDOW, K_WINDOW + 1)
        idx = np.mod(hint[rows, None] + offs[None, :], m)
        d2 = (xs[idx] - qx[rows, None]) ** 2 + (ys[idx] - qy[rows, None]) ** 2
        best = np.argmin(d2, axis=1)
        j[rows] = idx[np.arange(len(rows)), best]
        edge = (best == 0) | (best == 2 * K_WINDOW)
        full_rows = np.concatenate([full_rows, rows[edge]])
    if len(full_rows):
        d2 = (xs[None, :m] - qx[full_rows, None]) ** 2 \
            + (ys[None, :m] - qy[full_rows, None]) ** 2
        j[full_rows] = np.argmin(d2, axis=1)

    # initial cell: nearer of the two segments adjacent to the best vertex
    cand = []
    for i0 in (j - 1, j):
        ix = np.mod(i0, m)
        seg_x = xs[ix + 1] - xs[ix]
        seg_y = ys[ix + 1] - ys[ix]
        t_r = ((qx - xs[ix]) * seg_x + (qy - ys[ix]) * seg_y) / (ds * ds)
        t_c = np.clip(t_r, 0.0, 1.0)
        fx = xs[ix] + t_c * seg_x - qx
        fy = ys[ix] + t_c * seg_y - qy
        cand.append((ix, t_c, fx * fx + fy * fy, seg_x, seg_y))
    take1 = cand[1][2] <= cand[0][2]
    i = np.where(take1, cand[1][0], cand[0][0])
    t = np.where(take1, cand[1][1], cand[0][1])
    seg_x = np.where(take1, cand[1][3], cand[0][3])
    seg_y = np.where(take1, cand[1][4], cand[0][4])
    n = (seg_x * (qy - ys[i]) - seg_y * (qx - xs[i])) / ds
    i_fb, t_fb, n_fb = i.copy(), t.copy(), n.copy()

    for _ in range(N_ITER):
        dth = _wrap_pi(theta[i + 1] - theta[i])
        th = theta[i] + t * dth
        sin_t, cos_t = np.sin(th), np.cos(th)
        seg_x = xs[i + 1] - xs[i]
        seg_y = ys[i + 1] - ys[i]
        rx = xs[i] + t * seg_x - n * sin_t - qx
        ry = ys[i] + t * seg_y + n * cos_t - qy
        j11 = seg_x - n * dth * cos_t
        j21 = seg_y - n * dth * sin_t
        det = j11 * cos_t + j21 * sin_t  # j11*j22 - j12*j21 with j12=-sin, j22=cos
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        t = t + (-rx * cos_t - ry * sin_t) / det
        n = n + (-j11 * ry + j21 * rx) / det
        down, up = t < 0.0, t > 1.0
        i = np.where(down, np.mod(i - 1, m), np.where(up, np.mod(i + 1, m), i))
        t = np.where(down, t + 1.0, np.where(up, t - 1.0, t))

    dth = _wrap_pi(theta[i + 1] - theta[i])
    th = theta[i] + t * dth
    rx = xs[i] + t * (xs[i + 1] - xs[i]) - n * np.sin(th) - qx
    ry = ys[i] + t * (ys[i + 1] - ys[i]) + n * np.cos(th) - qy
    bad = rx * rx + ry * ry > RES_TOL * RES_TOL
    if bad.any():
        # no root reachable (point near/beyond the curvature center):
        # fall back to the clamped polyline projection
        i = np.where(bad, i_fb, i)
        t = np.where(bad, t_fb, t)
        n = np.where(bad, n_fb, n)
        dth = _wrap_pi(theta[i + 1] - theta[i])
        th = theta[i] + t * dth

    s = np.mod((i + t) * ds, total_length)
    u = _wrap_pi(yaw - th)
    hint[:] = i
    return s, n, u


def lookahead_batch(curv, width, ds, total_length, s, n_points, spacing):
    """Linearly interpolated curvature / width at s + k*spacing (mod L)."""
    m = len(curv) - 1
    sq = np.mod(s[:, None] + np.arange(n_points)[None, :] * spacing, total_length)
    pos = sq / ds
    idx = np.minimum(pos.astype(np.int64), m - 1)
    t = pos - idx
    c = curv[idx] * (1.0 - t) + curv[idx + 1] * t
    w = width[idx] * (1.0 - t) + width[idx + 1] * t
    return c, w
