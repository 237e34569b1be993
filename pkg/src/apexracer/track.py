"""Closed-track geometry.

A track is a closed centerline resampled onto a uniform arc-length grid,
with per-sample tangent heading, signed curvature (left turn positive) and
half-width.  The Frenet maps in both directions share one definition of the
centerline frame: positions are linear between grid points and the tangent
heading is linear in arc length within each grid cell, so the global->Frenet
projection (a small Newton solve, see ``_kernels``) inverts frenet_to_global
to machine precision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import savgol_filter

from . import _kernels
from .errors import DegenerateOffsetError, GeometryError, OutOfDomainError, ParseError

DEFAULT_RESOLUTION = 0.05


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)


@dataclass
class FrenetPose:
    """Pose relative to the centerline: progress s, lateral offset n (positive
    left), heading error u (wrapped)."""

    s: float
    n: float
    u: float


@dataclass(frozen=True)
class TrackDefinition:
    """Uniformly resampled closed centerline.

    Arrays have ``n_segments + 1`` entries; the last row duplicates the first
    so cell interpolation never needs an index wrap.  Immutable after
    construction and safe to share across threads.
    """

    points: np.ndarray      # (M+1, 2) centerline x, y [m]
    half_width: np.ndarray  # (M+1,) lateral room available to the vehicle center [m]
    arc_length: np.ndarray  # (M+1,) cumulative s, uniform spacing [m]
    curvature: np.ndarray   # (M+1,) signed, left turn positive [1/m]
    theta: np.ndarray       # (M+1,) tangent heading, wrapped [rad]
    total_length: float     # [m]
    resolution: float       # grid spacing ds [m]

    def __post_init__(self):
        # contiguous views for the kernels
        object.__setattr__(self, "xs", np.ascontiguousarray(self.points[:, 0]))
        object.__setattr__(self, "ys", np.ascontiguousarray(self.points[:, 1]))
        object.__setattr__(self, "width_full", np.ascontiguousarray(2.0 * self.half_width))

    @property
    def n_segments(self) -> int:
        return len(self.points) - 1

    def width_at(self, s) -> np.ndarray:
        """Full available width (2x half_width) at arc position(s) s."""
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        _, w = _kernels.lookahead_batch(
            self.curvature, self.width_full,
            self.resolution, self.total_length, s, 1, 1.0)
        return w[:, 0]


def _dedupe(points, widths):
    keep = [0]
    for i in range(1, len(points)):
        if np.hypot(*(points[i] - points[keep[-1]])) > 1e-12:
            keep.append(i)
    # drop a final point that duplicates the first (explicit closure)
    if len(keep) > 1 and np.hypot(*(points[keep[-1]] - points[keep[0]])) <= 1e-12:
        keep = keep[:-1]
    return points[keep], widths[keep]


def build_track(points, widths, resolution=DEFAULT_RESOLUTION, vehicle_width=0.0):
    """Construct a TrackDefinition from closed-loop waypoints.

    ``points``: (N, 2) centerline waypoints (loop closure implicit),
    ``widths``: (N,) full track width per waypoint.  ``vehicle_width``
    shrinks the stored half-width so boundary tests act on the vehicle
    center.
    """
    points = np.asarray(points, dtype=np.float64)
    widths = np.asarray(widths, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise GeometryError("waypoints must be an (N, 2) array")
    points, widths = _dedupe(points, widths)
    if len(points) < 4:
        raise GeometryError(f"need at least 4 distinct waypoints, got {len(points)}")
    if np.any(widths <= vehicle_width):
        raise GeometryError("track width must exceed the vehicle width everywhere")

    closed = np.vstack([points, points[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    # an endpoint far from the start (relative to the waypoint spacing) is an
    # open loop, not an implicit closure
    gap_limit = max(0.5, 1.25 * seg[:-1].max())
    if seg[-1] > gap_limit:
        raise GeometryError(
            f"open loop: endpoint gap {seg[-1]:.3f} m exceeds {gap_limit:.3f} m")

    s_nodes = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(s_nodes[-1])
    n_seg = max(int(round(total / resolution)), 8)
    ds = total / n_seg
    s_grid = np.arange(n_seg) * ds
    widths_c = np.concatenate([widths, widths[:1]])
    xs = np.interp(s_grid, s_nodes, closed[:, 0])
    ys = np.interp(s_grid, s_nodes, closed[:, 1])
    ws = np.interp(s_grid, s_nodes, widths_c)

    theta, curvature = _heading_and_curvature(xs, ys, ds, total)

    def close(a):
        return np.concatenate([a, a[:1]])

    half = (ws - vehicle_width) / 2.0
    if np.any(half <= 0):
        raise GeometryError("non-positive half-width after vehicle margin")
    return TrackDefinition(
        points=np.column_stack([close(xs), close(ys)]),
        half_width=close(half),
        arc_length=np.concatenate([s_grid, [total]]),
        curvature=close(curvature),
        theta=close(theta),
        total_length=total,
        resolution=ds,
    )


def _heading_and_curvature(xs, ys, ds, total):
    """Tangent heading and signed curvature on the uniform grid.

    Raw central-difference headings alias badly when the waypoint spacing is
    close to the grid spacing, so the heading (minus its winding ramp) is
    smoothed with a short Savitzky-Golay window whose derivative doubles as
    the curvature estimate.  Exact for straights and circles.
    """
    m = len(xs)
    dx = np.roll(xs, -1) - np.roll(xs, 1)
    dy = np.roll(ys, -1) - np.roll(ys, 1)
    theta_raw = np.arctan2(dy, dx)

    dth = wrap_angle(np.diff(np.concatenate([theta_raw, theta_raw[:1]])))
    winding = float(np.round(dth.sum() / (2.0 * np.pi)))
    ramp_step = 2.0 * np.pi * winding / m
    resid = np.concatenate([[0.0], np.cumsum(dth[:-1] - ramp_step)]) + theta_raw[0]

    window = min(9, m - 1 if (m - 1) % 2 == 1 else m - 2)
    window = max(window, 5)
    smooth = savgol_filter(resid, window, 2, deriv=0, mode="wrap")
    dsmooth = savgol_filter(resid, window, 2, deriv=1, delta=ds, mode="wrap")
    ramp = ramp_step * np.arange(m)
    theta = wrap_angle(smooth + ramp)
    curvature = dsmooth + 2.0 * np.pi * winding / total
    return theta, curvature


def load_track(path, resolution=DEFAULT_RESOLUTION, vehicle_width=0.0):
    """Load a track CSV (header ``x,y,width``) and resample it.

    Loop closure from the last row back to the first is implicit.
    """
    path = Path(path)
    points = []
    widths = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file")
        cols = [c.strip().lower() for c in header]
        if cols[:3] != ["x", "y", "width"]:
            raise ParseError(f"{path}:1: expected header 'x,y,width', got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise ParseError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                x, y, w = float(row[0]), float(row[1]), float(row[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
            if not np.isfinite([x, y, w]).all():
                raise ParseError(f"{path}:{lineno}: non-finite value in {row!r}")
            points.append((x, y))
            widths.append(w)
    if len(points) < 4:
        raise ParseError(f"{path}: need at least 4 waypoints, got {len(points)}")
    return build_track(np.array(points), np.array(widths), resolution, vehicle_width)


def save_track_csv(path, points, widths):
    """Write waypoints in the track file format (header ``x,y,width``)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "width"])
        for (x, y), w in zip(points, widths):
            writer.writerow([f"{x:.9g}", f"{y:.9g}", f"{w:.9g}"])


def export_resampled(path, track: TrackDefinition):
    """Write the resampled grid as CSV ``s,x,y,curvature,width``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "x", "y", "curvature", "width"])
        for i in range(track.n_segments):
            writer.writerow([
                f"{track.arc_length[i]:.9g}",
                f"{track.points[i, 0]:.9g}",
                f"{track.points[i, 1]:.9g}",
                f"{track.curvature[i]:.9g}",
                f"{2.0 * track.half_width[i]:.9g}",
            ])


def validate_track(track: TrackDefinition):
    """Check structural invariants; raises GeometryError on violation."""
    if np.hypot(*(track.points[-1] - track.points[0])) > 1e-6:
        raise GeometryError("loop not closed")
    if np.any(np.diff(track.arc_length) <= 0):
        raise GeometryError("arc length not strictly increasing")
    if abs(track.arc_length[-1] - track.total_length) > 1e-6:
        raise GeometryError("arc length does not reach total_length")
    if np.any(track.half_width <= 0):
        raise GeometryError("non-positive half-width")
    if not np.isfinite(track.curvature).all():
        raise GeometryError("non-finite curvature")
    tight = np.abs(track.curvature) * track.half_width
    if np.any(tight >= 1.0):
        raise GeometryError(
            "inner boundary degenerate: |curvature| * half_width >= 1 "
            f"(max {tight.max():.3f})")


def global_to_frenet(track: TrackDefinition, x, y, yaw, hint=None) -> FrenetPose:
    """Project a global pose onto the centerline.

    ``hint`` is a caller-owned grid index from a previous query; it makes
    sequential queries O(1) and disambiguates nearly equidistant sections.
    """
    h = np.array([-1 if hint is None else int(hint)], dtype=np.int64)
    s, n, u = _kernels.frenet_batch(
        track.xs, track.ys, track.theta,
        track.resolution, track.total_length,
        np.array([float(x)]), np.array([float(y)]), np.array([float(yaw)]), h)
    max_width = float((2.0 * track.half_width).max())
    if abs(n[0]) > 5.0 * max_width:
        raise OutOfDomainError(
            f"point ({x:.2f}, {y:.2f}) is {abs(n[0]):.2f} m from the centerline "
            f"(> 5 track widths = {5 * max_width:.2f} m)")
    return FrenetPose(s=float(s[0]), n=float(n[0]), u=float(u[0]))


def frenet_to_global(track: TrackDefinition, s, n):
    """Map (s, n) to a global point and the local tangent heading."""
    s = float(np.mod(s, track.total_length))
    i = min(int(s / track.resolution), track.n_segments - 1)
    t = s / track.resolution - i
    cloc = track.curvature[i] * (1 - t) + track.curvature[i + 1] * t
    if abs(n) * abs(cloc) >= 1.0:
        raise DegenerateOffsetError(
            f"|n|={abs(n):.3f} m at or beyond local radius {1.0 / max(abs(cloc), 1e-12):.3f} m")
    dth = wrap_angle(track.theta[i + 1] - track.theta[i])
    th = track.theta[i] + t * dth
    px = track.points[i, 0] + t * (track.points[i + 1, 0] - track.points[i, 0])
    py = track.points[i, 1] + t * (track.points[i + 1, 1] - track.points[i, 1])
    return (px - n * np.sin(th), py + n * np.cos(th), float(wrap_angle(th)))


def sample_lookahead(track: TrackDefinition, s, n_points, spacing=0.3):
    """Curvature and full width at ``n_points`` samples ahead of ``s``.

    Sample i sits at ``s + i * spacing`` (mod L), linearly interpolated.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    c, w = _kernels.lookahead_batch(
        track.curvature, track.width_full,
        track.resolution, track.total_length,
        np.array([float(s)]), n_points, spacing)
    return c[0], w[0]


def progress_delta(s_prev, s_now, total_length):
    """Wrapped progress difference in (-L/2, L/2]."""
    d = np.mod(np.asarray(s_now) - np.asarray(s_prev), total_length)
    return np.where(d > total_length / 2.0, d - total_length, d)[()]


def is_inside(track: TrackDefinition, pose: FrenetPose) -> bool:
    """Boundary test (inclusive): |n| <= half-width at s."""
    w = track.width_at(pose.s)[0]
    return bool(abs(pose.n) <= w / 2.0)


# ---------------------------------------------------------------------------
# Synthetic track generators (waypoint emitters; feed into build_track or a
# track CSV).  All return (points (N,2), widths (N,)).

def _rounded_loop(corners, radius, step=0.02):
    """Sample a closed polygon with rounded corners."""
    corners = np.asarray(corners, dtype=np.float64)
    n = len(corners)
    pts = []
    for k in range(n):
        prev_c = corners[(k - 1) % n]
        cur = corners[k]
        nxt = corners[(k + 1) % n]
        din = (cur - prev_c) / np.linalg.norm(cur - prev_c)
        dout = (nxt - cur) / np.linalg.norm(nxt - cur)
        turn = wrap_angle(np.arctan2(dout[1], dout[0]) - np.arctan2(din[1], din[0]))
        trim = radius * np.tan(abs(turn) / 2.0)
        start = cur - din * trim
        end = cur + dout * trim
        # straight from previous corner's arc end to this arc start
        prev_trim = radius * np.tan(abs(_corner_turn(corners, (k - 1) % n)) / 2.0)
        seg_start = prev_c + din * prev_trim
        seg_len = np.linalg.norm(start - seg_start)
        n_straight = max(int(seg_len / step), 1)
        for j in range(n_straight):
            pts.append(seg_start + din * (seg_len * j / n_straight))
        # arc around the corner
        side = np.sign(turn)
        center = start + side * radius * np.array([-din[1], din[0]])
        a0 = np.arctan2(start[1] - center[1], start[0] - center[0])
        n_arc = max(int(radius * abs(turn) / step), 2)
        for j in range(n_arc):
            a = a0 + side * abs(turn) * j / n_arc
            pts.append(center + radius * np.array([np.cos(a), np.sin(a)]))
    return np.array(pts)


def _corner_turn(corners, k):
    n = len(corners)
    prev_c, cur, nxt = corners[(k - 1) % n], corners[k], corners[(k + 1) % n]
    din = cur - prev_c
    dout = nxt - cur
    return wrap_angle(np.arctan2(dout[1], dout[0]) - np.arctan2(din[1], din[0]))


def _scale_to_length(points, target):
    closed = np.vstack([points, points[:1]])
    length = np.hypot(*np.diff(closed, axis=0).T).sum()
    return points * (target / length)


def generate_oval(length=12.0, width=1.0):
    """Two straights joined by semicircles; corner radius stays generous
    relative to the width so the inner boundary is never degenerate."""
    radius = max(1.2 * width, length / 14.0)
    if 2.0 * np.pi * radius > 0.8 * length:
        radius = 0.8 * length / (2.0 * np.pi)
    straight = (length - 2.0 * np.pi * radius) / 2.0
    step = 0.02
    pts = []
    for j in range(max(int(straight / step), 1)):
        pts.append((straight * j / max(int(straight / step), 1), -radius))
    for j in range(max(int(np.pi * radius / step), 2)):
        a = -np.pi / 2 + np.pi * j / max(int(np.pi * radius / step), 2)
        pts.append((straight + radius * np.cos(a), radius * np.sin(a)))
    for j in range(max(int(straight / step), 1)):
        pts.append((straight - straight * j / max(int(straight / step), 1), radius))
    for j in range(max(int(np.pi * radius / step), 2)):
        a = np.pi / 2 + np.pi * j / max(int(np.pi * radius / step), 2)
        pts.append((radius * np.cos(a), radius * np.sin(a)))
    pts = _scale_to_length(np.array(pts), length)
    return pts, np.full(len(pts), width)


def generate_lshape(length=17.0, width=1.0):
    """L-shaped loop with one concave corner: a fast side and a technical
    sector, echoing a compact indoor layout."""
    radius = max(0.8 * width, 0.3)
    # rectilinear L perimeter is 2(a+b); each rounded 90-degree corner trades
    # 2r of straight for a quarter arc
    delta = 6.0 * (np.pi / 2.0 - 2.0) * radius
    ab = (length - delta) / 2.0
    a = ab / 1.65
    b = ab - a
    d, c = 0.52 * a, 0.48 * b
    corners = [(0, 0), (a, 0), (a, c), (d, c), (d, b), (0, b)]
    pts = _rounded_loop(corners, radius)
    pts = _scale_to_length(pts, length)
    return pts, np.full(len(pts), width)


def generate_random(length=14.0, width=1.0, seed=0):
    """Smooth random closed loop from low-order radial harmonics."""
    rng = np.random.default_rng(seed)
    for attempt in range(32):
        amp_scale = 0.10 * 0.85 ** attempt
        phases = rng.uniform(0, 2 * np.pi, size=4)
        amps = rng.uniform(0.3, 1.0, size=4) * amp_scale / np.arange(2, 6)
        phi = np.linspace(0, 2 * np.pi, 720, endpoint=False)
        r = 1.0 + sum(a * np.cos(k * phi + p)
                      for k, a, p in zip(range(2, 6), amps, phases))
        pts = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
        pts = _scale_to_length(pts, length)
        try:
            trk = build_track(pts, np.full(len(pts), width))
            validate_track(trk)
        except GeometryError:
            continue
        if np.abs(trk.curvature).max() * width / 2.0 < 0.8:
            return pts, np.full(len(pts), width)
    raise GeometryError("could not generate a valid random track")
