import numpy as np
import pytest

from apexracer import track
from apexracer.errors import (DegenerateOffsetError, GeometryError,
                              OutOfDomainError, ParseError)


def square_track(width=0.5):
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return track.build_track(pts, np.full(4, width))


def test_square_length_and_straight_curvature():
    trk = square_track()
    assert trk.total_length == pytest.approx(4.0, abs=1e-9)
    # mid-straight samples sit well clear of the corner smoothing window
    for s in (0.5, 1.5, 2.5, 3.5):
        idx = int(round(s / trk.resolution))
        assert abs(trk.curvature[idx]) < 1e-9


def test_circle_curvature_everywhere(circle_track):
    assert np.abs(circle_track.curvature - 0.5).max() < 0.005


def test_circle_curvature_invariant_fine_sampling():
    # R/50 grid spacing on an R=2 circle
    ang = np.deg2rad(np.arange(0.0, 360.0, 1.0))
    pts = np.column_stack([2.0 * np.cos(ang), 2.0 * np.sin(ang)])
    trk = track.build_track(pts, np.full(len(pts), 1.0), resolution=0.04)
    assert np.abs(trk.curvature / 0.5 - 1.0).max() < 0.01


def test_ccw_circle_curvature_positive(circle_track):
    # left-turn-positive sign convention
    assert np.all(circle_track.curvature > 0)


def test_load_track_roundtrip(tmp_path, circle_track):
    path = tmp_path / "circle.csv"
    ang = np.deg2rad(np.arange(0.0, 360.0, 1.0))
    pts = np.column_stack([2.0 * np.cos(ang), 2.0 * np.sin(ang)])
    track.save_track_csv(path, pts, np.full(len(pts), 1.0))
    trk = track.load_track(path)
    assert trk.total_length == pytest.approx(circle_track.total_length)
    track.validate_track(trk)


def test_load_track_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,width\n0,0,1\n1,0,oops\n1,1,1\n0,1,1\n")
    with pytest.raises(ParseError, match="3"):
        track.load_track(path)


def test_load_track_open_loop(tmp_path):
    # dense half-circle that never closes
    ang = np.linspace(0, np.pi, 200)
    rows = "\n".join(f"{2 * np.cos(a)},{2 * np.sin(a)},1.0" for a in ang)
    path = tmp_path / "open.csv"
    path.write_text("x,y,width\n" + rows + "\n")
    with pytest.raises(GeometryError, match="open loop"):
        track.load_track(path)


def test_load_track_too_few_points(tmp_path):
    path = tmp_path / "few.csv"
    path.write_text("x,y,width\n0,0,1\n1,0,1\n1,1,1\n")
    with pytest.raises(ParseError, match="4"):
        track.load_track(path)


def test_export_resampled(tmp_path, oval_track):
    out = tmp_path / "resampled.csv"
    track.export_resampled(out, oval_track)
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "s,x,y,curvature,width"
    assert len(rows) - 1 == oval_track.n_segments


def test_frenet_identity_on_centerline(oval_track):
    s_query = 3.21
    x, y, tangent = track.frenet_to_global(oval_track, s_query, 0.0)
    pose = track.global_to_frenet(oval_track, x, y, tangent)
    assert pose.n == pytest.approx(0.0, abs=1e-9)
    assert pose.u == pytest.approx(0.0, abs=1e-9)
    assert pose.s == pytest.approx(s_query, abs=1e-9)


def test_frenet_circle_outside_point(circle_track):
    # point 0.3 m outside an R=2 circle, yaw along the tangent
    ang = 0.7
    x, y = 2.3 * np.cos(ang), 2.3 * np.sin(ang)
    yaw = ang + np.pi / 2  # ccw tangent
    pose = track.global_to_frenet(circle_track, x, y, yaw)
    # outside the ccw circle is the right side of travel: negative n
    # (tolerance covers the 1-degree input polygon's chord sagitta)
    assert pose.n == pytest.approx(-0.3, abs=2e-4)
    assert pose.u == pytest.approx(0.0, abs=2e-3)


def test_frenet_to_global_circle_inward(circle_track):
    x, y, _ = track.frenet_to_global(circle_track, 1.0, 0.5)
    # positive n is the left of travel: toward the center for a ccw circle
    assert np.hypot(x, y) == pytest.approx(1.5, abs=2e-4)


def test_frenet_to_global_straight_offset():
    trk = square_track()
    x, y, tangent = track.frenet_to_global(trk, 0.5, 0.25)
    assert (x, y) == pytest.approx((0.5, 0.25), abs=1e-9)
    assert tangent == pytest.approx(0.0, abs=1e-9)


def test_frenet_roundtrip_random(oval_track, lshape_track, circle_track):
    rng = np.random.default_rng(11)
    for trk in (oval_track, lshape_track, circle_track):
        n_pts = 300
        s_in = rng.uniform(0, trk.total_length, n_pts)
        n_in = rng.uniform(-0.45, 0.45, n_pts)
        u_in = rng.uniform(-3.0, 3.0, n_pts)
        for s0, n0, u0 in zip(s_in, n_in, u_in):
            x, y, tangent = track.frenet_to_global(trk, s0, n0)
            pose = track.global_to_frenet(trk, x, y,
                                          track.wrap_angle(tangent + u0))
            assert abs(track.progress_delta(s0, pose.s, trk.total_length)) < 1e-4
            assert abs(pose.n - n0) < 1e-4
            assert abs(track.wrap_angle(pose.u - u0)) < 1e-4


def test_frenet_hint_consistency(oval_track):
    # hinted sequential queries agree with the full search
    rng = np.random.default_rng(2)
    s_values = np.sort(rng.uniform(0, oval_track.total_length, 50))
    hint = None
    for s0 in s_values:
        x, y, tangent = track.frenet_to_global(oval_track, s0, 0.1)
        pose_full = track.global_to_frenet(oval_track, x, y, tangent)
        pose_hint = track.global_to_frenet(oval_track, x, y, tangent, hint=hint)
        hint = int(pose_hint.s / oval_track.resolution)
        assert pose_hint.s == pytest.approx(pose_full.s, abs=1e-9)
        assert pose_hint.n == pytest.approx(pose_full.n, abs=1e-9)


def test_global_to_frenet_out_of_domain(oval_track):
    with pytest.raises(OutOfDomainError):
        track.global_to_frenet(oval_track, 500.0, 500.0, 0.0)


def test_frenet_to_global_degenerate_offset(circle_track):
    with pytest.raises(DegenerateOffsetError):
        track.frenet_to_global(circle_track, 1.0, 2.5)


def test_lookahead_straight_zero():
    trk = square_track()
    c, w = track.sample_lookahead(trk, 0.45, 3, 0.02)
    assert np.abs(c).max() < 1e-9
    assert w == pytest.approx(np.full(3, 0.5), abs=1e-9)


def test_lookahead_circle(circle_track):
    c, _ = track.sample_lookahead(circle_track, 2.0, 5, 0.3)
    assert c == pytest.approx(np.full(5, 0.5), abs=0.01)


def test_lookahead_wraps_lap_boundary(oval_track):
    trk = oval_track
    s0 = trk.total_length - 0.1
    n_points, spacing = 6, 0.3
    c, w = track.sample_lookahead(trk, s0, n_points, spacing)
    # oracle: manual modular interpolation on the resampled grid
    for i in range(n_points):
        sq = (s0 + i * spacing) % trk.total_length
        idx = min(int(sq / trk.resolution), trk.n_segments - 1)
        t = sq / trk.resolution - idx
        c_exp = trk.curvature[idx] * (1 - t) + trk.curvature[idx + 1] * t
        w_exp = 2 * (trk.half_width[idx] * (1 - t) + trk.half_width[idx + 1] * t)
        assert c[i] == pytest.approx(c_exp, abs=1e-12)
        assert w[i] == pytest.approx(w_exp, abs=1e-12)


def test_progress_delta_cases():
    assert track.progress_delta(16.9, 0.1, 17.0) == pytest.approx(0.2)
    assert track.progress_delta(5.0, 5.3, 17.0) == pytest.approx(0.3)
    assert track.progress_delta(0.1, 16.9, 17.0) == pytest.approx(-0.2)


def test_progress_delta_antisymmetry():
    rng = np.random.default_rng(3)
    length = 17.0
    for _ in range(200):
        a, b = rng.uniform(0, length, 2)
        if abs(abs(a - b) - length / 2) < 1e-9:
            continue
        assert track.progress_delta(a, b, length) == pytest.approx(
            -track.progress_delta(b, a, length), abs=1e-12)


def test_progress_delta_closed_traversal(oval_track):
    length = oval_track.total_length
    s_values = np.linspace(0.3, 0.3 + length, 173) % length
    total = sum(track.progress_delta(s_values[k], s_values[k + 1], length)
                for k in range(len(s_values) - 1))
    assert total == pytest.approx(length, abs=oval_track.resolution)


def test_is_inside(oval_track):
    half_w = float(oval_track.half_width[0])
    inside = track.FrenetPose(s=0.0, n=0.0, u=0.0)
    on_edge = track.FrenetPose(s=0.0, n=-half_w, u=0.0)
    outside = track.FrenetPose(s=0.0, n=half_w + 0.01, u=0.0)
    assert track.is_inside(oval_track, inside)
    assert track.is_inside(oval_track, on_edge)
    assert not track.is_inside(oval_track, outside)


def test_vehicle_width_margin():
    pts, widths = track.generate_oval(12.0, 1.0)
    trk = track.build_track(pts, widths, vehicle_width=0.2)
    assert trk.half_width[0] == pytest.approx(0.4, abs=1e-9)
    with pytest.raises(GeometryError):
        track.build_track(pts, widths, vehicle_width=1.0)


def test_generators_validate():
    for pts, widths in (track.generate_oval(12.0, 1.0),
                        track.generate_lshape(17.0, 1.0),
                        track.generate_random(14.0, 1.0, seed=5)):
        trk = track.build_track(pts, widths)
        track.validate_track(trk)


def test_lshape_length_close_to_requested():
    pts, widths = track.generate_lshape(17.0, 1.0)
    trk = track.build_track(pts, widths)
    assert abs(trk.total_length - 17.0) / 17.0 < 0.02
