"""Cross-backend agreement between the compiled core and the numpy
fallback, plus backend selection plumbing."""

import numpy as np
import pytest

from apexracer import _kernels
from apexracer._kernels import get_backend, pybackend
from apexracer.dynamics import VehicleParams


def _compiled_or_skip():
    try:
        return get_backend("compiled")
    except ImportError:
        pytest.skip("compiled backend not built")


def _random_batch(rng, n):
    state = np.zeros((n, 8))
    state[:, 0] = rng.uniform(-5, 5, n)
    state[:, 1] = rng.uniform(-5, 5, n)
    state[:, 2] = rng.uniform(-3.2, 3.2, n)
    state[:, 3] = rng.uniform(0.0, 5.0, n)
    state[:, 4] = rng.uniform(-0.5, 0.5, n)
    state[:, 5] = rng.uniform(-3, 3, n)
    state[:, 6] = rng.uniform(-0.5, 0.5, n)
    state[:, 7] = rng.uniform(0, 120, n)
    cmd = np.column_stack([rng.uniform(-0.5, 0.5, n), rng.uniform(0, 150, n)])
    params = np.tile(VehicleParams.nominal().to_array(), (n, 1))
    params[:, 5] *= rng.uniform(0.8, 1.2, n)  # per-env mu spread
    return state, cmd, params


def test_integrate_agreement():
    fast = _compiled_or_skip()
    rng = np.random.default_rng(0)
    state, cmd, params = _random_batch(rng, 257)
    s_fast, s_py = state.copy(), state.copy()
    r_fast = fast.integrate_batch(s_fast, cmd, params, 0.05, 10)
    r_py = pybackend.integrate_batch(s_py, cmd, params, 0.05, 10)
    assert r_fast == r_py == (-1, -1)
    assert np.abs(s_fast - s_py).max() < 1e-10


def test_integrate_agreement_no_actuators():
    fast = _compiled_or_skip()
    rng = np.random.default_rng(1)
    state, cmd, params = _random_batch(rng, 64)
    s_fast, s_py = state.copy(), state.copy()
    fast.integrate_batch(s_fast, cmd, params, 0.05, 10, False)
    pybackend.integrate_batch(s_py, cmd, params, 0.05, 10, False)
    assert np.abs(s_fast - s_py).max() < 1e-10


def test_frenet_agreement(oval_track):
    fast = _compiled_or_skip()
    trk = oval_track
    rng = np.random.default_rng(2)
    n = 400
    qx = rng.uniform(trk.xs.min() - 1, trk.xs.max() + 1, n)
    qy = rng.uniform(trk.ys.min() - 1, trk.ys.max() + 1, n)
    yaw = rng.uniform(-3, 3, n)
    h1 = np.full(n, -1, dtype=np.int64)
    h2 = np.full(n, -1, dtype=np.int64)
    out_fast = fast.frenet_batch(trk.xs, trk.ys, trk.theta, trk.resolution,
                                 trk.total_length, qx, qy, yaw, h1)
    out_py = pybackend.frenet_batch(trk.xs, trk.ys, trk.theta, trk.resolution,
                                    trk.total_length, qx, qy, yaw, h2)
    for a, b in zip(out_fast, out_py):
        assert np.abs(a - b).max() < 1e-8
    assert np.array_equal(h1, h2)


def test_lookahead_agreement(lshape_track):
    fast = _compiled_or_skip()
    trk = lshape_track
    rng = np.random.default_rng(3)
    s = rng.uniform(0, trk.total_length, 200)
    a = fast.lookahead_batch(trk.curvature, trk.width_full, trk.resolution,
                             trk.total_length, s, 10, 0.3)
    b = pybackend.lookahead_batch(trk.curvature, trk.width_full,
                                  trk.resolution, trk.total_length, s, 10, 0.3)
    assert np.abs(a[0] - b[0]).max() < 1e-12
    assert np.abs(a[1] - b[1]).max() < 1e-12


def test_backend_selected():
    assert _kernels.BACKEND_NAME in ("compiled", "python")


def test_python_backend_forced(monkeypatch):
    # APEXRACER_BACKEND=python must swap every kernel entry point
    import importlib
    import apexracer._kernels as kern
    monkeypatch.setenv("APEXRACER_BACKEND", "python")
    reloaded = importlib.reload(kern)
    try:
        assert reloaded.BACKEND_NAME == "python"
    finally:
        monkeypatch.delenv("APEXRACER_BACKEND")
        importlib.reload(kern)
