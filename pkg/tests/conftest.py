import numpy as np
import pytest

from apexracer import track as track_mod
from apexracer.dynamics import VehicleParams


@pytest.fixture(scope="session")
def oval_track():
    pts, widths = track_mod.generate_oval(12.0, 1.0)
    return track_mod.build_track(pts, widths)

@pytest.fixture(scope="session")
def lshape_track():
    pts, widths = track_mod.generate_lshape(17.0, 1.0)
    return track_mod.build_track(pts, widths)


@pytest.fixture(scope="session")
def circle_track():
    ang = np.deg2rad(np.arange(0.0, 360.0, 1.0))
    pts = np.column_stack([2.0 * np.cos(ang), 2.0 * np.sin(ang)])
    return track_mod.build_track(pts, np.full(len(pts), 1.0))


@pytest.fixture(scope="session")
def nominal_params():
    return VehicleParams.nominal()
