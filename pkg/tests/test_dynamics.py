import numpy as np
import pytest

from apexracer import dynamics
from apexracer.dynamics import (ActuatorCommand, RandomizationSpec,
                                VehicleParams, VehicleState, derivatives,
                                integrate_step, randomize_params, tire_forces)
from apexracer.errors import ConfigError, NumericalBlowupError, ParseError


def test_tire_forces_zero_slip(nominal_params):
    fx, fy = tire_forces(nominal_params, 0.0, 0.0, 10.0)
    assert fx == 0.0 and fy == 0.0


def test_tire_forces_linear_regime(nominal_params):
    p = nominal_params
    fz = 12.0
    alpha = 1e-5
    _, fy = tire_forces(p, alpha, 0.0, fz)
    slope = p.mu * fz * p.tire_Df * p.tire_Cf * p.tire_Bf
    assert fy == pytest.approx(slope * alpha, rel=1e-4)


def test_tire_forces_friction_circle(nominal_params):
    p = nominal_params
    fz = 16.0
    cap = p.mu * fz * p.tire_Df
    alphas = np.linspace(-0.6, 0.6, 61)
    kappas = np.linspace(-1.5, 1.5, 61)
    for a in alphas:
        for k in kappas:
            fx, fy = tire_forces(p, a, k, fz)
            assert np.hypot(fx, fy) <= cap + 1e-9


def test_tire_forces_requires_load(nominal_params):
    with pytest.raises(ValueError):
        tire_forces(nominal_params, 0.1, 0.0, 0.0)


def test_derivatives_rest_equilibrium(nominal_params):
    d = derivatives(VehicleState(), ActuatorCommand(), nominal_params)
    assert np.abs(d.to_array()).max() == 0.0


def test_derivatives_steering_rate(nominal_params):
    from dataclasses import replace
    p = replace(nominal_params, T_delta=0.1)
    d = derivatives(VehicleState(), ActuatorCommand(delta_ref=0.5), p)
    assert d.delta == pytest.approx(5.0, abs=1e-12)


def test_derivatives_straight_symmetry(nominal_params):
    p = nominal_params
    st = VehicleState(vx=3.0, omega=3.0 / p.R_w)
    d = derivatives(st, ActuatorCommand(0.0, 3.0 / p.R_w), p)
    assert d.vy == pytest.approx(0.0, abs=1e-12)
    assert d.r == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("t_const", [0.05, 0.1, 0.2])
def test_actuator_step_response(nominal_params, t_const):
    from dataclasses import replace
    p = replace(nominal_params, T_delta=t_const, T_omega=t_const)
    cmd = ActuatorCommand(delta_ref=0.4, omega_ref=80.0)
    st = VehicleState()
    dt = 0.05
    for k in range(int(1.0 / dt)):
        st = integrate_step(st, cmd, p, dt=dt, substeps=10)
        t = (k + 1) * dt
        assert st.delta == pytest.approx(0.4 * (1 - np.exp(-t / t_const)),
                                         abs=1e-4)
        assert st.omega == pytest.approx(80.0 * (1 - np.exp(-t / t_const)),
                                         abs=1e-4 * 80.0 / 0.4)


def test_integrate_substep_convergence(nominal_params):
    st = VehicleState(vx=2.5, omega=50.0, vy=0.1, r=0.3)
    cmd = ActuatorCommand(delta_ref=0.3, omega_ref=70.0)
    coarse = st
    fine = st
    for _ in range(20):
        coarse = integrate_step(coarse, cmd, nominal_params, substeps=10)
        fine = integrate_step(fine, cmd, nominal_params, substeps=20)
    assert np.abs(coarse.to_array() - fine.to_array()).max() < 1e-5


def test_integrate_zero_everything(nominal_params):
    st = integrate_step(VehicleState(), ActuatorCommand(), nominal_params)
    assert np.abs(st.to_array()).max() == 0.0


def test_integrate_blowup_error(nominal_params):
    from dataclasses import replace
    p = replace(nominal_params, Iz=1e-13)
    st = VehicleState(vx=5.0, vy=1.0, r=2.0, delta=0.5, omega=100.0)
    with pytest.raises(NumericalBlowupError) as err:
        for _ in range(50):
            st = integrate_step(st, ActuatorCommand(0.5, 100.0), p)
    assert err.value.substep is not None


def test_integrate_determinism(nominal_params):
    st = VehicleState(vx=2.0, omega=40.0)
    cmd = ActuatorCommand(0.2, 60.0)
    a = b = st
    for _ in range(40):
        a = integrate_step(a, cmd, nominal_params)
        b = integrate_step(b, cmd, nominal_params)
    assert a.to_array().tobytes() == b.to_array().tobytes()


def test_energy_dissipation(nominal_params):
    # wheel speed commanded to zero: drag, rolling and tire braking must
    # bleed speed monotonically to near rest
    st = VehicleState(vx=4.0, omega=80.0)
    cmd = ActuatorCommand(0.0, 0.0)
    prev = st.vx
    for _ in range(200):
        st = integrate_step(st, cmd, nominal_params)
        assert st.vx <= prev + 1e-9
        prev = st.vx
    assert st.vx < 0.05


def test_steady_state_cornering(nominal_params):
    cmd = ActuatorCommand(delta_ref=0.15, omega_ref=40.0)
    coarse = VehicleState(vx=2.0, omega=40.0)
    fine = VehicleState(vx=2.0, omega=40.0)
    for _ in range(100):
        coarse = integrate_step(coarse, cmd, nominal_params, substeps=10)
        fine = integrate_step(fine, cmd, nominal_params, substeps=100)
    assert coarse.r == pytest.approx(fine.r, rel=0.05)
    # converged to a genuine turn
    assert abs(fine.r) > 0.1


def test_model_actuators_off(nominal_params):
    st = VehicleState(vx=2.0, omega=40.0)
    cmd = ActuatorCommand(delta_ref=0.3, omega_ref=70.0)
    out = integrate_step(st, cmd, nominal_params, model_actuators=False)
    assert out.delta == pytest.approx(0.3, abs=1e-12)
    assert out.omega == pytest.approx(70.0, abs=1e-12)


def test_randomize_sigma_zero(nominal_params):
    rng = np.random.default_rng(0)
    out = randomize_params(nominal_params, RandomizationSpec(sigma=0.0), rng)
    assert out == nominal_params


def test_randomize_friction_only(nominal_params):
    rng = np.random.default_rng(1)
    out = randomize_params(nominal_params,
                           RandomizationSpec(sigma=0.1, mode="friction_only"),
                           rng)
    assert out.mu != nominal_params.mu
    changed = [f for f in dynamics.PARAM_FIELDS
               if getattr(out, f) != getattr(nominal_params, f)]
    assert changed == ["mu"]


def test_randomize_all_single_track(nominal_params):
    rng = np.random.default_rng(2)
    out = randomize_params(
        nominal_params, RandomizationSpec(sigma=0.1, mode="all_single_track"),
        rng)
    changed = {f for f in dynamics.PARAM_FIELDS
               if getattr(out, f) != getattr(nominal_params, f)}
    assert changed == {"m", "Iz", "lf", "lr", "mu", "tire_Df", "tire_Dr"}
    assert out.T_delta == nominal_params.T_delta
    assert out.omega_max == nominal_params.omega_max


def test_randomize_scale_statistics(nominal_params):
    rng = np.random.default_rng(3)
    sigma = 0.05
    n = 100_000
    spec = RandomizationSpec(sigma=sigma, mode="friction_only")
    scales = np.array([
        randomize_params(nominal_params, spec, rng).mu / nominal_params.mu
        for _ in range(n)])
    assert abs(scales.mean() - 1.0) < 3.0 * sigma / np.sqrt(n)
    assert scales.min() >= 0.5 and scales.max() <= 1.5


def test_randomize_determinism(nominal_params):
    spec = RandomizationSpec(sigma=0.1, mode="all_single_track")
    a = randomize_params(nominal_params, spec, np.random.default_rng(7))
    b = randomize_params(nominal_params, spec, np.random.default_rng(7))
    assert a == b


def test_params_file_roundtrip(tmp_path, nominal_params):
    path = tmp_path / "params.txt"
    dynamics.write_params(path, nominal_params)
    back = dynamics.read_params(path)
    assert back == nominal_params


def test_params_file_missing_field(tmp_path):
    path = tmp_path / "params.txt"
    path.write_text("m = 3.3\n")
    with pytest.raises(ParseError, match="Iz"):
        dynamics.read_params(path)


def test_params_validation():
    with pytest.raises(ConfigError):
        VehicleParams.nominal().__class__(**{
            **{f: getattr(VehicleParams.nominal(), f)
               for f in dynamics.PARAM_FIELDS},
            "tire_Cf": 2.5})


def test_simulate_shape(nominal_params):
    cmds = [ActuatorCommand(0.1, 40.0)] * 10
    traj = dynamics.simulate(VehicleState(vx=2.0, omega=40.0), cmds,
                             nominal_params, dt=0.01, substeps=1)
    assert traj.shape == (11, 8)
