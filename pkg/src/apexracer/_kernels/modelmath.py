"""Single-track model equations, generic over numpy and torch.

This is the reference statement of the vehicle model; the compiled core
re-implements the same equations in C and is cross-checked against it.

State layout:   x, y, yaw, vx, vy, r, delta, omega
Command layout: delta_ref, omega_ref
Param layout:   see PARAM_FIELDS (one column per field)
"""

from __future__ import annotations

STATE_FIELDS = ("x", "y", "yaw", "vx", "vy", "r", "delta", "omega")

PARAM_FIELDS = (
    "m", "Iz", "lf", "lr", "R_w", "mu",
    "tire_Bf", "tire_Cf", "tire_Df", "tire_Ef",
    "tire_Br", "tire_Cr", "tire_Dr", "tire_Er",
    "T_delta", "T_omega", "c_drag", "c_roll",
    "delta_max", "omega_max",
)

GRAVITY = 9.81
VX_SAFE = 0.3          # longitudinal speed floor in slip-angle denominators [m/s]
V_CONTACT_MIN = 0.3    # contact-speed floor in the slip-ratio denominator [m/s]
CREEP_BLEND_SPEED = 0.1  # below this speed tire forces blend to damped creep [m/s]
SIGMA_MIN = 1e-6       # combined-slip floor for the force-per-slip ratio
ROLL_SMOOTH = 0.05     # speed scale of the smooth sign() in rolling resistance [m/s]
BLOWUP_LIMIT = 1e12    # any state beyond this magnitude counts as a blowup


def ops_for(lib):
    """Adapter for the few function-name differences between numpy and torch."""
    atan = getattr(lib, "arctan", None) or lib.atan
    atan2 = getattr(lib, "arctan2", None) or lib.atan2
    if hasattr(lib, "clamp"):
        floor_at = lambda v, lo: lib.clamp(v, min=lo)   # noqa: E731
        cap_at = lambda v, hi: lib.clamp(v, max=hi)     # noqa: E731
    else:
        floor_at = lib.maximum
        cap_at = lib.minimum
    return dict(sin=lib.sin, cos=lib.cos, atan=atan, atan2=atan2,
                sqrt=lib.sqrt, abs=lib.abs, floor_at=floor_at, cap_at=cap_at)


def tire_curve(b, c, e, sigma, ops):
    """Magic-formula shape sin(C atan(B s - E (B s - atan(B s)))), in [-1, 1]."""
    bs = b * sigma
    return ops["sin"](c * ops["atan"](bs - e * (bs - ops["atan"](bs))))


def axle_forces(kappa, alpha, peak, b, c, e, lam, ops):
    """Combined-slip tire force for one axle, wheel frame.

    Magnitude comes from the magic formula at the combined slip
    sqrt(kappa^2 + alpha^2) and the direction from the slip vector, so the
    force never leaves the friction circle of radius ``peak`` and both
    pure-slip curves are recovered exactly.  ``lam`` in [0, 1] blends toward
    a friction-circle-capped linear creep force near standstill, where the
    slip definitions stop being meaningful.
    """
    sqrt = ops["sqrt"]
    sigma = sqrt(kappa * kappa + alpha * alpha)
    sigma_s = ops["floor_at"](sigma, SIGMA_MIN)
    per_slip = peak * tire_curve(b, c, e, sigma_s, ops) / sigma_s
    fx_m = per_slip * kappa
    fy_m = per_slip * alpha
    lin_x = c * b * kappa
    lin_y = c * b * alpha
    mag2 = lin_x * lin_x + lin_y * lin_y
    creep_scale = peak / sqrt(1.0 + mag2)
    fx = lam * fx_m + (1.0 - lam) * creep_scale * lin_x
    fy = lam * fy_m + (1.0 - lam) * creep_scale * lin_y
    return fx, fy


def derivatives_cols(yaw, vx, vy, r, delta, omega, delta_ref, omega_ref,
                     p, ops, model_actuators=True):
    """Time derivatives of all eight states (columns in, columns out).

    ``p`` maps PARAM_FIELDS names to scalars or per-row arrays.  When
    ``model_actuators`` is false the caller must have snapped delta/omega to
    their references; their derivatives are zero here.
    """
    sin, cos, atan = ops["sin"], ops["cos"], ops["atan"]
    sqrt, absf, floor_at, cap_at = ops["sqrt"], ops["abs"], ops["floor_at"], ops["cap_at"]

    if model_actuators:
        d_delta = (delta_ref - delta) / p["T_delta"]
        d_omega = (omega_ref - omega) / p["T_omega"]
    else:
        d_delta = 0.0 * delta
        d_omega = 0.0 * omega

    lf, lr = p["lf"], p["lr"]
    vx_s = floor_at(vx, VX_SAFE)
    alpha_f = delta - atan((vy + lf * r) / vx_s)
    alpha_r = -atan((vy - lr * r) / vx_s)

    sin_d, cos_d = sin(delta), cos(delta)
    v_cf = (vy + lf * r) * sin_d + vx * cos_d
    v_cr = vx
    wheel_v = omega * p["R_w"]
    kappa_f = (wheel_v - v_cf) / floor_at(absf(v_cf), V_CONTACT_MIN)
    kappa_r = (wheel_v - v_cr) / floor_at(absf(v_cr), V_CONTACT_MIN)

    wheelbase = lf + lr
    fz_f = p["m"] * GRAVITY * lr / wheelbase
    fz_r = p["m"] * GRAVITY * lf / wheelbase

    lam = cap_at(sqrt(vx * vx + vy * vy) / CREEP_BLEND_SPEED, 1.0)
    fx_f, fy_f = axle_forces(kappa_f, alpha_f, p["mu"] * fz_f * p["tire_Df"],
                             p["tire_Bf"], p["tire_Cf"], p["tire_Ef"], lam, ops)
    fx_r, fy_r = axle_forces(kappa_r, alpha_r, p["mu"] * fz_r * p["tire_Dr"],
                             p["tire_Br"], p["tire_Cr"], p["tire_Er"], lam, ops)

    resist = p["c_drag"] * vx * absf(vx) + \
        p["c_roll"] * vx / sqrt(vx * vx + ROLL_SMOOTH * ROLL_SMOOTH)

    fx_body = fx_f * cos_d - fy_f * sin_d + fx_r - resist
    fy_body = fx_f * sin_d + fy_f * cos_d + fy_r
    moment = lf * (fy_f * cos_d + fx_f * sin_d) - lr * fy_r

    cos_y, sin_y = cos(yaw), sin(yaw)
    d_x = vx * cos_y - vy * sin_y
    d_y = vx * sin_y + vy * cos_y
    d_yaw = r + 0.0 * vx
    d_vx = fx_body / p["m"] + r * vy
    d_vy = fy_body / p["m"] - r * vx
    d_r = moment / p["Iz"]
    return d_x, d_y, d_yaw, d_vx, d_vy, d_r, d_delta, d_omega
