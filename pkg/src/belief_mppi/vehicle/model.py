"""Planar parametric dynamics: actuator delays, tire/engine forces, transform.

Functions in this module accept python floats, batched ``(B,)`` float64
arrays, or autodiff tensors interchangeably; all math is routed through the
dispatching helpers in :mod:`belief_mppi.autodiff`.

The delay subsystem integrates (brake pressure, engine rpm, steering angle,
steering rate).  The force model produces longitudinal drive/brake force,
front/rear lateral tire forces and a yaw acceleration, which the body
transform converts into body-frame accelerations and world-frame position
rates.  Front lateral force uses the front slip angle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .params import DelayNetParams, VehicleParams
from .types import (
    BRAKE,
    DELTA,
    DELTA_RATE,
    PSI,
    RPM,
    VX,
    VY,
    YAW_RATE,
    ControlInput,
    ForceVector,
    SensorReadings,
    VehicleState,
)

NOISE_CHANNELS = ("brake", "delta", "vy", "fx")
N_CHANNELS = len(NOISE_CHANNELS)


class ParameterBlowupError(ArithmeticError):
    """A delay/dynamics step produced non-finite values."""


def gamma(alpha, c):
    """Smooth rate limiter tanh(c0*a + c1*a^2) * c2 (bounded by |c2|)."""
    return ad.tanh(c[0] * alpha + c[1] * alpha * alpha) * c[2]


def _ff2(x_cols, w1, b1, w2, b2):
    """Two-layer tanh feedforward net on stacked feature columns."""
    x = ad.stack(x_cols, axis=-1)
    h = ad.tanh(ad.matmul(x, w1) + b1)
    out = ad.matmul(h, w2) + b2
    return out[..., 0]


def zeta_engine(vx, throttle, delay: DelayNetParams):
    """Learned engine rpm rate as a function of speed and throttle."""
    return _ff2([vx, throttle], delay.engine_w1, delay.engine_b1,
                delay.engine_w2, delay.engine_b2)


def zeta_steer(vx, delta, delta_rate, steer_cmd, delay: DelayNetParams):
    """Learned steering-acceleration compensation (mostly damping)."""
    return _ff2([vx, delta, delta_rate, steer_cmd], delay.steer_w1, delay.steer_b1,
                delay.steer_w2, delay.steer_b2)


def delay_rates(brake, rpm, delta, delta_rate, vx, u_throttle, u_brake, u_steer,
                params: VehicleParams, delay: DelayNetParams):
    """Rates of the delay subsystem (brake rate, rpm rate, steering accel)."""
    rising = ad.value_of(brake) <= ad.value_of(u_brake)
    brake_rate = ad.where(
        rising,
        gamma(brake - u_brake, params.c_b_plus),
        gamma(brake - u_brake, params.c_b_minus),
    )
    rpm_rate = zeta_engine(vx, u_throttle, delay)
    steer_accel = zeta_steer(vx, delta, delta_rate, u_steer, delay) + gamma(
        delta - u_steer, params.c_delta_vec
    )
    return brake_rate, rpm_rate, steer_accel


def step_delay_arrays(brake, rpm, delta, delta_rate, vx, u_throttle, u_brake,
                      u_steer, params: VehicleParams, delay: DelayNetParams, dt):
    """Forward-Euler update of (brake, rpm, delta, delta_rate)."""
    brake_rate, rpm_rate, steer_accel = delay_rates(
        brake, rpm, delta, delta_rate, vx, u_throttle, u_brake, u_steer, params, delay
    )
    new_brake = ad.clip(brake + dt * brake_rate, 0.0, 1.0)
    new_rpm = ad.maximum(rpm + dt * rpm_rate, 0.0)
    new_delta = delta + dt * delta_rate
    new_delta_rate = delta_rate + dt * steer_accel
    return new_brake, new_rpm, new_delta, new_delta_rate


def step_delay(state: VehicleState, u: ControlInput, params: VehicleParams,
               delay: DelayNetParams, dt: float) -> VehicleState:
    """Single-state delay update; raises on parameter blow-up."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    b, e, d, dr = step_delay_arrays(
        state.brake, state.rpm, state.delta, state.delta_rate, state.vx,
        u.throttle, u.brake, u.steer, params, delay, dt,
    )
    vals = np.array([b, e, d, dr], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ParameterBlowupError(f"delay step produced non-finite values {vals}")
    out = state.as_array()
    out[BRAKE], out[RPM], out[DELTA], out[DELTA_RATE] = vals
    return VehicleState.from_array(out)


def tire_slip_angles(vx, vy, yaw_rate, steer_wheel, params: VehicleParams):
    """Front/rear slip angles with the low-speed denominator clamp."""
    den = ad.maximum(params.c_max, vx)
    alpha_f = ad.arctan((vy + params.c_l * yaw_rate) / den) - steer_wheel
    alpha_r = ad.arctan((vy - params.c_r * yaw_rate) / den)
    return alpha_f, alpha_r


def _poly2(c, x):
    return c[0] + c[1] * x + c[2] * x * x


def engine_drive_force(rpm, throttle, params: VehicleParams):
    """P(e) * P(u_t); the rpm polynomial runs on kilo-rpm."""
    return _poly2(params.engine_poly, rpm * 1e-3) * _poly2(params.throttle_poly, throttle)


def brake_pressure_force(brake, params: VehicleParams):
    """Brake force magnitude as a quadratic polynomial of pressure."""
    return _poly2(params.brake_poly, brake)


def brake_lowspeed_active(brake, vx, params: VehicleParams):
    """Low-speed damping branch: one full step of braking would flip sign(vx)."""
    pb = ad.value_of(brake_pressure_force(brake, params))
    vxv = ad.value_of(vx)
    would_flip = np.sign(vxv - params.dt * pb * np.sign(vxv) / params.mass) != np.sign(vxv)
    return (np.abs(vxv) < params.brake_lowspeed_threshold) & would_flip


def brake_force(brake, vx, params: VehicleParams):
    """Signed brake force; multiplied by vx in the low-speed damping branch."""
    pb = brake_pressure_force(brake, params)
    active = brake_lowspeed_active(brake, vx, params)
    return ad.where(active, pb * vx, pb * ad.sign(vx))


def rolling_resistance(vx, params: VehicleParams):
    """Signum-plus-linear rolling resistance with a dead zone near rest."""
    dead = np.abs(ad.value_of(vx)) < params.rolling_deadzone
    return ad.where(dead, 0.0 * vx, params.rolling_sign * ad.sign(vx) + params.rolling_lin * vx)


def lateral_tire_force(alpha, eta_z, params: VehicleParams):
    """Simplified Pacejka curve c_D sin(c_C tanh(c_B alpha)), terrain scaled."""
    return params.c_d * ad.sin(params.c_c * ad.tanh(params.c_b * alpha)) * eta_z


@dataclass
class ChannelPerturbation:
    """Additive offsets on the noise channels (brake, delta, vy, pre-eta Fx)."""

    brake: object = 0.0
    delta: object = 0.0
    vy: object = 0.0
    fx: object = 0.0


def planar_forces(vx, vy, yaw_rate, brake, rpm, delta, u_throttle, eta,
                  params: VehicleParams, perturb: ChannelPerturbation | None = None):
    """Force vector (fx, fyf, fyb, fr) with optional channel perturbations.

    ``eta`` is indexed per component: a (3,) array or a 3-sequence of batched
    columns.  Returns the forces together with the effective (steer_wheel, vy)
    the caller must reuse in the body transform so channel sensitivities are
    consistent end to end.
    """
    if perturb is not None:
        brake = brake + perturb.brake
        delta = delta + perturb.delta
        vy = vy + perturb.vy
    steer_wheel = delta / params.c_delta
    alpha_f, alpha_r = tire_slip_angles(vx, vy, yaw_rate, steer_wheel, params)
    fx_pre = (
        engine_drive_force(rpm, u_throttle, params)
        - brake_force(brake, vx, params)
        - rolling_resistance(vx, params)
    )
    if perturb is not None:
        fx_pre = fx_pre + perturb.fx
    eta_z = eta[2]
    fx = fx_pre * eta_z
    fyf = lateral_tire_force(alpha_f, eta_z, params)
    fyb = lateral_tire_force(alpha_r, eta_z, params)
    fr = (vx / params.c_l) * steer_wheel * params.c_yaw - params.c_yaw_damp * yaw_rate
    return (fx, fyf, fyb, fr), steer_wheel, vy


def parametric_forces(state: VehicleState, readings: SensorReadings,
                      u: ControlInput, params: VehicleParams) -> ForceVector:
    """Spec-level force evaluation for a single state."""
    (fx, fyf, fyb, fr), _, _ = planar_forces(
        state.vx, state.vy, state.yaw_rate, state.brake, state.rpm, state.delta,
        u.throttle, readings.normal, params,
    )
    return ForceVector(float(fx), float(fyf), float(fyb), float(fr))


def body_rates(fx, fyf, fyb, fr, vx, vy, yaw_rate, psi, steer_wheel, eta_x,
               eta_y, params: VehicleParams):
    """Body-frame accelerations and world-frame position rates."""
    m = params.mass
    cd, sd = ad.cos(steer_wheel), ad.sin(steer_wheel)
    vx_dot = (
        ((1.0 + cd) * fx - fyf * sd) / m
        - params.c_xd * vx * vx
        - params.c_xg * eta_x
        + vy * yaw_rate
    )
    vy_dot = (
        (fyb + cd * fyf + fx * sd) / m
        - params.c_yd * vy * vy
        - params.c_yg * eta_y
        - vx * yaw_rate
    )
    yaw_accel = fr
    cpsi, spsi = ad.cos(psi), ad.sin(psi)
    px_dot = cpsi * vx - spsi * vy
    py_dot = spsi * vx + cpsi * vy
    return vx_dot, vy_dot, yaw_accel, px_dot, py_dot


def body_accelerations(forces: ForceVector, state: VehicleState,
                       readings: SensorReadings, steer_wheel: float,
                       params: VehicleParams):
    """Spec-level body transform for a single state."""
    return body_rates(
        forces.fx, forces.fyf, forces.fyb, forces.fr,
        state.vx, state.vy, state.yaw_rate, state.psi, steer_wheel,
        readings.normal[0], readings.normal[1], params,
    )


def planar_rates(state_cols, u_cols, eta_cols, params: VehicleParams,
                 perturb: ChannelPerturbation | None = None,
                 force_correction=None, rate_correction=None, precomputed=None):
    """Rates of the planar block (px, py, psi, vx, vy, yaw_rate).

    ``state_cols``/``u_cols``/``eta_cols`` are per-component columns indexed by
    the layout constants.  ``force_correction`` adds to the force vector before
    the transform (hybrid mean compensation); ``rate_correction`` adds to
    (vx_dot, vy_dot, yaw_accel) after it (direct compensation variant).
    ``precomputed`` short-circuits the force evaluation with an existing
    ((fx, fyf, fyb, fr), steer_wheel, vy_eff) triple.
    """
    if precomputed is not None:
        (fx, fyf, fyb, fr), steer_wheel, vy_eff = precomputed
    else:
        (fx, fyf, fyb, fr), steer_wheel, vy_eff = planar_forces(
            state_cols[VX], state_cols[VY], state_cols[YAW_RATE], state_cols[BRAKE],
            state_cols[RPM], state_cols[DELTA], u_cols[0], eta_cols, params, perturb,
        )
    if force_correction is not None:
        fx = fx + force_correction[0]
        fyf = fyf + force_correction[1]
        fyb = fyb + force_correction[2]
        fr = fr + force_correction[3]
    vx_dot, vy_dot, yaw_accel, px_dot, py_dot = body_rates(
        fx, fyf, fyb, fr, state_cols[VX], vy_eff, state_cols[YAW_RATE],
        state_cols[PSI], steer_wheel, eta_cols[0], eta_cols[1], params,
    )
    if rate_correction is not None:
        vx_dot = vx_dot + rate_correction[0]
        vy_dot = vy_dot + rate_correction[1]
        yaw_accel = yaw_accel + rate_correction[2]
    return px_dot, py_dot, vx_dot, vy_dot, yaw_accel, (fx, fyf, fyb, fr)


def reduced_step(state_cols, u_cols, eta_cols, params: VehicleParams, dt,
                 perturb: ChannelPerturbation | None = None):
    """One Euler step of the reduced state (px, py, psi, vx), parametric only.

    This is the map whose Jacobians propagate the belief covariance; it is
    also the entry point finite-difference oracles and the ground-truth noise
    injection use.
    """
    px_dot, py_dot, vx_dot, _, _, _ = planar_rates(state_cols, u_cols, eta_cols,
                                                   params, perturb)
    return (
        state_cols[0] + dt * px_dot,
        state_cols[1] + dt * py_dot,
        state_cols[PSI] + dt * state_cols[YAW_RATE],
        state_cols[VX] + dt * vx_dot,
    )
