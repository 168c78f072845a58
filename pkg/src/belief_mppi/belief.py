"""Gaussian belief propagation over the reduced state (px, py, psi, vx).

The mean advances through the hybrid parametric+learned dynamics; the 4x4
covariance advances through the analytic Jacobian of the parametric step and
a structured process-noise matrix assembled from per-channel noise variances
(brake, steering, lateral velocity, longitudinal force) plus an optional
unstructured symmetric term.  Feedback gains can be folded into the Jacobian
to approximate closed-loop tracking.

All heavy entry points are batched over leading axes; the dataclass API wraps
single instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .learning import nets as netmod
from .vehicle import model
from .vehicle.params import DelayNetParams, VehicleParams
from .vehicle.types import (
    BRAKE,
    DELTA,
    DELTA_RATE,
    PSI,
    PX,
    PY,
    RPM,
    VX,
    VY,
    YAW_RATE,
    ControlInput,
    SensorReadings,
    VehicleState,
)

FIXED_INIT_VARIANCE = 1e-5
SYMMETRY_TOL = 1e-9
PSD_TOL = -1e-9


class PropagationError(ArithmeticError):
    """Covariance propagation produced non-finite values."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(f"belief propagation failed at step {step}: {message}")


@dataclass
class Belief:
    """Full-state mean with a reduced-state covariance."""

    mean: VehicleState
    cov: np.ndarray

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (4, 4):
            raise ValueError("covariance must be 4x4")
        if np.max(np.abs(self.cov - self.cov.T)) > SYMMETRY_TOL:
            raise ValueError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(self.cov)) < PSD_TOL:
            raise ValueError("covariance must be PSD within tolerance")

    def reduced_mean(self) -> np.ndarray:
        return self.mean.reduced()


@dataclass
class GainSet:
    """Feedback gains mapping reduced-state error to (accel-x, steer) pseudo-controls."""

    k: np.ndarray = field(default_factory=lambda: np.zeros((2, 4)))

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64)
        if self.k.shape != (2, 4):
            raise ValueError("gain matrix must be 2x4")
        if not np.all(np.isfinite(self.k)):
            raise ValueError("gains must be finite")

    @classmethod
    def open_loop(cls) -> "GainSet":
        return cls(np.zeros((2, 4)))

    @classmethod
    def default(cls, k_vx: float = 2.0, k_psi: float = 5.0) -> "GainSet":
        """Hand-tuned stabilizing gains: vx error -> accel, psi error -> steer."""
        k = np.zeros((2, 4))
        k[0, 3] = k_vx
        k[1, 2] = k_psi
        return cls(k)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.k)


@dataclass
class NoiseChannels:
    """Noise-channel structure: labels plus the sigmoid/tanh scale parameters."""

    labels: tuple = model.NOISE_CHANNELS
    c_sigma: np.ndarray = field(default_factory=lambda: np.ones(4))
    c_kappa: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))

    def __post_init__(self):
        self.c_sigma = np.asarray(self.c_sigma, dtype=np.float64)
        self.c_kappa = np.asarray(self.c_kappa, dtype=np.float64)
        if len(self.labels) != 4 or self.c_sigma.shape != (4,):
            raise ValueError("baseline noise structure uses n_q = 4 channels")
        if np.any(self.c_sigma < 0):
            raise ValueError("sigmoid scales must be nonnegative")

    @classmethod
    def from_net(cls, net: netmod.NetworkParams) -> "NoiseChannels":
        return cls(
            c_sigma=np.asarray(ad.value_of(net.c_sigma())),
            c_kappa=np.asarray(ad.value_of(net.kappa_scale_matrix())),
        )


# -- analytic linearization ------------------------------------------------------


def _linearization_parts(state_cols, u_cols, eta_cols, params: VehicleParams):
    """Shared partial derivatives of the reduced-state derivative."""
    vx, vy, yr = state_cols[VX], state_cols[VY], state_cols[YAW_RATE]
    psi, b, delta = state_cols[PSI], state_cols[BRAKE], state_cols[DELTA]
    eta_z = eta_cols[2]
    m = params.mass
    dw = delta / params.c_delta
    cd, sd = ad.cos(dw), ad.sin(dw)
    den = ad.maximum(params.c_max, vx)
    clamped = np.asarray(ad.value_of(vx)) <= params.c_max
    num_f = vy + params.c_l * yr
    alpha_f = ad.arctan(num_f / den) - dw
    denom_f = den * den + num_f * num_f
    zero = 0.0 * den
    daf_dvx = ad.where(clamped, zero, -num_f / denom_f)
    daf_dvy = den / denom_f
    th = ad.tanh(params.c_b * alpha_f)
    fyf = params.c_d * ad.sin(params.c_c * th) * eta_z
    slope_f = (params.c_d * ad.cos(params.c_c * th) * params.c_c
               * (1.0 - th * th) * params.c_b * eta_z)
    # longitudinal force value and partials
    fx = (model.engine_drive_force(state_cols[RPM], u_cols[0], params)
          - model.brake_force(b, vx, params)
          - model.rolling_resistance(vx, params)) * eta_z
    pb = model.brake_pressure_force(b, params)
    dpb_db = params.brake_poly[1] + 2.0 * params.brake_poly[2] * b
    active = model.brake_lowspeed_active(b, vx, params)
    damp = ad.where(active, vx, ad.sign(vx))
    dptilde_dvx = ad.where(active, pb, zero)
    dead = np.abs(np.asarray(ad.value_of(vx))) < params.rolling_deadzone
    dbeta_dvx = ad.where(dead, zero, zero + params.rolling_lin)
    dfx_dvx = (-dptilde_dvx - dbeta_dvx) * eta_z
    dfx_db = -(dpb_db * damp) * eta_z
    cpsi, spsi = ad.cos(psi), ad.sin(psi)
    return {
        "zero": zero,
        "dpx_dpsi": -spsi * vx - cpsi * vy,
        "dpy_dpsi": cpsi * vx - spsi * vy,
        "dpx_dvx": cpsi,
        "dpy_dvx": spsi,
        "dpx_dvy": -spsi,
        "dpy_dvy": cpsi,
        "dvxdot_dvx": ((1.0 + cd) * dfx_dvx - sd * slope_f * daf_dvx) / m
                      - 2.0 * params.c_xd * vx,
        "dvxdot_db": (1.0 + cd) / m * dfx_db,
        "dvxdot_ddelta": ((-sd * fx + sd * slope_f - cd * fyf) / m) / params.c_delta,
        "dvxdot_dvy": (-sd * slope_f * daf_dvy) / m + yr,
        "dvxdot_dfx": (1.0 + cd) * eta_z / m,
    }


def jacobian_a_cols(state_cols, u_cols, eta_cols, params: VehicleParams, dt,
                    parts=None):
    """Discrete-step Jacobian A = I + dt * d(reduced rate)/d(reduced state)."""
    p = parts if parts is not None else _linearization_parts(
        state_cols, u_cols, eta_cols, params)
    z, one = p["zero"], p["zero"] + 1.0
    rows = [
        ad.stack([one, z, dt * p["dpx_dpsi"], dt * p["dpx_dvx"]], axis=-1),
        ad.stack([z, one, dt * p["dpy_dpsi"], dt * p["dpy_dvx"]], axis=-1),
        ad.stack([z, z, one, z], axis=-1),
        ad.stack([z, z, z, one + dt * p["dvxdot_dvx"]], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def jacobian_g_cols(state_cols, u_cols, eta_cols, params: VehicleParams, dt,
                    parts=None):
    """Sensitivity of the reduced step to the (brake, delta, vy, fx) channels."""
    p = parts if parts is not None else _linearization_parts(
        state_cols, u_cols, eta_cols, params)
    z = p["zero"]
    rows = [
        ad.stack([z, z, dt * p["dpx_dvy"], z], axis=-1),
        ad.stack([z, z, dt * p["dpy_dvy"], z], axis=-1),
        ad.stack([z, z, z, z], axis=-1),
        ad.stack([dt * p["dvxdot_db"], dt * p["dvxdot_ddelta"],
                  dt * p["dvxdot_dvy"], dt * p["dvxdot_dfx"]], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def pseudo_control_jacobian_cols(vx, params: VehicleParams, dt):
    """Step sensitivity to the (accel-x, steer) pseudo-controls.

    A deliberately simple kinematic form: accel drives vx directly and steer
    drives heading through the kinematic yaw response vx / (wheelbase * c_delta).
    """
    z = 0.0 * vx
    rows = [
        ad.stack([z, z], axis=-1),
        ad.stack([z, z], axis=-1),
        ad.stack([z, dt * vx / (params.wheelbase * params.c_delta)], axis=-1),
        ad.stack([z + dt, z], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def jacobian_A(belief: Belief, u: ControlInput, readings: SensorReadings,
               params: VehicleParams, dt: float | None = None) -> np.ndarray:
    dt = params.dt if dt is None else dt
    return np.asarray(jacobian_a_cols(belief.mean.as_array(), u.as_array(),
                                      readings.normal, params, dt))


def jacobian_G(belief: Belief, u: ControlInput, readings: SensorReadings,
               params: VehicleParams, dt: float | None = None) -> np.ndarray:
    dt = params.dt if dt is None else dt
    return np.asarray(jacobian_g_cols(belief.mean.as_array(), u.as_array(),
                                      readings.normal, params, dt))


# -- process-noise assembly --------------------------------------------------------


def _expand_diag(d, target_ndim):
    """Reshape a (..., n) diagonal to broadcast against (..., n, n) rows."""
    shape = np.shape(ad.value_of(d))
    if isinstance(d, ad.Tensor):
        return d.reshape(*shape[:-1], 1, shape[-1])
    return np.reshape(d, (*shape[:-1], 1, shape[-1]))


def assemble_q(q_raw, qprime_raw, g, c_sigma, c_kappa):
    """Process noise Q = G diag(sigmoid(q) * c_sigma) G^T + kappa(Q') * c_kappa.

    Either raw input may be None to drop its term; the structured G term is
    PSD by construction, the unstructured term is symmetric only.
    """
    q = None
    if q_raw is not None:
        d = ad.sigmoid(q_raw) * c_sigma
        gd = g * _expand_diag(d, None)
        q = ad.matmul(gd, ad.transpose_last2(g))
    if qprime_raw is not None:
        unstruct = netmod.kappa_matrix(qprime_raw) * c_kappa
        q = unstruct if q is None else q + unstruct
    if q is None:
        raise ValueError("at least one of q_raw/qprime_raw is required")
    return q


def assemble_Q(q_raw, qprime_raw, g, channels: NoiseChannels):
    """Spec-level wrapper over :func:`assemble_q` using a NoiseChannels scale set."""
    return np.asarray(assemble_q(q_raw, qprime_raw, g, channels.c_sigma,
                                 channels.c_kappa))


def propagate_covariance(cov, a, q, dt):
    """One covariance step P <- A P A^T + Q dt, re-symmetrized."""
    p_new = ad.matmul(ad.matmul(a, cov), ad.transpose_last2(a)) + q * dt
    return 0.5 * (p_new + ad.transpose_last2(p_new))


# -- full propagation ----------------------------------------------------------------


def propagate_cols(state_cols, cov, u_cols, eta_cols, net: netmod.NetworkParams,
                   tensors, hidden, gains: GainSet, params: VehicleParams,
                   delay: DelayNetParams, dt):
    """Batched hybrid belief step.

    ``state_cols`` is a 16-sequence of columns; suspension entries pass through
    unchanged (the rollout layer owns them).  Returns (new_cols, new_cov,
    new_hidden, info) where info carries values costing reuses.
    """
    forces_prior, steer_wheel, _ = _force_prior(state_cols, u_cols, eta_cols, net, params)
    feats = netmod.build_features(state_cols, u_cols, eta_cols, forces_prior, net)
    mean_corr, q_raw, qprime_raw, hidden = netmod.predictor_step(net, tensors, feats, hidden)
    force_corr, rate_corr = None, None
    if net.direct_compensation:
        rate_corr = (mean_corr[..., 0], mean_corr[..., 1], mean_corr[..., 2])
    else:
        force_corr = (mean_corr[..., 0], mean_corr[..., 1],
                      mean_corr[..., 2], mean_corr[..., 3])
    px_dot, py_dot, vx_dot, vy_dot, yaw_accel, forces_eff = model.planar_rates(
        state_cols, u_cols, eta_cols, params,
        force_correction=force_corr, rate_correction=rate_corr,
        precomputed=(forces_prior, steer_wheel, state_cols[VY]),
    )
    new_brake, new_rpm, new_delta, new_delta_rate = model.step_delay_arrays(
        state_cols[BRAKE], state_cols[RPM], state_cols[DELTA],
        state_cols[DELTA_RATE], state_cols[VX], u_cols[0], u_cols[1], u_cols[2],
        params, delay, dt,
    )
    new_cols = list(state_cols)
    new_cols[PX] = state_cols[PX] + dt * px_dot
    new_cols[PY] = state_cols[PY] + dt * py_dot
    new_cols[PSI] = state_cols[PSI] + dt * state_cols[YAW_RATE]
    new_cols[VX] = state_cols[VX] + dt * vx_dot
    new_cols[VY] = state_cols[VY] + dt * vy_dot
    new_cols[YAW_RATE] = state_cols[YAW_RATE] + dt * yaw_accel
    new_cols[BRAKE] = new_brake
    new_cols[RPM] = new_rpm
    new_cols[DELTA] = new_delta
    new_cols[DELTA_RATE] = new_delta_rate

    parts = _linearization_parts(state_cols, u_cols, eta_cols, params)
    if net.no_a_matrix:
        eye = np.broadcast_to(np.eye(4), np.shape(ad.value_of(cov))).copy()
        a = eye
    else:
        a = jacobian_a_cols(state_cols, u_cols, eta_cols, params, dt, parts)
        if net.linearize_through_net:
            a = _add_net_vx_sensitivity(a, state_cols, u_cols, eta_cols, net,
                                        tensors, hidden, params, dt)
    if not gains.is_zero:
        b_mat = pseudo_control_jacobian_cols(state_cols[VX], params, dt)
        a = a - ad.matmul(b_mat, gains.k)
    g = jacobian_g_cols(state_cols, u_cols, eta_cols, params, dt, parts)
    q = assemble_q(q_raw, qprime_raw, g, net.c_sigma(tensors),
                   net.kappa_scale_matrix(tensors))
    new_cov = propagate_covariance(cov, a, q, dt)
    info = {
        "vx_dot": vx_dot,
        "forces": forces_eff,
        "steer_wheel": steer_wheel,
        "a": a,
        "g": g,
    }
    return new_cols, new_cov, hidden, info


def _force_prior(state_cols, u_cols, eta_cols, net, params):
    if net.no_parametric:
        z = 0.0 * state_cols[VX]
        return (z, z, z, z), state_cols[DELTA] / params.c_delta, state_cols[VY]
    forces, steer_wheel, vy_eff = model.planar_forces(
        state_cols[VX], state_cols[VY], state_cols[YAW_RATE], state_cols[BRAKE],
        state_cols[RPM], state_cols[DELTA], u_cols[0], eta_cols, params,
    )
    return forces, steer_wheel, vy_eff


def _add_net_vx_sensitivity(a, state_cols, u_cols, eta_cols, net, tensors,
                            hidden, params, dt, h=1e-4):
    """Optional: fold d(compensated vx rate)/d vx into A by central differences."""
    def corr_vxdot(vx_val):
        cols = list(state_cols)
        cols[VX] = vx_val
        forces, steer_wheel, _ = _force_prior(cols, u_cols, eta_cols, net, params)
        feats = netmod.build_features(cols, u_cols, eta_cols, forces, net)
        corr, _, _, _ = netmod.predictor_step(net, tensors, feats, dict(hidden))
        if net.direct_compensation:
            return ad.value_of(corr[..., 0])
        cd = np.cos(ad.value_of(steer_wheel))
        sd = np.sin(ad.value_of(steer_wheel))
        c = ad.value_of(corr)
        return ((1.0 + cd) * c[..., 0] - c[..., 1] * sd) / params.mass

    vx = ad.value_of(state_cols[VX])
    sens = (corr_vxdot(vx + h) - corr_vxdot(vx - h)) / (2.0 * h)
    bump = np.zeros((*np.shape(sens), 4, 4))
    bump[..., 3, 3] = dt * sens
    return a + bump


def propagate(belief: Belief, u: ControlInput, readings: SensorReadings,
              net: netmod.NetworkParams, gains: GainSet, params: VehicleParams,
              delay: DelayNetParams, dt: float | None = None,
              hidden=None, step_index: int = 0):
    """Single-belief hybrid step.

    Returns (new belief, new hidden state).  Raises PropagationError if the
    covariance goes non-finite.
    """
    dt = params.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    hidden = hidden if hidden is not None else netmod.zero_hidden(net)
    cols, cov, hidden, _ = propagate_cols(
        belief.mean.as_array(), belief.cov, u.as_array(), readings.normal,
        net, net.tensors, hidden, gains, params, delay, dt,
    )
    cov = np.asarray(cov, dtype=np.float64)
    if not np.all(np.isfinite(cov)):
        raise PropagationError(step_index, "non-finite covariance")
    mean = VehicleState.from_array(np.array([float(c) for c in cols]))
    return Belief(mean, cov), hidden


# -- initialization --------------------------------------------------------------


def init_belief(history_states, history_controls, history_normals, mode: str,
                net: netmod.NetworkParams, params: VehicleParams,
                tensors=None) -> Belief:
    """Initial belief from a history window.

    ``mode`` is one of fixed (paper's constant 1e-5 diagonal), meta (learned
    global diagonal), or predicted (initializer-network output through the
    sigmoid/kappa construction).
    """
    t = tensors if tensors is not None else net.tensors
    states = np.asarray(history_states, dtype=np.float64)
    if mode == "predicted" and states.size == 0:
        raise ValueError("predicted init mode requires a non-empty history")
    if states.ndim == 1:
        states = states[None, :]
    controls = np.atleast_2d(np.asarray(history_controls, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(history_normals, dtype=np.float64))
    mean = VehicleState.from_array(states[-1])
    if mode == "fixed":
        cov = np.eye(4) * FIXED_INIT_VARIANCE
    elif mode == "meta":
        diag = ad.value_of(ad.sigmoid(t["meta_cov_raw"]) * ad.exp(t["log_c_init"]))
        cov = np.diag(np.asarray(diag))
    elif mode == "predicted":
        cov = np.asarray(ad.value_of(predicted_cov_from_history(
            states, controls, normals, net, t, params)))
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return Belief(mean, cov)


def predicted_cov_from_history(states, controls, normals, net, tensors, params):
    """Initializer-network covariance (batched over a leading axis if present)."""
    feature_seq = []
    n_frames = states.shape[-2]
    for i in range(n_frames):
        s = states[..., i, :]
        u = controls[..., i, :]
        eta = normals[..., i, :]
        s_cols = [s[..., j] for j in range(16)]
        u_cols = [u[..., j] for j in range(3)]
        eta_cols = [eta[..., j] for j in range(3)]
        forces, _, _ = _force_prior(s_cols, u_cols, eta_cols, net, params)
        feature_seq.append(netmod.build_features(s_cols, u_cols, eta_cols, forces, net))
    _, cov_raw = netmod.initializer_forward(net, tensors, feature_seq)
    if cov_raw is None:
        raise ValueError("predicted init mode requires the recurrent_init arch")
    return initial_cov_from_raw(cov_raw, net, tensors)


def initial_cov_from_raw(cov_raw, net, tensors):
    """Initial covariance through the same sigmoid/kappa construction as Q."""
    c_init = ad.exp(tensors["log_c_init"])
    if net.init_full_cov:
        ci = ad.value_of(c_init)
        scale = np.sqrt(np.outer(ci, ci))
        return netmod.kappa_matrix(cov_raw) * scale
    diag = ad.sigmoid(cov_raw) * c_init
    eye = np.eye(4)
    return _expand_diag(diag, None) * eye
