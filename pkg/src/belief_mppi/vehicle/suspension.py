"""Suspension spring-mass-damper tied to the elevation map.

Wheel bottoms are rigid-body transformed by the full 6-DOF pose, compared to
the map height below them, and the resulting spring/damper forces drive the
vertical, roll, and pitch rates.  The suspension is decoupled from the planar
force model; its outputs feed wheel-force costing and the pose used for map
queries.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .params import SuspensionParams, VehicleParams
from .types import (
    DELTA,
    PHI,
    PHI_RATE,
    PSI,
    PX,
    PY,
    PZ,
    PZ_RATE,
    THETA,
    THETA_RATE,
    VX,
    VehicleState,
)


def rotation_matrix(phi: float, theta: float, psi: float) -> np.ndarray:
    """World-from-body rotation R = Rz(psi) Ry(theta) Rx(phi)."""
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    return np.array(
        [
            [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
            [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
            [-st, ct * sf, ct * cf],
        ]
    )


def wheel_world_positions(pose6, susp: SuspensionParams) -> np.ndarray:
    """World positions (4, 3) of the wheel bottoms for a 6-DOF pose."""
    px, py, pz, phi, theta, psi = [float(v) for v in pose6]
    rot = rotation_matrix(phi, theta, psi)
    return np.array([px, py, pz]) + susp.wheel_offsets @ rot.T


def wheel_positions_columns(px, py, pz, phi, theta, psi, susp: SuspensionParams):
    """Batched wheel world positions as per-wheel (x, y, z) column triples."""
    cf, sf = ad.cos(phi), ad.sin(phi)
    ct, st = ad.cos(theta), ad.sin(theta)
    cp, sp = ad.cos(psi), ad.sin(psi)
    r00, r01, r02 = cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf
    r10, r11, r12 = sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf
    r20, r21, r22 = -st, ct * sf, ct * cf
    wheels = []
    for ox, oy, oz in susp.wheel_offsets:
        wx = px + r00 * ox + r01 * oy + r02 * oz
        wy = py + r10 * ox + r11 * oy + r12 * oz
        wz = pz + r20 * ox + r21 * oy + r22 * oz
        wheels.append((wx, wy, wz))
    return wheels


def _wheel_z_partials(phi, theta, ox, oy, oz):
    """d z_wheel / d phi and d z_wheel / d theta for the damper velocity."""
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    dz_dphi = ct * cf * oy - ct * sf * oz
    dz_dtheta = -ct * ox - sf * st * oy - cf * st * oz
    return dz_dphi, dz_dtheta


def step_suspension_arrays(state_cols, eta_cols, height_at, susp: SuspensionParams,
                           params: VehicleParams, dt):
    """Batched suspension update.

    ``height_at(x, y)`` must return (height, out_of_bounds_mask) with
    edge-clamped heights.  Returns the six updated suspension columns, the
    per-wheel upward forces (stacked on the last axis), and the number of
    out-of-bounds wheel queries.
    """
    phi, theta = state_cols[PHI], state_cols[THETA]
    pz_rate = state_cols[PZ_RATE]
    phi_rate, theta_rate = state_cols[PHI_RATE], state_cols[THETA_RATE]
    steer_wheel = state_cols[DELTA] / params.c_delta
    # terrain height rate seen by a wheel moving with the body (Eq. for h_dot)
    h_dot = (
        -state_cols[VX] * np.cos(steer_wheel) * eta_cols[0]
        - state_cols[VX] * np.sin(steer_wheel) * eta_cols[1]
    )
    wheels = wheel_positions_columns(
        state_cols[PX], state_cols[PY], state_cols[PZ], phi, theta,
        state_cols[PSI], susp,
    )
    forces = []
    oob_total = 0
    for (wx, wy, wz), (ox, oy, oz) in zip(wheels, susp.wheel_offsets):
        ground, oob = height_at(wx, wy)
        oob_total += int(np.sum(oob))
        dz_dphi, dz_dtheta = _wheel_z_partials(phi, theta, ox, oy, oz)
        wz_rate = pz_rate + phi_rate * dz_dphi + theta_rate * dz_dtheta
        f_w = -susp.spring * (wz - ground) - susp.damper * (wz_rate - h_dot)
        forces.append(f_w)
    mean_f = sum(forces) / len(forces)
    mean_roll = sum(f * oy for f, (ox, oy, oz) in zip(forces, susp.wheel_offsets))
    mean_pitch = sum(-f * ox for f, (ox, oy, oz) in zip(forces, susp.wheel_offsets))
    new_pz_rate = mean_f / susp.wheel_mass
    new_phi_rate = mean_roll / len(forces) / susp.inertia_roll
    new_theta_rate = mean_pitch / len(forces) / susp.inertia_pitch
    new_pz = state_cols[PZ] + dt * new_pz_rate
    new_phi = phi + dt * new_phi_rate
    new_theta = theta + dt * new_theta_rate
    force_stack = np.stack(forces, axis=-1)
    return (new_pz, new_phi, new_theta, new_pz_rate, new_phi_rate,
            new_theta_rate), force_stack, oob_total


def body_normal_from_map(state_cols, elevation_map, susp: SuspensionParams):
    """Wheel-averaged map normal rotated into the body frame."""
    wheels = wheel_positions_columns(
        state_cols[PX], state_cols[PY], state_cols[PZ], state_cols[PHI],
        state_cols[THETA], state_cols[PSI], susp,
    )
    n_sum = None
    for wx, wy, _ in wheels:
        n = elevation_map.normal_at(wx, wy)
        n_sum = n if n_sum is None else [a + b for a, b in zip(n_sum, n)]
    n_avg = [c / len(wheels) for c in n_sum]
    # rotate world normal into body frame with R^T
    cf, sf = np.cos(state_cols[PHI]), np.sin(state_cols[PHI])
    ct, st = np.cos(state_cols[THETA]), np.sin(state_cols[THETA])
    cp, sp = np.cos(state_cols[PSI]), np.sin(state_cols[PSI])
    nx, ny, nz = n_avg
    bx = cp * ct * nx + sp * ct * ny - st * nz
    by = (cp * st * sf - sp * cf) * nx + (sp * st * sf + cp * cf) * ny + ct * sf * nz
    bz = (cp * st * cf + sp * sf) * nx + (sp * st * cf - cp * sf) * ny + ct * cf * nz
    norm = np.sqrt(bx * bx + by * by + bz * bz)
    return bx / norm, by / norm, bz / norm


def step_suspension(state: VehicleState, elevation_map, susp: SuspensionParams,
                    params: VehicleParams, dt: float):
    """Single-state suspension step.

    Returns (updated state, per-wheel upward forces (4,), out-of-bounds count).
    """
    cols = state.as_array()
    eta = body_normal_from_map(cols, elevation_map, susp)
    updated, forces, oob = step_suspension_arrays(
        cols, eta, elevation_map.height_at, susp, params, dt
    )
    out = cols.copy()
    out[PZ], out[PHI], out[THETA], out[PZ_RATE], out[PHI_RATE], out[THETA_RATE] = [
        float(v) for v in updated
    ]
    return VehicleState.from_array(out), np.asarray(forces, dtype=np.float64), oob
