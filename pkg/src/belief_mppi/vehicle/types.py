"""Core vehicle state/control/reading containers and the state array layout.

Batched code paths work on plain float64 arrays; the dataclasses below are the
single-instance view used at API boundaries and in tests.  The flat state
vector has 16 entries in three groups: planar motion, actuator delay states,
and suspension states.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

# state vector layout; the first four entries are the reduced state covered by
# the belief covariance, in decomposition order (px, py, psi, vx)
PX, PY, PSI, VX, VY, YAW_RATE = 0, 1, 2, 3, 4, 5
BRAKE, RPM, DELTA, DELTA_RATE = 6, 7, 8, 9
PZ, PHI, THETA, PZ_RATE, PHI_RATE, THETA_RATE = 10, 11, 12, 13, 14, 15

STATE_DIM = 16
REDUCED_DIM = 4
CONTROL_DIM = 3

REDUCED_SLICE = slice(0, 4)


class InvalidStateError(ValueError):
    """A state, control, or reading violated a construction invariant."""


@dataclass
class VehicleState:
    """Full 16-value vehicle state (positions in world frame, velocities in body)."""

    px: float = 0.0
    py: float = 0.0
    psi: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    brake: float = 0.0
    rpm: float = 800.0
    delta: float = 0.0
    delta_rate: float = 0.0
    pz: float = 0.0
    phi: float = 0.0
    theta: float = 0.0
    pz_rate: float = 0.0
    phi_rate: float = 0.0
    theta_rate: float = 0.0

    def __post_init__(self):
        arr = self.as_array()
        if not np.all(np.isfinite(arr)):
            raise InvalidStateError("non-finite vehicle state")
        if not 0.0 <= self.brake <= 1.0:
            raise InvalidStateError(f"brake pressure {self.brake} outside [0, 1]")
        if self.rpm < 0.0:
            raise InvalidStateError(f"negative rpm {self.rpm}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (STATE_DIM,):
            raise InvalidStateError(f"expected shape ({STATE_DIM},), got {arr.shape}")
        return cls(*[float(v) for v in arr])

    def reduced(self) -> np.ndarray:
        return np.array([self.px, self.py, self.psi, self.vx], dtype=np.float64)


@dataclass
class ControlInput:
    """Throttle/brake in [0, 1], steering command in steering-wheel units."""

    throttle: float
    brake: float
    steer: float

    def __post_init__(self):
        if not (0.0 <= self.throttle <= 1.0 and 0.0 <= self.brake <= 1.0):
            raise InvalidStateError("throttle/brake outside [0, 1]")
        if not np.isfinite(self.steer):
            raise InvalidStateError("non-finite steer command")

    def as_array(self) -> np.ndarray:
        return np.array([self.throttle, self.brake, self.steer], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "ControlInput":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass
class SensorReadings:
    """Terrain normal in body frame, averaged over the four wheels."""

    normal: np.ndarray

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if self.normal.shape != (3,):
            raise InvalidStateError("normal must be a 3-vector")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise InvalidStateError("normal must be unit length")
        if self.normal[2] <= 0.0:
            raise InvalidStateError("normal must point upward (eta_z > 0)")

    @classmethod
    def flat(cls) -> "SensorReadings":
        return cls(np.array([0.0, 0.0, 1.0]))


@dataclass
class ForceVector:
    """Planar force outputs: drive/brake, front/rear lateral, yaw acceleration."""

    fx: float
    fyf: float
    fyb: float
    fr: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise InvalidStateError("non-finite force vector")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fyf, self.fyb, self.fr], dtype=np.float64)
