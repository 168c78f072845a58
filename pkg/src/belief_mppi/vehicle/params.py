"""Vehicle, suspension, and delay-model parameter sets.

All shipped numeric values are plausible hand-set defaults for a UTV-class
vehicle; they are not fitted to any real platform (see the ``unfitted`` flag
in the serialized document).  Parameter files are flat JSON documents of named
scalars/vectors with a ``format_version`` field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

PARAMS_FORMAT_VERSION = 1


class ParamsFormatError(ValueError):
    """Parameter document missing/incompatible with the expected schema."""


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass
class VehicleParams:
    """Constants of the planar force model and actuator delay curves."""

    mass: float = 750.0
    c_l: float = 1.4          # front axle distance from CG, m
    c_r: float = 1.4          # rear axle distance from CG, m
    c_xd: float = 0.002       # longitudinal quadratic drag
    c_yd: float = 0.01        # lateral quadratic drag
    c_xg: float = 9.81        # gravity coefficient on body-x normal component
    c_yg: float = 9.81        # gravity coefficient on body-y normal component
    c_delta: float = 15.0     # steering-wheel units per wheel radian
    c_b: float = 4.0          # tire stiffness
    c_c: float = 1.5          # tire shape
    c_d: float = -3500.0      # tire peak force, N (negative: force opposes slip)
    c_max: float = 0.5        # slip-angle denominator clamp, m/s
    c_yaw: float = 1.5        # yaw gain
    c_yaw_damp: float = 3.0   # yaw damping
    engine_poly: np.ndarray = field(default_factory=lambda: _vec([-200.0, 900.0, -60.0]))
    throttle_poly: np.ndarray = field(default_factory=lambda: _vec([0.0, 0.85, 0.15]))
    brake_poly: np.ndarray = field(default_factory=lambda: _vec([0.0, 1500.0, 4500.0]))
    c_b_plus: np.ndarray = field(default_factory=lambda: _vec([6.0, 0.0, -2.5]))
    c_b_minus: np.ndarray = field(default_factory=lambda: _vec([4.0, 0.0, -3.0]))
    c_delta_vec: np.ndarray = field(default_factory=lambda: _vec([0.8, 0.0, -60.0]))
    rolling_sign: float = 120.0      # N, signum part of rolling resistance
    rolling_lin: float = 8.0         # N s/m, linear part
    rolling_deadzone: float = 0.05   # m/s
    brake_lowspeed_threshold: float = 0.1  # m/s, low-speed damping branch
    dt: float = 0.02

    def __post_init__(self):
        for name in ("engine_poly", "throttle_poly", "brake_poly", "c_b_plus",
                     "c_b_minus", "c_delta_vec"):
            setattr(self, name, _vec(getattr(self, name)))
        if self.mass <= 0 or self.c_l <= 0 or self.c_r <= 0:
            raise ParamsFormatError("mass and axle distances must be positive")
        if self.c_max <= 0:
            raise ParamsFormatError("c_max must be positive")
        if self.c_delta == 0:
            raise ParamsFormatError("c_delta must be nonzero")

    @property
    def wheelbase(self) -> float:
        return self.c_l + self.c_r


@dataclass
class SuspensionParams:
    """Spring-mass-damper constants and wheel geometry (body frame)."""

    spring: float = 40000.0       # N/m
    damper: float = 6000.0        # N s/m
    wheel_mass: float = 6000.0    # rate divisor for vertical motion
    inertia_roll: float = 2500.0  # rate divisor for roll
    inertia_pitch: float = 8000.0 # rate divisor for pitch
    # wheel order: front-left, front-right, rear-left, rear-right
    wheel_offsets: np.ndarray = field(
        default_factory=lambda: _vec(
            [[1.4, 0.8, -0.45], [1.4, -0.8, -0.45], [-1.4, 0.8, -0.45], [-1.4, -0.8, -0.45]]
        )
    )
    cg_height: float = 0.8   # m, for rollover estimation
    width: float = 1.6       # m
    length: float = 2.8      # m

    def __post_init__(self):
        self.wheel_offsets = _vec(self.wheel_offsets)
        if self.wheel_offsets.shape != (4, 3):
            raise ParamsFormatError("wheel_offsets must be 4x3")
        for name in ("spring", "damper", "wheel_mass", "inertia_roll",
                     "inertia_pitch", "cg_height", "width", "length"):
            if getattr(self, name) <= 0:
                raise ParamsFormatError(f"{name} must be positive")

    @property
    def rest_height(self) -> float:
        """CG height above flat ground with unloaded springs."""
        return -float(self.wheel_offsets[0, 2])


def _default_engine_net():
    # e_rate = 900*tanh(1.8*u_t - 0.45) + 400*tanh(0.05*vx), rpm/s
    w1 = np.zeros((2, 4))
    b1 = np.zeros(4)
    w1[1, 0], b1[0] = 1.8, -0.45
    w1[0, 1] = 0.05
    w2 = np.zeros((4, 1))
    w2[0, 0], w2[1, 0] = 900.0, 400.0
    return w1, b1, w2, np.zeros(1)


def _default_steer_net():
    # damping term ~ -12*delta_rate for small rates
    w1 = np.zeros((4, 4))
    b1 = np.zeros(4)
    w1[2, 0] = 0.2
    w2 = np.zeros((4, 1))
    w2[0, 0] = -60.0
    return w1, b1, w2, np.zeros(1)


@dataclass
class DelayNetParams:
    """Small feedforward nets for engine rpm rate and steering compensation."""

    engine_w1: np.ndarray = None
    engine_b1: np.ndarray = None
    engine_w2: np.ndarray = None
    engine_b2: np.ndarray = None
    steer_w1: np.ndarray = None
    steer_b1: np.ndarray = None
    steer_w2: np.ndarray = None
    steer_b2: np.ndarray = None

    def __post_init__(self):
        if self.engine_w1 is None:
            (self.engine_w1, self.engine_b1,
             self.engine_w2, self.engine_b2) = _default_engine_net()
        if self.steer_w1 is None:
            (self.steer_w1, self.steer_b1,
             self.steer_w2, self.steer_b2) = _default_steer_net()
        for name in ("engine_w1", "engine_b1", "engine_w2", "engine_b2",
                     "steer_w1", "steer_b1", "steer_w2", "steer_b2"):
            arr = _vec(getattr(self, name))
            if not np.all(np.isfinite(arr)):
                raise ParamsFormatError(f"non-finite weights in {name}")
            setattr(self, name, arr)


def _to_jsonable(obj) -> dict:
    out = {}
    for key, val in asdict(obj).items():
        out[key] = val.tolist() if isinstance(val, np.ndarray) else val
    return out


def save_params(path, vehicle: VehicleParams, suspension: SuspensionParams,
                delay: DelayNetParams) -> None:
    doc = {
        "format_version": PARAMS_FORMAT_VERSION,
        "unfitted": True,
        "vehicle": _to_jsonable(vehicle),
        "suspension": _to_jsonable(suspension),
        "delay": _to_jsonable(delay),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_params(path):
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != PARAMS_FORMAT_VERSION:
        raise ParamsFormatError(
            f"unsupported params format_version {version!r}, expected {PARAMS_FORMAT_VERSION}"
        )
    return (
        VehicleParams(**doc["vehicle"]),
        SuspensionParams(**doc["suspension"]),
        DelayNetParams(**doc["delay"]),
    )
