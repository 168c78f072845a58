"""Synthetic off-road world: layered elevation maps and a ground-truth simulator.

Maps carry height, unit normals, a semantic class layer, and a max-speed
layer; queries are bilinear for continuous layers and nearest-cell for the
class layer, with out-of-bounds treated as unknown space (edge-clamped
heights).  The ground-truth simulator runs the parametric vehicle model with
hidden perturbed parameters plus state-dependent, temporally correlated noise
injected through the same channels the belief model's process noise uses.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .vehicle import model, suspension
from .vehicle.params import DelayNetParams, SuspensionParams, VehicleParams
from .vehicle.types import (
    BRAKE,
    DELTA,
    DELTA_RATE,
    PHI,
    PSI,
    PX,
    PY,
    PZ,
    RPM,
    THETA,
    VX,
    VY,
    YAW_RATE,
)

CLASS_FREE = 0
CLASS_RISKY = 1
CLASS_LETHAL = 2
CLASS_UNKNOWN = 3
CLASS_TRAIL = 4

CLASS_NAMES = {CLASS_FREE: "free", CLASS_RISKY: "risky", CLASS_LETHAL: "lethal",
               CLASS_UNKNOWN: "unknown", CLASS_TRAIL: "trail"}

MAP_MAGIC = b"BMAP"
MAP_FORMAT_VERSION = 1

TERRAIN_KINDS = ("flat", "rolling", "corridor", "obstacle_field", "slope")


class MapFormatError(ValueError):
    """Map file missing/incompatible with the expected binary schema."""


@dataclass
class ElevationMap:
    """Layered grid; origin is the world position of cell (0, 0)."""

    origin: np.ndarray        # (2,) m
    resolution: float         # m / cell
    height: np.ndarray        # (H, W) m
    normals: np.ndarray       # (H, W, 3) unit vectors
    cls: np.ndarray           # (H, W) uint8
    max_speed: np.ndarray     # (H, W) m/s
    roughness: np.ndarray = None  # (H, W), derived if absent

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.height = np.asarray(self.height, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.cls = np.asarray(self.cls, dtype=np.uint8)
        self.max_speed = np.asarray(self.max_speed, dtype=np.float64)
        if self.resolution <= 0:
            raise MapFormatError("resolution must be positive")
        norms = np.linalg.norm(self.normals, axis=-1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise MapFormatError("normals must be unit length")
        if np.any(self.cls > CLASS_TRAIL):
            raise MapFormatError("invalid class codes")
        if self.roughness is None:
            self.roughness = _local_residual(self.height)

    @property
    def shape(self):
        return self.height.shape

    # -- queries ------------------------------------------------------------

    def _grid_coords(self, x, y):
        cx = (np.asarray(x, dtype=np.float64) - self.origin[0]) / self.resolution
        cy = (np.asarray(y, dtype=np.float64) - self.origin[1]) / self.resolution
        h, w = self.height.shape
        oob = (cx < 0) | (cx > w - 1) | (cy < 0) | (cy > h - 1)
        return cx, cy, oob

    def _bilinear(self, layer, x, y):
        cx, cy, oob = self._grid_coords(x, y)
        h, w = layer.shape[:2]
        cx = np.clip(cx, 0.0, w - 1.000001)
        cy = np.clip(cy, 0.0, h - 1.000001)
        ix = np.clip(cx.astype(np.int64), 0, w - 2)
        iy = np.clip(cy.astype(np.int64), 0, h - 2)
        fx, fy = cx - ix, cy - iy
        v00 = layer[iy, ix]
        v01 = layer[iy, ix + 1]
        v10 = layer[iy + 1, ix]
        v11 = layer[iy + 1, ix + 1]
        if layer.ndim == 3:
            fx, fy = fx[..., None], fy[..., None]
        val = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
               + v10 * (1 - fx) * fy + v11 * fx * fy)
        return val, oob

    def height_at(self, x, y):
        """Bilinear height with edge clamping; returns (height, oob mask)."""
        return self._bilinear(self.height, x, y)

    def normal_at(self, x, y):
        """Bilinear-interpolated, renormalized world-frame terrain normal."""
        n, _ = self._bilinear(self.normals, x, y)
        n = np.asarray(n)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        n = n / norm
        return n[..., 0], n[..., 1], n[..., 2]

    def class_at(self, x, y):
        """Nearest-cell class; out-of-bounds is unknown space."""
        cx, cy, oob = self._grid_coords(x, y)
        h, w = self.cls.shape
        ix = np.clip(np.rint(cx).astype(np.int64), 0, w - 1)
        iy = np.clip(np.rint(cy).astype(np.int64), 0, h - 1)
        out = self.cls[iy, ix].astype(np.int64)
        return np.where(oob, CLASS_UNKNOWN, out)

    def speed_at(self, x, y):
        val, _ = self._bilinear(self.max_speed, x, y)
        return val

    def roughness_at(self, x, y):
        val, _ = self._bilinear(self.roughness, x, y)
        return val

    def query(self, x, y):
        """(height, normal, class, max_speed) at a world point."""
        h, _ = self.height_at(x, y)
        n = self.normal_at(x, y)
        return h, np.stack(n, axis=-1), self.class_at(x, y), self.speed_at(x, y)

    # -- io ----------------------------------------------------------------------

    def save(self, path) -> None:
        h, w = self.height.shape
        with Path(path).open("wb") as fh:
            fh.write(MAP_MAGIC)
            fh.write(struct.pack("<IIIddd", MAP_FORMAT_VERSION, w, h,
                                 self.resolution, self.origin[0], self.origin[1]))
            for layer in (self.height, self.normals[..., 0], self.normals[..., 1],
                          self.normals[..., 2], self.max_speed):
                fh.write(np.ascontiguousarray(layer, dtype=np.float32).tobytes())
            fh.write(np.ascontiguousarray(self.cls, dtype=np.uint8).tobytes())

    @classmethod
    def load(cls, path) -> "ElevationMap":
        raw = Path(path).read_bytes()
        if raw[:4] != MAP_MAGIC:
            raise MapFormatError("bad magic")
        version, w, h, res, ox, oy = struct.unpack_from("<IIIddd", raw, 4)
        if version != MAP_FORMAT_VERSION:
            raise MapFormatError(f"unsupported map format_version {version}")
        ofs = 4 + struct.calcsize("<IIIddd")
        n = w * h

        def f32(k):
            nonlocal ofs
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=ofs).reshape(h, w)
            ofs += 4 * n
            return arr.astype(np.float64)

        height = f32(0)
        nx, ny, nz = f32(1), f32(2), f32(3)
        max_speed = f32(4)
        cls_layer = np.frombuffer(raw, dtype=np.uint8, count=n, offset=ofs).reshape(h, w)
        normals = np.stack([nx, ny, nz], axis=-1)
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        return cls(origin=np.array([ox, oy]), resolution=res, height=height,
                   normals=normals, cls=cls_layer.copy(), max_speed=max_speed)

    def export_csv(self, path) -> None:
        """Debug export: one row per cell."""
        h, w = self.height.shape
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "x", "y", "height", "nx", "ny", "nz",
                             "class", "max_speed"])
            for iy in range(h):
                for ix in range(w):
                    writer.writerow([
                        iy, ix,
                        self.origin[0] + ix * self.resolution,
                        self.origin[1] + iy * self.resolution,
                        self.height[iy, ix], *self.normals[iy, ix],
                        int(self.cls[iy, ix]), self.max_speed[iy, ix],
                    ])


# -- terrain generation ---------------------------------------------------------------


def _smooth3(layer: np.ndarray) -> np.ndarray:
    """Separable 3x3 binomial smoothing with edge clamping."""
    k = np.array([0.25, 0.5, 0.25])
    padded = np.pad(layer, 1, mode="edge")
    out = (k[0] * padded[:, :-2] + k[1] * padded[:, 1:-1] + k[2] * padded[:, 2:])
    out = (k[0] * out[:-2, :] + k[1] * out[1:-1, :] + k[2] * out[2:, :])
    return out


def _local_residual(height: np.ndarray) -> np.ndarray:
    return _smooth3(np.abs(height - _smooth3(height)))


@dataclass
class HiddenDynamics:
    """Hidden disturbance levels of the data-generating process.

    Channel noise is zero-mean Gaussian with std = base + speed_gain * |vx|
    + roughness_gain * roughness, optionally colored by an OU process with
    correlation time ``corr_time`` (0 = white).
    """

    sigma_fx: float = 80.0
    sigma_fx_speed: float = 25.0
    sigma_vy: float = 0.03
    sigma_vy_speed: float = 0.012
    sigma_delta: float = 0.05
    sigma_delta_speed: float = 0.012
    roughness_gain_fx: float = 400.0
    roughness_gain_vy: float = 0.3
    roughness_gain_delta: float = 0.3
    corr_time: float = 0.5
    param_scale: float = 0.1

    def stds(self, vx, rough):
        avx = np.abs(vx)
        return (
            self.sigma_fx + self.sigma_fx_speed * avx + self.roughness_gain_fx * rough,
            self.sigma_vy + self.sigma_vy_speed * avx + self.roughness_gain_vy * rough,
            self.sigma_delta + self.sigma_delta_speed * avx + self.roughness_gain_delta * rough,
        )

    @classmethod
    def quiet(cls) -> "HiddenDynamics":
        return cls(sigma_fx=0.0, sigma_fx_speed=0.0, sigma_vy=0.0,
                   sigma_vy_speed=0.0, sigma_delta=0.0, sigma_delta_speed=0.0,
                   roughness_gain_fx=0.0, roughness_gain_vy=0.0,
                   roughness_gain_delta=0.0, corr_time=0.0, param_scale=0.0)


@dataclass
class WorldSpec:
    """Declarative description of a synthetic world."""

    seed: int = 0
    kind: str = "flat"
    size_x: float = 200.0
    size_y: float = 200.0
    resolution: float = 0.5
    amplitude: float = 0.4           # rolling-terrain height scale, m
    wavelength: float = 12.0         # rolling-terrain feature size, m
    slope_grade: float = 0.1         # dz/dx for slope worlds
    obstacle_density: float = 0.02   # obstacles per 10x10 m patch fraction
    corridor_width: float = 5.0
    corridor_margin: float = 30.0    # open area before the corridor starts
    trail: bool = False
    trail_width: float = 3.0
    speed_cap: float = 8.0
    hidden: HiddenDynamics = field(default_factory=HiddenDynamics)

    def __post_init__(self):
        if self.kind not in TERRAIN_KINDS:
            raise MapFormatError(f"unknown terrain kind {self.kind!r}")
        if not 0.0 <= self.obstacle_density <= 1.0:
            raise MapFormatError("obstacle_density must be in [0, 1]")


def generate(spec: WorldSpec) -> ElevationMap:
    """Deterministic map generation from the spec seed."""
    rng = np.random.default_rng(spec.seed)
    w = int(round(spec.size_x / spec.resolution)) + 1
    h = int(round(spec.size_y / spec.resolution)) + 1
    origin = np.array([-spec.size_x / 2.0, -spec.size_y / 2.0])
    xs = origin[0] + np.arange(w) * spec.resolution
    ys = origin[1] + np.arange(h) * spec.resolution
    xx, yy = np.meshgrid(xs, ys)
    height = np.zeros((h, w))
    cls_layer = np.full((h, w), CLASS_FREE, dtype=np.uint8)

    if spec.kind == "rolling":
        noise = rng.standard_normal((h, w))
        smooth_passes = max(1, int(round(spec.wavelength / spec.resolution / 2)))
        for _ in range(smooth_passes):
            noise = _smooth3(noise)
        noise /= max(np.std(noise), 1e-9)
        height = spec.amplitude * noise
    elif spec.kind == "slope":
        height = spec.slope_grade * (xx - origin[0])
    elif spec.kind == "corridor":
        # lethal banks on both sides of a straight corridor along +x,
        # entered from an open staging area
        inside_walls = (xx > origin[0] + spec.corridor_margin)
        off_corridor = np.abs(yy) > spec.corridor_width / 2.0
        cls_layer[inside_walls & off_corridor] = CLASS_LETHAL
    elif spec.kind == "obstacle_field":
        area_cells = h * w
        n_obstacles = int(spec.obstacle_density * area_cells * spec.resolution**2 / 25.0)
        for _ in range(n_obstacles):
            ox = rng.uniform(origin[0] + 10, origin[0] + spec.size_x - 10)
            oy = rng.uniform(origin[1] + 10, origin[1] + spec.size_y - 10)
            radius = rng.uniform(0.6, 1.8)
            d2 = (xx - ox) ** 2 + (yy - oy) ** 2
            cls_layer[d2 <= radius**2] = CLASS_LETHAL
            ring = (d2 > radius**2) & (d2 <= (radius + 1.2) ** 2)
            cls_layer[ring & (cls_layer == CLASS_FREE)] = CLASS_RISKY

    if spec.trail:
        on_trail = np.abs(yy) <= spec.trail_width / 2.0
        cls_layer[on_trail & (cls_layer == CLASS_FREE)] = CLASS_TRAIL

    smoothed = _smooth3(height)
    gy, gx = np.gradient(smoothed, spec.resolution)
    normals = np.stack([-gx, -gy, np.ones_like(smoothed)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    max_speed = np.full((h, w), spec.speed_cap)
    return ElevationMap(origin=origin, resolution=spec.resolution, height=smoothed,
                        normals=normals, cls=cls_layer, max_speed=max_speed)


# -- ground-truth simulation -------------------------------------------------------------


def perturbed_params(base: VehicleParams, hidden: HiddenDynamics,
                     rng: np.random.Generator) -> VehicleParams:
    """Randomly scaled copy of the force-model constants (the sim's secret)."""
    s = hidden.param_scale

    def jitter(v):
        return v * (1.0 + s * rng.uniform(-1.0, 1.0))

    return replace(
        base,
        c_d=jitter(base.c_d),
        c_b=jitter(base.c_b),
        c_yaw=jitter(base.c_yaw),
        c_yaw_damp=jitter(base.c_yaw_damp),
        rolling_sign=jitter(base.rolling_sign),
        engine_poly=base.engine_poly * (1.0 + s * rng.uniform(-1.0, 1.0)),
    )


class TruthSimulator:
    """Hidden-parameter simulator producing the data the learner must capture."""

    def __init__(self, emap: ElevationMap, hidden: HiddenDynamics,
                 params: VehicleParams | None = None,
                 susp: SuspensionParams | None = None,
                 delay: DelayNetParams | None = None,
                 seed: int = 0, perturb_params: bool = True):
        self.map = emap
        self.hidden = hidden
        self.base_params = params if params is not None else VehicleParams()
        self.susp = susp if susp is not None else SuspensionParams()
        self.delay = delay if delay is not None else DelayNetParams()
        self.rng = np.random.default_rng(seed)
        self.params = (perturbed_params(self.base_params, hidden, self.rng)
                       if perturb_params else self.base_params)
        self._ou = np.zeros(3)

    def reset_noise(self):
        self._ou = np.zeros(3)

    def _noise(self, vx: float, rough: float) -> np.ndarray:
        stds = np.array(self.hidden.stds(vx, rough))
        if not np.any(stds > 0):
            return np.zeros(3)
        white = self.rng.standard_normal(3)
        if self.hidden.corr_time <= 0:
            self._ou = white
        else:
            rho = np.exp(-self.base_params.dt / self.hidden.corr_time)
            self._ou = rho * self._ou + np.sqrt(1.0 - rho * rho) * white
        return stds * self._ou

    def step(self, state: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Advance the true 16-state one step; Eq.-(1) noise realized."""
        state = np.asarray(state, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        dt = self.base_params.dt
        eta = suspension.body_normal_from_map(state, self.map, self.susp)
        rough = float(self.map.roughness_at(state[PX], state[PY]))
        eps_fx, eps_vy, eps_delta = self._noise(float(state[VX]), rough)
        perturb = model.ChannelPerturbation(brake=0.0, delta=eps_delta,
                                            vy=eps_vy, fx=eps_fx)
        px_dot, py_dot, vx_dot, vy_dot, yaw_accel, _ = model.planar_rates(
            state, u, eta, self.params, perturb=perturb)
        nb, ne, nd, ndr = model.step_delay_arrays(
            state[BRAKE], state[RPM], state[DELTA], state[DELTA_RATE], state[VX],
            u[0], u[1], u[2], self.params, self.delay, dt)
        susp_new, _, _ = suspension.step_suspension_arrays(
            state, eta, self.map.height_at, self.susp, self.params, dt)
        out = state.copy()
        out[PX] += dt * px_dot
        out[PY] += dt * py_dot
        out[PSI] += dt * state[YAW_RATE]
        out[VX] += dt * vx_dot
        out[VY] += dt * vy_dot
        out[YAW_RATE] += dt * yaw_accel
        out[BRAKE], out[RPM], out[DELTA], out[DELTA_RATE] = nb, ne, nd, ndr
        out[PZ], out[PHI], out[THETA] = susp_new[0], susp_new[1], susp_new[2]
        out[13], out[14], out[15] = susp_new[3], susp_new[4], susp_new[5]
        return out

    def readings(self, state: np.ndarray):
        return suspension.body_normal_from_map(np.asarray(state), self.map, self.susp)


def truth_step(state, u, emap: ElevationMap, hidden: HiddenDynamics,
               rng: np.random.Generator | None = None,
               params: VehicleParams | None = None) -> np.ndarray:
    """One-shot truth step (white noise, unperturbed parameters)."""
    sim = TruthSimulator(emap, hidden, params=params, seed=0, perturb_params=False)
    if rng is not None:
        sim.rng = rng
    sim.hidden = replace(hidden, corr_time=0.0)
    return sim.step(np.asarray(state, dtype=np.float64), np.asarray(u, dtype=np.float64))


# -- scripted data collection ----------------------------------------------------------------


class ScriptedDriver:
    """Randomized maneuver mixture: straights, turns, braking, slope crossings."""

    def __init__(self, rng: np.random.Generator, dt: float):
        self.rng = rng
        self.dt = dt
        self._t_next = 0.0
        self._throttle = 0.4
        self._brake = 0.0
        self._steer_amp = 0.0
        self._steer_freq = 0.3
        self._steer_phase = 0.0
        self._steer_bias = 0.0
        self._time = 0.0

    def _resample(self):
        self._t_next = self._time + self.rng.uniform(0.8, 2.5)
        mode = self.rng.random()
        if mode < 0.25:
            self._throttle, self._brake = 0.0, self.rng.uniform(0.3, 0.9)
        else:
            self._throttle, self._brake = self.rng.uniform(0.15, 0.95), 0.0
        self._steer_amp = self.rng.uniform(0.0, 4.5)
        self._steer_freq = self.rng.uniform(0.1, 0.7)
        self._steer_phase = self.rng.uniform(0, 2 * np.pi)
        self._steer_bias = self.rng.uniform(-1.5, 1.5)

    def __call__(self, state: np.ndarray) -> np.ndarray:
        if self._time >= self._t_next:
            self._resample()
        steer = self._steer_bias + self._steer_amp * np.sin(
            2 * np.pi * self._steer_freq * self._time + self._steer_phase)
        self._time += self.dt
        return np.array([self._throttle, self._brake,
                         float(np.clip(steer, -7.0, 7.0))])


def initial_true_state(emap: ElevationMap, susp: SuspensionParams,
                       rng: np.random.Generator, spawn_radius: float = 30.0,
                       vx_range=(0.0, 7.0)) -> np.ndarray:
    state = np.zeros(16)
    state[PX] = rng.uniform(-spawn_radius, spawn_radius)
    state[PY] = rng.uniform(-spawn_radius, spawn_radius)
    state[PSI] = rng.uniform(-np.pi, np.pi)
    state[VX] = rng.uniform(*vx_range)
    state[RPM] = rng.uniform(800.0, 4000.0)
    ground, _ = emap.height_at(state[PX], state[PY])
    state[PZ] = float(ground) + susp.rest_height
    return state


def collect_dataset(spec: WorldSpec, n_traj: int, horizon: float = 5.0,
                    tau: float = 0.2, params: VehicleParams | None = None,
                    susp: SuspensionParams | None = None,
                    delay: DelayNetParams | None = None,
                    settle_steps: int = 25):
    """Simulate scripted trajectories; readings logged at the true states.

    Returns a list of TrajectorySample with T/dt + tau/dt recorded frames per
    trajectory (deterministic in the spec seed).
    """
    from .learning.datasets import TrajectorySample

    params = params if params is not None else VehicleParams()
    susp = susp if susp is not None else SuspensionParams()
    emap = generate(spec)
    dt = params.dt
    n_hist = int(round(tau / dt))
    n_frames = int(round(horizon / dt)) + n_hist
    samples = []
    for k in range(n_traj):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, k)))
        sim = TruthSimulator(emap, spec.hidden, params=params, susp=susp,
                             delay=delay, seed=int(rng.integers(2**31)))
        driver = ScriptedDriver(rng, dt)
        state = initial_true_state(emap, susp, rng)
        for _ in range(settle_steps):
            state = sim.step(state, np.array([0.3, 0.0, 0.0]))
        states, controls, normals = [], [], []
        for _ in range(n_frames):
            u = driver(state)
            eta = sim.readings(state)
            states.append(state.copy())
            controls.append(u)
            normals.append(np.array(eta, dtype=np.float64))
            state = sim.step(state, u)
        samples.append(TrajectorySample(dt=dt, tau=tau, states=np.array(states),
                                        controls=np.array(controls),
                                        normals=np.array(normals)))
    return samples
