from .types import (
    VehicleState,
    ControlInput,
    SensorReadings,
    ForceVector,
    InvalidStateError,
    STATE_DIM,
    REDUCED_DIM,
    CONTROL_DIM,
)
from .params import (
    VehicleParams,
    SuspensionParams,
    DelayNetParams,
    ParamsFormatError,
    save_params,
    load_params,
)
from .model import (
    gamma,
    step_delay,
    tire_slip_angles,
    parametric_forces,
    body_accelerations,
    planar_forces,
    planar_rates,
    reduced_step,
    ChannelPerturbation,
    ParameterBlowupError,
    NOISE_CHANNELS,
)
from .suspension import (
    wheel_world_positions,
    step_suspension,
    rotation_matrix,
)

__all__ = [
    "VehicleState", "ControlInput", "SensorReadings", "ForceVector",
    "InvalidStateError", "STATE_DIM", "REDUCED_DIM", "CONTROL_DIM",
    "VehicleParams", "SuspensionParams", "DelayNetParams", "ParamsFormatError",
    "save_params", "load_params",
    "gamma", "step_delay", "tire_slip_angles", "parametric_forces",
    "body_accelerations", "planar_forces", "planar_rates", "reduced_step",
    "ChannelPerturbation", "ParameterBlowupError", "NOISE_CHANNELS",
    "wheel_world_positions", "step_suspension", "rotation_matrix",
]
