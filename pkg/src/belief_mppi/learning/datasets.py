"""JSONL trajectory dataset: one trajectory per line.

Each line holds {dt, tau, states: [[16]...], controls: [[3]...],
normals: [[3]...]}.  The first tau/dt frames are the history window used for
initialization; the remaining frames are the prediction horizon.  A leading
``#`` header comment carries the format version.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..vehicle.types import CONTROL_DIM, STATE_DIM

DATASET_FORMAT_VERSION = 1
_HEADER_PREFIX = "# belief-mppi-dataset"


class DatasetFormatError(ValueError):
    """Dataset file missing/incompatible with the expected schema."""


@dataclass
class TrajectorySample:
    """One recorded trajectory: a history window plus the truth horizon."""

    dt: float
    tau: float
    states: np.ndarray    # (N, 16)
    controls: np.ndarray  # (N, 3)
    normals: np.ndarray   # (N, 3)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.controls = np.asarray(self.controls, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        n = self.states.shape[0]
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise DatasetFormatError("states must be (N, 16)")
        if self.controls.shape != (n, CONTROL_DIM):
            raise DatasetFormatError("controls must be (N, 3)")
        if self.normals.shape != (n, 3):
            raise DatasetFormatError("normals must be (N, 3)")
        if self.dt <= 0 or self.tau < 0:
            raise DatasetFormatError("dt must be positive and tau nonnegative")
        for arr in (self.states, self.controls, self.normals):
            if not np.all(np.isfinite(arr)):
                raise DatasetFormatError("non-finite dataset values")

    @property
    def history_frames(self) -> int:
        """Frames consumed by the initializer (at least the start frame)."""
        return max(int(round(self.tau / self.dt)), 1)

    @property
    def start_index(self) -> int:
        return self.history_frames - 1

    @property
    def horizon_steps(self) -> int:
        return self.states.shape[0] - 1 - self.start_index

    def to_json_dict(self) -> dict:
        return {
            "dt": self.dt,
            "tau": self.tau,
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "normals": self.normals.tolist(),
        }


def write_dataset(samples, path) -> int:
    """Write trajectories as JSONL with a version header; returns lines written."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"{_HEADER_PREFIX} format_version={DATASET_FORMAT_VERSION}\n")
        count = 0
        for s in samples:
            fh.write(json.dumps(s.to_json_dict()) + "\n")
            count += 1
    return count


def read_dataset(path) -> list[TrajectorySample]:
    path = Path(path)
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith(_HEADER_PREFIX):
                tail = line.rsplit("format_version=", 1)
                if len(tail) != 2 or int(tail[1]) != DATASET_FORMAT_VERSION:
                    raise DatasetFormatError(
                        f"unsupported dataset format version in header: {line!r}"
                    )
            continue
        try:
            doc = json.loads(line)
            samples.append(TrajectorySample(
                dt=float(doc["dt"]),
                tau=float(doc["tau"]),
                states=doc["states"],
                controls=doc["controls"],
                normals=doc["normals"],
            ))
        except (KeyError, ValueError, TypeError) as err:
            raise DatasetFormatError(f"bad trajectory at line {lineno}: {err}") from err
    return samples


def stack_batch(samples: list[TrajectorySample]):
    """Stack equal-length trajectories into (B, N, .) arrays for batched training."""
    if not samples:
        raise DatasetFormatError("empty dataset")
    n = samples[0].states.shape[0]
    dt, tau = samples[0].dt, samples[0].tau
    for s in samples:
        if s.states.shape[0] != n or s.dt != dt or s.tau != tau:
            raise DatasetFormatError("batched trajectories must share length, dt, tau")
    states = np.stack([s.states for s in samples])
    controls = np.stack([s.controls for s in samples])
    normals = np.stack([s.normals for s in samples])
    return states, controls, normals
