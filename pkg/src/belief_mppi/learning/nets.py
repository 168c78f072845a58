"""Compensation networks: gated recurrent predictors with a history initializer.

The mean network outputs a force-space correction (or a derivative-space one
in the direct-compensation variant); the uncertainty network outputs raw noise
values that :func:`belief_mppi.belief.assemble_q` turns into a process-noise
matrix.  A single initializer network runs once over the history buffer and
seeds the hidden state of both predictors plus (optionally) the initial
covariance.

A 2-gate gated recurrent cell stands in for the usual LSTM; weights live in a
flat name->array dict so the same forward code runs on plain numpy (controller
rollouts) or autodiff tensors (training).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..vehicle.types import BRAKE, DELTA, DELTA_RATE, RPM, VX, VY, YAW_RATE

WEIGHTS_FORMAT_VERSION = 1

N_CHANNELS = 4        # noise channels (brake, delta, vy, fx)
N_REDUCED = 4
N_UPPER = 10          # upper triangle incl. diagonal of a 4x4
UPPER_DIAG_POSITIONS = (0, 4, 7, 9)

ARCHS = ("recurrent_init", "recurrent", "feedforward")
INIT_MODES = ("fixed", "meta", "predicted")


class WeightsFormatError(ValueError):
    """Weights file missing/incompatible with the expected schema."""


@dataclass
class NetworkParams:
    """Weights plus the structural flags selecting an ablation variant."""

    arch: str = "recurrent_init"
    direct_compensation: bool = False   # correct state derivatives, not forces
    no_parametric: bool = False         # drop the parametric force prior
    no_a_matrix: bool = False           # covariance transport uses identity
    no_g_matrix: bool = False           # only the unstructured noise term
    hybrid_q: bool = False              # structured + unstructured noise
    combined_net: bool = False          # one predictor for mean and noise
    include_force_input: bool = True    # feed predicted forces to the nets
    init_mode: str = "fixed"
    init_full_cov: bool = False
    linearize_through_net: bool = False
    pred_hidden: int = 4
    pred_out_width: int = 20
    init_hidden: int = 20
    init_out_width: int = 100
    ff_widths: tuple = (128, 64)
    rpm_scale: float = 1e-3
    force_scale: float = 1e-3
    mean_out_scale: float = 100.0
    rate_out_scale: float = 1.0
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise WeightsFormatError(f"unknown arch {self.arch!r}")
        if self.init_mode not in INIT_MODES:
            raise WeightsFormatError(f"unknown init_mode {self.init_mode!r}")
        if self.no_g_matrix and self.hybrid_q:
            raise WeightsFormatError("no_g_matrix and hybrid_q are exclusive")
        self.ff_widths = tuple(self.ff_widths)

    # -- derived sizes -------------------------------------------------------

    @property
    def feature_dim(self) -> int:
        return 13 + (4 if self.include_force_input else 0)

    @property
    def mean_out_dim(self) -> int:
        return 3 if self.direct_compensation else 4

    @property
    def q_out_dim(self) -> int:
        if self.no_g_matrix:
            return N_UPPER
        if self.hybrid_q:
            return N_CHANNELS + N_UPPER
        return N_CHANNELS

    @property
    def init_cov_dim(self) -> int:
        return N_UPPER if self.init_full_cov else N_REDUCED

    def heads(self):
        """(name, output_dim) of the predictor heads."""
        if self.combined_net:
            return [("joint", self.mean_out_dim + self.q_out_dim)]
        return [("mean", self.mean_out_dim), ("q", self.q_out_dim)]

    # -- weight construction ---------------------------------------------------

    def initialize(self, rng: np.random.Generator) -> "NetworkParams":
        """Fresh small random weights for the configured variant."""
        t = {}

        def lin(name, fan_in, fan_out, scale=None):
            s = scale if scale is not None else 1.0 / np.sqrt(max(fan_in, 1))
            t[name + "_w"] = rng.uniform(-s, s, size=(fan_in, fan_out))
            t[name + "_b"] = np.zeros(fan_out)

        feat = self.feature_dim
        hidden = self.pred_hidden * (2 if self.combined_net else 1)
        for head, out_dim in self.heads():
            if self.arch == "feedforward":
                widths = [feat, *self.ff_widths, out_dim]
                for i in range(len(widths) - 1):
                    lin(f"{head}_ff{i}", widths[i], widths[i + 1])
            else:
                lin(f"{head}_gru_x", feat, 3 * hidden)
                lin(f"{head}_gru_h", hidden, 3 * hidden)
                lin(f"{head}_out0", feat + hidden, self.pred_out_width)
                lin(f"{head}_out1", self.pred_out_width, out_dim)
        if self.arch == "recurrent_init":
            n_seeds = hidden * len(self.heads())
            lin("init_gru_x", feat, 3 * self.init_hidden)
            lin("init_gru_h", self.init_hidden, 3 * self.init_hidden)
            lin("init_out0", self.init_hidden, self.init_out_width)
            lin("init_out1", self.init_out_width, n_seeds + self.init_cov_dim)
        t["meta_cov_raw"] = np.full(N_REDUCED, -4.0)
        t["log_c_sigma"] = np.log(np.array([0.05, 4.0, 2.0, 2.0e7]))
        t["kappa_log_diag"] = np.log(np.array([1e-3, 1e-3, 2e-4, 2e-3]))
        t["kappa_offdiag"] = np.zeros(6)
        t["log_c_init"] = np.log(np.array([0.05, 0.05, 0.02, 0.05]))
        return replace(self, tensors=t)

    # -- (de)serialization -------------------------------------------------------

    def flags_dict(self) -> dict:
        return {
            "arch": self.arch,
            "direct_compensation": self.direct_compensation,
            "no_parametric": self.no_parametric,
            "no_a_matrix": self.no_a_matrix,
            "no_g_matrix": self.no_g_matrix,
            "hybrid_q": self.hybrid_q,
            "combined_net": self.combined_net,
            "include_force_input": self.include_force_input,
            "init_mode": self.init_mode,
            "init_full_cov": self.init_full_cov,
            "linearize_through_net": self.linearize_through_net,
            "pred_hidden": self.pred_hidden,
            "pred_out_width": self.pred_out_width,
            "init_hidden": self.init_hidden,
            "init_out_width": self.init_out_width,
            "ff_widths": list(self.ff_widths),
            "rpm_scale": self.rpm_scale,
            "force_scale": self.force_scale,
            "mean_out_scale": self.mean_out_scale,
            "rate_out_scale": self.rate_out_scale,
        }

    def save(self, path) -> None:
        doc = {
            "format_version": WEIGHTS_FORMAT_VERSION,
            "flags": self.flags_dict(),
            "tensors": {k: v.tolist() for k, v in self.tensors.items()},
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "NetworkParams":
        doc = json.loads(Path(path).read_text())
        version = doc.get("format_version")
        if version != WEIGHTS_FORMAT_VERSION:
            raise WeightsFormatError(
                f"unsupported weights format_version {version!r}"
            )
        flags = dict(doc["flags"])
        flags["ff_widths"] = tuple(flags.get("ff_widths", (128, 64)))
        tensors = {k: np.asarray(v, dtype=np.float64) for k, v in doc["tensors"].items()}
        for arr in tensors.values():
            if not np.all(np.isfinite(arr)):
                raise WeightsFormatError("non-finite weights")
        return cls(**flags, tensors=tensors)

    # -- noise scales ----------------------------------------------------------

    def c_sigma(self, tensors=None):
        t = tensors if tensors is not None else self.tensors
        return ad.exp(t["log_c_sigma"])

    def kappa_scale_matrix(self, tensors=None):
        """Symmetric scale matrix for the unstructured noise term."""
        t = tensors if tensors is not None else self.tensors
        diag = ad.exp(t["kappa_log_diag"])
        off = t["kappa_offdiag"]
        return sym_from_upper_parts(diag, off)


# -- feature construction -------------------------------------------------------


def build_features(state_cols, u_cols, eta_cols, forces, net: NetworkParams):
    """Stack the standard network input vector from batched columns.

    Inputs: state subset (vx, vy, yaw rate, brake, scaled rpm, steer, steer
    rate), the commanded controls, body-frame normals, and optionally the
    (scaled) parametric force prior.
    """
    cols = [
        state_cols[VX],
        state_cols[VY],
        state_cols[YAW_RATE],
        state_cols[BRAKE],
        state_cols[RPM] * net.rpm_scale,
        state_cols[DELTA],
        state_cols[DELTA_RATE],
        u_cols[0],
        u_cols[1],
        u_cols[2],
        eta_cols[0],
        eta_cols[1],
        eta_cols[2],
    ]
    if net.include_force_input:
        fx, fyf, fyb, fr = forces
        cols += [fx * net.force_scale, fyf * net.force_scale,
                 fyb * net.force_scale, fr]
    return ad.stack(cols, axis=-1)


# -- forward passes ---------------------------------------------------------------


def _gru_cell(x, h, wx, bx, wh, bh, hidden):
    gx = ad.matmul(x, wx) + bx
    gh = ad.matmul(h, wh) + bh
    z = ad.sigmoid(gx[..., :hidden] + gh[..., :hidden])
    r = ad.sigmoid(gx[..., hidden:2 * hidden] + gh[..., hidden:2 * hidden])
    cand = ad.tanh(gx[..., 2 * hidden:] + r * gh[..., 2 * hidden:])
    return (1.0 - z) * h + z * cand


def _head_forward(head, x, h, t, net: NetworkParams):
    """One predictor step for a named head; returns (output, new hidden)."""
    if net.arch == "feedforward":
        out = x
        n_layers = len(net.ff_widths) + 1
        for i in range(n_layers):
            out = ad.matmul(out, t[f"{head}_ff{i}_w"]) + t[f"{head}_ff{i}_b"]
            if i < n_layers - 1:
                out = ad.tanh(out)
        return out, h
    hidden = net.pred_hidden * (2 if net.combined_net else 1)
    h_new = _gru_cell(x, h, t[f"{head}_gru_x_w"], t[f"{head}_gru_x_b"],
                      t[f"{head}_gru_h_w"], t[f"{head}_gru_h_b"], hidden)
    z = ad.concat([x, h_new], axis=-1)
    out = ad.tanh(ad.matmul(z, t[f"{head}_out0_w"]) + t[f"{head}_out0_b"])
    out = ad.matmul(out, t[f"{head}_out1_w"]) + t[f"{head}_out1_b"]
    return out, h_new


def predictor_step(net: NetworkParams, tensors, features, hidden_state):
    """Run the mean/noise predictors one step.

    ``hidden_state`` is a dict head->hidden array (ignored for feedforward).
    Returns (mean_correction, q_raw, qprime_raw, new_hidden_state).  The mean
    correction is scaled to force space (or derivative space for the direct
    variant); entries that a variant does not predict come back as None.
    """
    t = tensors
    new_hidden = {}
    if net.combined_net:
        out, h = _head_forward("joint", features, hidden_state.get("joint"), t, net)
        new_hidden["joint"] = h
        mean_out = out[..., : net.mean_out_dim]
        q_out = out[..., net.mean_out_dim:]
    else:
        mean_out, h_m = _head_forward("mean", features, hidden_state.get("mean"), t, net)
        q_out, h_q = _head_forward("q", features, hidden_state.get("q"), t, net)
        new_hidden["mean"] = h_m
        new_hidden["q"] = h_q
    scale = net.rate_out_scale if net.direct_compensation else net.mean_out_scale
    mean_corr = mean_out * scale
    if net.no_g_matrix:
        q_raw, qprime_raw = None, q_out
    elif net.hybrid_q:
        q_raw = q_out[..., :N_CHANNELS]
        qprime_raw = q_out[..., N_CHANNELS:]
    else:
        q_raw, qprime_raw = q_out, None
    return mean_corr, q_raw, qprime_raw, new_hidden


def zero_hidden(net: NetworkParams, batch_shape=()):
    """Initial hidden state of the predictors (zeros; seeded later if any)."""
    hidden = net.pred_hidden * (2 if net.combined_net else 1)
    heads = ["joint"] if net.combined_net else ["mean", "q"]
    shape = (*batch_shape, hidden)
    return {h: np.zeros(shape) for h in heads}


def initializer_forward(net: NetworkParams, tensors, feature_seq):
    """Run the initializer over the history window.

    ``feature_seq`` is a sequence of feature arrays (time-major).  Returns
    (hidden seeds dict, raw initial-covariance vector or None).  For archs
    without an initializer the seeds are zeros.
    """
    if net.arch != "recurrent_init":
        return zero_hidden(net), None
    t = tensors
    h = np.zeros((*np.shape(ad.value_of(feature_seq[0]))[:-1], net.init_hidden))
    for x in feature_seq:
        h = _gru_cell(x, h, t["init_gru_x_w"], t["init_gru_x_b"],
                      t["init_gru_h_w"], t["init_gru_h_b"], net.init_hidden)
    z = ad.tanh(ad.matmul(h, t["init_out0_w"]) + t["init_out0_b"])
    out = ad.matmul(z, t["init_out1_w"]) + t["init_out1_b"]
    hidden = net.pred_hidden * (2 if net.combined_net else 1)
    seeds = {}
    ofs = 0
    for head, _ in net.heads():
        seeds[head] = out[..., ofs:ofs + hidden]
        ofs += hidden
    cov_raw = out[..., ofs:ofs + net.init_cov_dim]
    return seeds, cov_raw


# -- symmetric-matrix construction ------------------------------------------------


def sym_from_upper(vals):
    """Symmetric 4x4 from the 10 upper-triangle values (row-major order)."""
    v = [vals[..., i] for i in range(N_UPPER)]
    rows = [
        ad.stack([v[0], v[1], v[2], v[3]], axis=-1),
        ad.stack([v[1], v[4], v[5], v[6]], axis=-1),
        ad.stack([v[2], v[5], v[7], v[8]], axis=-1),
        ad.stack([v[3], v[6], v[8], v[9]], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def sym_from_upper_parts(diag, off):
    """Symmetric 4x4 from separate diagonal (4,) and off-diagonal (6,) parts."""
    d = [diag[..., i] for i in range(4)]
    o = [off[..., i] for i in range(6)]
    rows = [
        ad.stack([d[0], o[0], o[1], o[2]], axis=-1),
        ad.stack([o[0], d[1], o[3], o[4]], axis=-1),
        ad.stack([o[1], o[3], d[2], o[5]], axis=-1),
        ad.stack([o[2], o[4], o[5], d[3]], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def kappa_matrix(qprime_raw):
    """Continuously clipped symmetric matrix from raw upper-triangle values.

    Diagonal entries pass through a sigmoid, off-diagonals through tanh; the
    caller scales the result elementwise.
    """
    parts = []
    for i in range(N_UPPER):
        raw = qprime_raw[..., i]
        parts.append(ad.sigmoid(raw) if i in UPPER_DIAG_POSITIONS else ad.tanh(raw))
    return sym_from_upper(ad.stack(parts, axis=-1))


def forward_mean_comp(net: NetworkParams, state, u, readings, force_prior):
    """Single-state mean compensation (fresh zero hidden state).

    ``state``/``u`` may be the dataclasses or raw arrays; ``force_prior`` is a
    4-vector in force space.
    """
    s = state.as_array() if hasattr(state, "as_array") else np.asarray(state)
    c = u.as_array() if hasattr(u, "as_array") else np.asarray(u)
    eta = readings.normal if hasattr(readings, "normal") else np.asarray(readings)
    fp = force_prior.as_array() if hasattr(force_prior, "as_array") else np.asarray(force_prior)
    feats = build_features(s, c, eta, tuple(fp), net)
    corr, _, _, _ = predictor_step(net, net.tensors, feats, zero_hidden(net))
    return np.asarray(ad.value_of(corr), dtype=np.float64)
