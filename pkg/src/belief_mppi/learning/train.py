"""Training loop: full-horizon backpropagation through the belief rollout.

The trajectory loss is the multistep Gaussian NLL of the propagated belief
against ground truth, so gradients flow through the mean dynamics, the
Jacobian-based covariance transport, and the structured process noise at
every step.  Optimization is Adam with global-norm gradient clipping;
the weights retained are those with the lowest validation loss across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .. import autodiff as ad
from .. import belief as beliefmod
from ..vehicle.params import DelayNetParams, VehicleParams
from ..vehicle.types import VY, YAW_RATE
from . import nets as netmod
from .datasets import TrajectorySample, stack_batch
from .loss import DEFAULT_C_PI, nll_sequence

VARIANTS = {
    "baseline": {},
    "no_A": {"no_a_matrix": True},
    "no_G": {"no_g_matrix": True},
    "D": {"direct_compensation": True},
    "HQ": {"hybrid_q": True},
    "FF": {"arch": "feedforward"},
    "meta-init": {"init_mode": "meta"},
    "pred-init": {"init_mode": "predicted"},
    "no_P": {"no_parametric": True},
    "no_prior": {"include_force_input": False},
    "C": {"combined_net": True},
    "LSTM": {"arch": "recurrent"},
}


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss {loss})")


class UnknownVariantError(KeyError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    clip_norm: float = 10.0
    val_fraction: float = 0.2
    seed: int = 0
    c_pi: float = DEFAULT_C_PI
    train_all: bool = False       # unfreeze delay-model weights
    delay_state_l2: float = 0.0   # optional penalty keeping delay states accurate


@dataclass
class TrainResult:
    net: netmod.NetworkParams
    loss_curve: list          # (epoch, train_nll, val_nll) rows
    best_epoch: int
    val_indices: list
    delay: DelayNetParams | None = None


class Adam:
    """Standard Adam over a name->Tensor dict."""

    def __init__(self, tensors, lr, beta1, beta2, eps):
        self.tensors = tensors
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.value) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in tensors.items()}
        self.t = 0

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, tensor in self.tensors.items():
            if tensor.grad is None:
                continue
            g = tensor.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            tensor.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


@dataclass
class _DelayShim:
    """DelayNetParams-shaped view whose fields may be tensors (train_all)."""

    engine_w1: object
    engine_b1: object
    engine_w2: object
    engine_b2: object
    steer_w1: object
    steer_b1: object
    steer_w2: object
    steer_b2: object


_DELAY_FIELDS = ("engine_w1", "engine_b1", "engine_w2", "engine_b2",
                 "steer_w1", "steer_b1", "steer_w2", "steer_b2")


def rollout_loss(net: netmod.NetworkParams, tensors, states, controls, normals,
                 history_frames: int, params: VehicleParams, delay, dt: float,
                 c_pi: float = DEFAULT_C_PI, delay_state_l2: float = 0.0):
    """Per-trajectory summed NLL over the horizon; (B,) for batched input.

    ``tensors`` may hold plain arrays (fast evaluation) or autodiff tensors
    (training); ``delay`` likewise.  Readings are the logged true-state values.
    """
    b, n = states.shape[0], states.shape[1]
    start = history_frames - 1
    feature_seq = []
    for i in range(history_frames):
        s_cols = [states[:, i, j] for j in range(16)]
        u_cols = [controls[:, i, j] for j in range(3)]
        eta_cols = [normals[:, i, j] for j in range(3)]
        forces, _, _ = beliefmod._force_prior(s_cols, u_cols, eta_cols, net, params)
        feature_seq.append(netmod.build_features(s_cols, u_cols, eta_cols, forces, net))
    seeds, cov_raw = netmod.initializer_forward(net, tensors, feature_seq)
    hidden = seeds if net.arch == "recurrent_init" else netmod.zero_hidden(net, (b,))
    if net.init_mode == "fixed":
        cov = np.broadcast_to(np.eye(4) * beliefmod.FIXED_INIT_VARIANCE, (b, 4, 4)).copy()
    elif net.init_mode == "meta":
        diag = ad.sigmoid(tensors["meta_cov_raw"]) * ad.exp(tensors["log_c_init"])
        cov = beliefmod._expand_diag(diag, None) * np.eye(4)
    else:
        if cov_raw is None:
            raise ValueError("predicted init mode requires the recurrent_init arch")
        cov = beliefmod.initial_cov_from_raw(cov_raw, net, tensors)
    state_cols = [states[:, start, j] for j in range(16)]
    gains = beliefmod.GainSet.open_loop()
    mean_seq, cov_seq, reg_seq, truth_seq, reg_truth_seq = [], [], [], [], []
    delay_pen = None
    for t in range(start, n - 1):
        u_cols = [controls[:, t, j] for j in range(3)]
        eta_cols = [normals[:, t, j] for j in range(3)]
        state_cols, cov, hidden, _ = beliefmod.propagate_cols(
            state_cols, cov, u_cols, eta_cols, net, tensors, hidden, gains,
            params, delay, dt,
        )
        mean_seq.append(ad.stack(state_cols[:4], axis=-1))
        cov_seq.append(cov)
        reg_seq.append(ad.stack([state_cols[VY], state_cols[YAW_RATE]], axis=-1))
        truth_seq.append(states[:, t + 1, :4])
        reg_truth_seq.append(states[:, t + 1, (VY, YAW_RATE)])
        if delay_state_l2 > 0.0:
            pen = ((state_cols[6] - states[:, t + 1, 6]) ** 2
                   + ((state_cols[7] - states[:, t + 1, 7]) * 1e-3) ** 2
                   + (state_cols[8] - states[:, t + 1, 8]) ** 2
                   + (state_cols[9] - states[:, t + 1, 9]) ** 2)
            delay_pen = pen if delay_pen is None else delay_pen + pen
    total = nll_sequence(mean_seq, cov_seq, truth_seq, reg_seq, reg_truth_seq, c_pi)
    if delay_pen is not None:
        total = total + delay_state_l2 * delay_pen
    return total


def _split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    idx = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return sorted(idx[n_val:].tolist()), sorted(idx[:n_val].tolist())


def train(dataset: list[TrajectorySample], net: netmod.NetworkParams,
          cfg: OptimizerConfig, params: VehicleParams | None = None,
          delay: DelayNetParams | None = None,
          progress=None) -> TrainResult:
    """Train the compensation networks on a trajectory dataset.

    Full-batch Adam; the returned network carries the weights of the epoch
    with the lowest validation loss.  The dataset is never mutated.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    params = params if params is not None else VehicleParams()
    delay = delay if delay is not None else DelayNetParams()
    rng = np.random.default_rng(cfg.seed)
    states, controls, normals = stack_batch(dataset)
    dt, hist = dataset[0].dt, dataset[0].history_frames
    train_idx, val_idx = _split_indices(len(dataset), cfg.val_fraction, rng)
    if not train_idx:
        train_idx = val_idx
    tensors = {k: ad.Tensor(v.copy(), requires_grad=True)
               for k, v in net.tensors.items()}
    delay_used = delay
    if cfg.train_all:
        delay_tensors = {f"delay_{f}": ad.Tensor(np.asarray(getattr(delay, f)).copy(),
                                                 requires_grad=True)
                         for f in _DELAY_FIELDS}
        tensors.update(delay_tensors)
        delay_used = _DelayShim(**{f: delay_tensors[f"delay_{f}"] for f in _DELAY_FIELDS})
    opt = Adam(tensors, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    best_val, best_epoch, best_weights = np.inf, -1, None
    best_delay = None
    curve = []
    tr = (states[train_idx], controls[train_idx], normals[train_idx])
    va = (states[val_idx], controls[val_idx], normals[val_idx]) if val_idx else tr
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        loss_vec = rollout_loss(net, tensors, *tr, hist, params, delay_used, dt,
                                cfg.c_pi, cfg.delay_state_l2)
        loss = loss_vec.mean()
        train_loss = float(loss.value)
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(epoch, train_loss)
        loss.backward()
        ad.clip_global_norm(list(tensors.values()), cfg.clip_norm)
        opt.step()
        # validation on the updated weights, forward-only numpy pass
        plain = {k: t.value for k, t in tensors.items()}
        delay_plain = (_DelayShim(**{f: plain[f"delay_{f}"] for f in _DELAY_FIELDS})
                       if cfg.train_all else delay)
        val_vec = rollout_loss(net, plain, *va, hist, params, delay_plain, dt,
                               cfg.c_pi, 0.0)
        val_loss = float(np.mean(val_vec))
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, val_loss)
        curve.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_weights = {k: t.value.copy() for k, t in tensors.items()
                            if not k.startswith("delay_")}
            if cfg.train_all:
                best_delay = DelayNetParams(**{
                    f: tensors[f"delay_{f}"].value.copy() for f in _DELAY_FIELDS})
        if progress is not None:
            progress(epoch, train_loss, val_loss)
    trained = replace(net, tensors=best_weights)
    return TrainResult(net=trained, loss_curve=curve, best_epoch=best_epoch,
                       val_indices=val_idx,
                       delay=best_delay if cfg.train_all else None)


def evaluate_nll(dataset: list[TrajectorySample], net: netmod.NetworkParams,
                 params: VehicleParams | None = None,
                 delay: DelayNetParams | None = None,
                 c_pi: float = DEFAULT_C_PI) -> np.ndarray:
    """Per-trajectory summed NLL (forward only)."""
    params = params if params is not None else VehicleParams()
    delay = delay if delay is not None else DelayNetParams()
    states, controls, normals = stack_batch(dataset)
    out = rollout_loss(net, net.tensors, states, controls, normals,
                       dataset[0].history_frames, params, delay,
                       dataset[0].dt, c_pi)
    return np.asarray(out, dtype=np.float64)


@dataclass
class VariantStats:
    """Box-plot summary of per-trajectory summed NLL for one variant."""

    name: str
    n: int
    mean: float
    median: float
    q25: float
    q75: float
    whisker_lo: float
    whisker_hi: float
    values: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_values(cls, name: str, values: np.ndarray) -> "VariantStats":
        values = np.asarray(values, dtype=np.float64)
        q25, q75 = np.quantile(values, 0.25), np.quantile(values, 0.75)
        iqr = q75 - q25
        return cls(
            name=name, n=values.size, mean=float(np.mean(values)),
            median=float(np.median(values)), q25=float(q25), q75=float(q75),
            whisker_lo=float(q25 - 1.5 * iqr), whisker_hi=float(q75 + 1.5 * iqr),
            values=values,
        )


def make_variant(name: str, base: netmod.NetworkParams | None = None,
                 rng: np.random.Generator | None = None) -> netmod.NetworkParams:
    if name not in VARIANTS:
        raise UnknownVariantError(name)
    base = base if base is not None else netmod.NetworkParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    return replace(base, **VARIANTS[name], tensors={}).initialize(rng)


def run_ablation(variant_list, dataset, cfg: OptimizerConfig | None = None,
                 params: VehicleParams | None = None,
                 delay: DelayNetParams | None = None,
                 seeds=(0,), progress=None) -> list[VariantStats]:
    """Train each variant per seed and summarize validation NLL.

    Validation losses are pooled across seeds per variant; statistics follow
    the box-plot convention (quartiles, 1.5 IQR whiskers).
    """
    if not variant_list:
        raise ValueError("variant list must be non-empty")
    cfg = cfg if cfg is not None else OptimizerConfig()
    out = []
    for name in variant_list:
        if name not in VARIANTS:
            raise UnknownVariantError(name)
        pooled = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            net = make_variant(name, rng=np.random.default_rng(seed))
            result = train(dataset, net, run_cfg, params, delay)
            val = [dataset[i] for i in result.val_indices] or dataset
            vals = evaluate_nll(val, result.net, params,
                                result.delay or delay, cfg.c_pi)
            pooled.extend(vals.tolist())
            if progress is not None:
                progress(name, seed, float(np.median(vals)))
        out.append(VariantStats.from_values(name, np.asarray(pooled)))
    return out
