"""Multistep Gaussian negative-log-likelihood trajectory loss.

Per step: 0.5 * e^T P^-1 e + 0.5 * ln|P| on the reduced state (heading error
wrapped to (-pi, pi]) plus an L2-norm regularizer on selected states outside
the covariance (lateral velocity and yaw rate by default, weighted by c_pi).
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad

DEFAULT_C_PI = 0.2
_REG_EPS = 1e-12


class SingularCovarianceError(ArithmeticError):
    """Covariance at some step was not positive definite."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"covariance not positive definite at step {step}")


def nll_step(mean, cov, truth, reg_pred=None, reg_truth=None, c_pi=DEFAULT_C_PI,
             step: int = 0):
    """One timestep of the loss; batched over leading axes, tape-compatible."""
    e_cols = [truth[..., i] - mean[..., i] for i in range(4)]
    e_cols[2] = ad.wrap_angle(e_cols[2])
    e = ad.stack(e_cols, axis=-1)
    try:
        solved = ad.solve_psd(cov, e)
        logdet = ad.logdet_psd(cov)
    except ad.NotPositiveDefiniteError as err:
        raise SingularCovarianceError(step) from err
    quad = 0.5 * ad.sum_(e * solved, axis=-1)
    total = quad + 0.5 * logdet
    if reg_pred is not None:
        diff = (reg_truth - reg_pred) * c_pi
        total = total + ad.sqrt(ad.sum_(diff * diff, axis=-1) + _REG_EPS)
    return total


def nll_sequence(mean_seq, cov_seq, truth_seq, reg_pred_seq=None,
                 reg_truth_seq=None, c_pi=DEFAULT_C_PI):
    """Summed loss over a trajectory; sequences are time-major."""
    if len(mean_seq) != len(truth_seq) or len(mean_seq) != len(cov_seq):
        raise ValueError("prediction and truth sequences must have equal length")
    total = None
    for t in range(len(mean_seq)):
        rp = reg_pred_seq[t] if reg_pred_seq is not None else None
        rt = reg_truth_seq[t] if reg_truth_seq is not None else None
        term = nll_step(mean_seq[t], cov_seq[t], truth_seq[t], rp, rt, c_pi, step=t)
        total = term if total is None else total + term
    return total


def nll_loss(beliefs, truth_reduced, pi_pred=None, pi_truth=None,
             c_pi=DEFAULT_C_PI) -> float:
    """Spec-level loss over Belief objects and ground-truth reduced states."""
    means = [b.reduced_mean() for b in beliefs]
    covs = [b.cov for b in beliefs]
    truths = [np.asarray(x, dtype=np.float64) for x in truth_reduced]
    rp = [np.asarray(x, dtype=np.float64) for x in pi_pred] if pi_pred is not None else None
    rt = [np.asarray(x, dtype=np.float64) for x in pi_truth] if pi_truth is not None else None
    return float(nll_sequence(means, covs, truths, rp, rt, c_pi))
