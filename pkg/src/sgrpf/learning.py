"""Gradient-ascent parameter learning with pluggable gradient estimators.

Lanes of a run are independent training replicates: each lane has its own
parameters, optimizer moments and filter randomness, and the whole batch
advances one epoch per filter pass.  Parameters are optimized in
unconstrained coordinates (identity for the LGSSM; ``(mu, atanh phi, log
sigma)`` for stochastic volatility) and the transform is recorded on the
tape, so gradients flow through it.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import adcore as ad
from . import estimators
from ._io import fmt
from .filters import FilterConfig, run_filter
from .ssm import GaussianProposal, StochasticVolatility, sv_constrain, sv_unconstrained

log = logging.getLogger(__name__)

ESTIMATORS = ("ad", "fisher")


class TrainingDiverged(RuntimeError):
    """Raised when parameters blow up or a gradient is non-finite; carries the partial trace."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")

    def ascend(self, params, grad):
        """One ascent step on ``params`` (d, L) along ``grad``."""
        self.step_count += 1
        if self.kind == "sgd":
            return params + self.learning_rate * grad
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step_count)
        v_hat = self.v / (1.0 - self.beta2**self.step_count)
        return params + self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class Parameterization:
    """Maps unconstrained coordinates to model parameters."""

    def __init__(self, model):
        self.sv = isinstance(model, StochasticVolatility)

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return sv_unconstrained(theta) if self.sv else theta.copy()

    def constrain(self, u):
        if self.sv:
            return sv_constrain(u)
        return list(u)

    def jacobian_diag(self, u):
        """``d theta_k / d u_k`` (the transforms are coordinate-wise)."""
        if self.sv:
            return np.stack([np.ones_like(u[0]), 1.0 - np.tanh(u[1]) ** 2, np.exp(u[2])])
        return np.ones_like(u)


@dataclass
class TrainTrace:
    theta_names: tuple
    theta: list = field(default_factory=list)
    train_logz: list = field(default_factory=list)
    test_logz: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    l1_error: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    final_theta: np.ndarray | None = None
    final_phi: np.ndarray | None = None

    @property
    def epochs(self):
        return len(self.theta)

    def rows(self, lane=0):
        for e in range(self.epochs):
            yield [e + 1, *self.theta[e][:, lane], self.train_logz[e][lane], self.test_logz[e][lane], self.grad_norm[e][lane], self.l1_error[e][lane], self.seconds[e]]

    def header(self):
        return ["epoch", *self.theta_names, "train_logz", "test_logz", "grad_norm", "l1_error", "seconds"]

    def write_csv(self, path, lane=0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for row in self.rows(lane):
                w.writerow([row[0]] + [fmt(float(v)) for v in row[1:]])

    def as_arrays(self):
        return {
            "theta": np.array(self.theta),
            "train_logz": np.array(self.train_logz),
            "test_logz": np.array(self.test_logz),
            "grad_norm": np.array(self.grad_norm),
            "l1_error": np.array(self.l1_error),
        }


def _lane_values(theta0, lanes):
    theta0 = np.asarray(theta0, dtype=np.float64)
    if theta0.ndim == 1:
        theta0 = np.repeat(theta0[:, None], lanes, axis=1)
    if theta0.shape[1] != lanes:
        raise ValueError("theta0 must have shape (d,) or (d, lanes)")
    return theta0


def test_loglik(model, test_data, theta, cfg, replicates=1, phi=None):
    """Held-out ``log Z_hat`` per lane, averaged over ``replicates`` filter runs.

    ``theta`` (and ``phi``) are (d, L); all ``L * replicates`` runs share one
    batched filter pass.  Observations may be shared (T,) or per lane (T, L).
    """
    lanes = theta.shape[1]
    if test_data is None:
        return np.full(lanes, np.nan)
    theta_rep = [np.tile(row, replicates) for row in theta]
    phi_rep = None if phi is None else [np.tile(row, replicates) for row in phi]
    y = test_data.y if hasattr(test_data, "y") else np.asarray(test_data, dtype=np.float64)
    if y.ndim == 2:
        y = np.tile(y, (1, replicates))
    ecfg = replace(cfg, variant="pf", lanes=lanes * replicates, lane0=0, epoch=0)
    run = run_filter(model, y, theta_rep, ecfg, phi=phi_rep)
    return run.logZ_value.reshape(replicates, lanes).mean(axis=0)


def train(
    model,
    data,
    cfg,
    opt,
    epochs,
    theta0,
    test_data=None,
    estimator="ad",
    true_theta=None,
    fixed_noise=False,
    callback=None,
    phi0=None,
    test_replicates=1,
    test_every=1,
):
    """Run ``epochs`` filter passes, ascending the chosen gradient of ``log Z``.

    ``estimator="ad"`` differentiates the filter's objective; ``"fisher"``
    uses the lineage-score oracle (DPF-SGR runs only).  With the learned
    proposal its parameters ``phi`` are trained jointly and recorded after
    ``theta`` in the trace.  The held-out ``log Z_hat`` is computed every
    ``test_every`` epochs and at the last one (NaN otherwise).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    lanes = cfg.lanes
    param = Parameterization(model)
    d = model.dim_theta
    theta = _lane_values(theta0, lanes)
    u = np.stack([param.to_unconstrained(theta[:, l]) for l in range(lanes)], axis=1)
    learn_phi = cfg.proposal == "learned"
    names = tuple(model.theta_names)
    if learn_phi:
        phi = _lane_values(GaussianProposal.default_phi if phi0 is None else phi0, lanes)
        u = np.concatenate([u, phi])
        names += ("phi_a", "phi_b", "phi_c")
    true_theta = np.asarray(model.true_theta if true_theta is None else true_theta, dtype=np.float64)
    trace = TrainTrace(names)
    start = time.perf_counter()
    for epoch in range(epochs):
        tape = ad.Tape(lanes)
        leaves = [tape.input(u[k]) for k in range(u.shape[0])]
        theta_nodes = param.constrain(leaves[:d])
        phi_nodes = leaves[d:] if learn_phi else None
        ecfg = replace(cfg, epoch=0 if fixed_noise else epoch)
        run = run_filter(model, data, theta_nodes, ecfg, phi=phi_nodes, tape=tape)
        theta_now = np.stack([np.broadcast_to(ad.value_of(t), (lanes,)) for t in theta_nodes])
        phi_now = u[d:].copy() if learn_phi else None
        if estimator == "ad":
            grad = ad.grad_values(run.objective, leaves)
        else:
            grad = estimators.fisher_score(run).value * param.jacobian_diag(u[:d])
            if learn_phi:
                grad = np.concatenate([grad, estimators.fisher_score(run, "phi").value])
        gnorm = np.sqrt(np.sum(grad * grad, axis=0))
        trace.theta.append(theta_now if not learn_phi else np.concatenate([theta_now, phi_now]))
        trace.train_logz.append(run.logZ_value.copy())
        if test_data is not None and ((epoch + 1) % test_every == 0 or epoch == epochs - 1):
            trace.test_logz.append(test_loglik(model, test_data, theta_now, cfg, test_replicates, phi_now))
        else:
            trace.test_logz.append(np.full(lanes, np.nan))
        trace.grad_norm.append(gnorm)
        trace.l1_error.append(np.sum(np.abs(theta_now - true_theta[:, None]), axis=0))
        trace.seconds.append(time.perf_counter() - start)
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite gradient at epoch {epoch + 1}", trace)
        u = opt.ascend(u, grad)
        final = np.stack([np.broadcast_to(ad.value_of(t), (lanes,)) for t in param.constrain(list(u[:d]))])
        trace.final_theta = final
        trace.final_phi = u[d:].copy() if learn_phi else None
        if not np.all(np.isfinite(u)) or np.any(np.abs(final) > 1e6):
            raise TrainingDiverged(f"parameters diverged at epoch {epoch + 1}", trace)
        if callback is not None:
            callback(epoch, trace)
        log.debug("epoch %d logZ %s", epoch + 1, run.logZ_value)
    return trace


def evaluate(model, data, theta, cfg, replicates):
    """Mean and standard error of ``log Z_hat`` over ``replicates`` filter runs."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    run = run_filter(model, data, list(np.asarray(theta, dtype=np.float64)), replace(cfg, lanes=replicates))
    vals = run.logZ_value
    se = float(np.std(vals, ddof=1) / math.sqrt(replicates)) if replicates > 1 else 0.0
    return float(vals.mean()), se
