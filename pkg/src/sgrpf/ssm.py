"""State-space models, proposals, synthetic data and the Kalman oracle.

Density functions accept nodes or plain numbers/arrays for every argument.
With nodes they record on the tape; with plain values they return numpy
values, which is how the filters get numeric proposal densities for free.
"""

import csv
import json
import math
import os

import numpy as np

from . import adcore as ad
from ._io import fmt, write_json
from .rng import DATA, OBS, Streams

LOG2PI = math.log(2.0 * math.pi)


def normal_logpdf(x, mean, var):
    """Gaussian log-density composed from tape primitives."""
    d = x - mean
    if isinstance(var, (int, float)):
        return (-0.5 / var) * (d * d) + (-0.5 * (LOG2PI + math.log(var)))
    return (-0.5 * ad.log(var) + (-0.5 * LOG2PI)) - 0.5 * (d * d) / var


def normal_logpdf_logscale(x, mean, logscale):
    """Gaussian log-density with scale ``exp(logscale)``."""
    z = (x - mean) * ad.exp(-logscale)
    return (-0.5 * LOG2PI) - logscale - 0.5 * (z * z)


def tanh(u):
    """``tanh`` from tape primitives (used by the SV reparameterisation)."""
    e = ad.exp(-2.0 * u)
    return (1.0 - e) / (1.0 + e)


class StateSpaceModel:
    """Univariate-latent model: ``x_0 ~ N(m0, v0)``, Gaussian transition, any emission."""

    name = "base"
    theta_names = ()
    true_theta = ()

    @property
    def dim_theta(self):
        return len(self.theta_names)

    def init_mean_var(self, theta):
        raise NotImplementedError

    def transition_mean_var(self, xp, theta):
        raise NotImplementedError

    def observation_logpdf(self, y, x, theta):
        raise NotImplementedError

    def observation_sample(self, x, eps, theta):
        raise NotImplementedError

    def init_logpdf(self, x0, theta):
        m, v = self.init_mean_var(theta)
        return normal_logpdf(x0, m, v)

    def transition_logpdf(self, x, xp, theta):
        m, v = self.transition_mean_var(xp, theta)
        return normal_logpdf(x, m, v)

    def init_sample(self, eps, theta):
        m, v = self.init_mean_var(theta)
        return m + _sqrt(v) * eps

    def transition_sample(self, eps, xp, theta):
        m, v = self.transition_mean_var(xp, theta)
        return m + _sqrt(v) * eps

    def check_theta(self, theta):
        if len(theta) != self.dim_theta:
            raise ValueError(f"{self.name} expects {self.dim_theta} parameters, got {len(theta)}")


def _sqrt(v):
    if isinstance(v, (int, float)):
        return math.sqrt(v)
    return ad.sqrt(v)


class LGSSM(StateSpaceModel):
    """``x_t = theta1 x_{t-1} + N(0, q)``, ``y_t = theta2 x_t + N(0, r)``, ``x_0 ~ N(0, v0)``."""

    name = "lgssm"
    theta_names = ("theta1", "theta2")
    true_theta = (0.9, 1.0)

    def __init__(self, trans_var=1.0, obs_var=1.0, init_var=1.0):
        for v in (trans_var, obs_var, init_var):
            if not v > 0:
                raise ValueError("variances must be strictly positive")
        self.trans_var = float(trans_var)
        self.obs_var = float(obs_var)
        self.init_var = float(init_var)

    def init_mean_var(self, theta):
        return 0.0, self.init_var

    def transition_mean_var(self, xp, theta):
        return theta[0] * xp, self.trans_var

    def observation_logpdf(self, y, x, theta):
        return normal_logpdf(y, theta[1] * x, self.obs_var)

    def observation_sample(self, x, eps, theta):
        return theta[1] * x + math.sqrt(self.obs_var) * eps


class StochasticVolatility(StateSpaceModel):
    """``x_{t+1} = mu (1 - phi) + phi x_t + sigma eta``, ``y_t ~ N(0, exp(x_t))``.

    ``x_0 ~ N(0, sigma^2 / (1 - phi^2))``.  The emission is written as a
    density; generatively ``y = eps * exp(x / 2)``.
    """

    name = "sv"
    theta_names = ("mu", "phi", "sigma")
    true_theta = (2.0, 0.9, 1.0)

    def _check_phi(self, phi):
        if np.any(np.abs(ad.value_of(phi)) >= 1.0):
            raise ValueError("stochastic volatility needs |phi| < 1")

    def check_theta(self, theta):
        super().check_theta(theta)
        self._check_phi(theta[1])
        if np.any(ad.value_of(theta[2]) == 0.0):
            raise ValueError("stochastic volatility needs sigma != 0")

    def init_mean_var(self, theta):
        _, phi, sigma = theta
        self._check_phi(phi)
        return 0.0, (sigma * sigma) / (1.0 - phi * phi)

    def transition_mean_var(self, xp, theta):
        mu, phi, sigma = theta
        self._check_phi(phi)
        return mu * (1.0 - phi) + phi * xp, sigma * sigma

    def _derived(self, theta):
        """Per-theta terms shared by every particle: level, 1/(2 sigma^2), log-normaliser."""
        mu, phi, sigma = theta
        key = tuple((n.tape, n.idx) if isinstance(n, ad.Node) else None for n in theta)
        memo = getattr(self, "_memo", None)
        if memo is not None and all(k is not None for k in key) and memo[0] == key:
            return memo[1]
        self._check_phi(phi)
        level = mu * (1.0 - phi)
        inv2var = 0.5 / (sigma * sigma)
        lognorm = (-0.5 * LOG2PI) - ad.log(sigma)
        out = (level, phi, inv2var, lognorm)
        if all(k is not None for k in key):
            self._memo = (key, out)
        return out

    def transition_logpdf(self, x, xp, theta):
        level, phi, inv2var, lognorm = self._derived(theta)
        d = x - (level + phi * xp)
        return lognorm - inv2var * (d * d)

    def observation_logpdf(self, y, x, theta):
        return (-0.5 * LOG2PI) - 0.5 * x - 0.5 * (y * y) * ad.exp(-x)

    def observation_sample(self, x, eps, theta):
        return eps * np.exp(0.5 * x)


def stationary_variance(phi, sigma):
    return sigma * sigma / (1.0 - phi * phi)


def sv_unconstrained(theta):
    """(mu, phi, sigma) -> (mu, atanh phi, log sigma)."""
    mu, phi, sigma = theta
    return np.array([mu, np.arctanh(phi), np.log(sigma)], dtype=np.float64)


def sv_constrain(u):
    """Inverse of :func:`sv_unconstrained`; works on nodes or numbers."""
    return [u[0], tanh(u[1]), ad.exp(u[2])]


MODELS = {"lgssm": LGSSM, "sv": StochasticVolatility}


def get_model(name):
    try:
        return MODELS[name]()
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


# ---------------------------------------------------------------------------
# proposals


class BootstrapProposal:
    """``q = p(x_t | x_{t-1})``; particles carry no gradient path."""

    kind = "bootstrap"
    dim_phi = 0

    def sample(self, model, eps, xp, y, theta, phi):
        return model.transition_sample(eps, xp, theta)

    def logpdf(self, model, x, xp, y, theta, phi):
        return model.transition_logpdf(x, xp, theta)


class GaussianProposal:
    """``q(x_t | x_{t-1}, y_t) = N(a x_{t-1} + b y_t, exp(c)^2)`` with ``phi = (a, b, c)``."""

    kind = "learned"
    dim_phi = 3
    default_phi = (0.5, 0.3, 0.0)

    def sample(self, model, eps, xp, y, theta, phi):
        a, b, c = phi
        return a * xp + b * y + ad.exp(c) * eps

    def logpdf(self, model, x, xp, y, theta, phi):
        a, b, c = phi
        return normal_logpdf_logscale(x, a * xp + b * y, c)


# ---------------------------------------------------------------------------
# data


class Dataset:
    """Observations ``y_1..y_T`` plus optional generating metadata."""

    def __init__(self, y, model=None, theta=None, seed=None, x=None):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 1 or y.size == 0:
            raise ValueError("observations must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        self.y = y
        self.model = model
        self.theta = None if theta is None else [float(v) for v in theta]
        self.seed = seed
        self.x = x

    @property
    def t_count(self):
        return self.y.size

    def __len__(self):
        return self.y.size

    def prefix(self, t):
        return Dataset(self.y[:t], self.model, self.theta, self.seed, None if self.x is None else self.x[: t + 1])

    def metadata(self):
        return {"model": self.model, "theta": self.theta, "seed": self.seed, "T": self.t_count}

    def save(self, path):
        """Write ``path`` (CSV ``t,y``) and ``path`` with ``.json`` suffix."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "y"])
            for t, v in enumerate(self.y, start=1):
                w.writerow([t, fmt(v)])
        write_json(sidecar_path(path), self.metadata())

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [c.strip() for c in rows[0]] != ["t", "y"]:
            raise ValueError(f"{path}: expected header 't,y'")
        y = [float(r[1]) for r in rows[1:] if r]
        meta = {}
        side = sidecar_path(path)
        if os.path.exists(side):
            with open(side) as fh:
                meta = json.load(fh)
        return cls(y, meta.get("model"), meta.get("theta"), meta.get("seed"))


def sidecar_path(path):
    root, _ = os.path.splitext(path)
    return root + ".json"


def simulate(model, theta, t_count, seed):
    """Forward-sample ``x_0..x_T`` and ``y_1..y_T``; deterministic in ``seed``."""
    if t_count < 1:
        raise ValueError("T must be >= 1")
    theta = [float(v) for v in theta]
    model.check_theta(theta)
    rng = Streams(seed)
    eta = rng.normal(DATA, 0, t_count + 1)[:, 0]
    eps = rng.normal(OBS, 0, t_count)[:, 0]
    x = np.empty(t_count + 1)
    x[0] = model.init_sample(eta[0], theta)
    for t in range(1, t_count + 1):
        x[t] = model.transition_sample(eta[t], x[t - 1], theta)
    y = np.array([model.observation_sample(x[t], eps[t - 1], theta) for t in range(1, t_count + 1)], dtype=np.float64)
    return Dataset(y, model.name, theta, int(seed), x)


# ---------------------------------------------------------------------------
# exact oracles for the linear-Gaussian model


def kalman_filter(model, y, theta):
    """Filtering means/variances for ``t = 1..T`` and the exact log-likelihood."""
    th1, th2 = (float(v) for v in theta)
    q, r = model.trans_var, model.obs_var
    m, p = 0.0, model.init_var
    means, variances = [], []
    loglik = 0.0
    for yt in np.asarray(y, dtype=np.float64):
        m, p = th1 * m, th1 * th1 * p + q
        s = th2 * th2 * p + r
        assert s > 0 and p > 0
        resid = yt - th2 * m
        loglik += -0.5 * (LOG2PI + math.log(s) + resid * resid / s)
        k = p * th2 / s
        m, p = m + k * resid, (1.0 - k * th2) * p
        means.append(m)
        variances.append(p)
    return np.array(means), np.array(variances), loglik


def kalman_loglik(model, y, theta):
    """Exact ``log p(y_1:T)`` for the LGSSM."""
    return kalman_filter(model, y, theta)[2]


def kalman_evidence(model, y, theta):
    return math.exp(kalman_loglik(model, y, theta))


def kalman_posterior_mean_last(model, y, theta):
    """``E[x_T | y_1:T]`` (filtering and smoothing agree at the last step)."""
    return kalman_filter(model, y, theta)[0][-1]


def lgssm_observation_cov(model, theta, t_count):
    """Dense covariance of ``(y_1..y_T)`` under the LGSSM."""
    th1, th2 = (float(v) for v in theta)
    var = np.empty(t_count + 1)
    var[0] = model.init_var
    for t in range(1, t_count + 1):
        var[t] = th1 * th1 * var[t - 1] + model.trans_var
    cov = np.empty((t_count, t_count))
    for s in range(1, t_count + 1):
        for t in range(1, t_count + 1):
            lo, hi = min(s, t), max(s, t)
            cov[s - 1, t - 1] = th2 * th2 * th1 ** (hi - lo) * var[lo]
    return cov + model.obs_var * np.eye(t_count)


def dense_gaussian_loglik(model, y, theta):
    """``log p(y)`` by direct multivariate-normal evaluation."""
    y = np.asarray(y, dtype=np.float64)
    cov = lgssm_observation_cov(model, theta, y.size)
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return -0.5 * (y.size * LOG2PI + logdet + y @ np.linalg.solve(cov, y))
