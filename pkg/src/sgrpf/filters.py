"""Particle filters sharing one loop: SIS, PF, PF-SF, DPF-SGR, MPF, DPF2.

Weights live in the log domain.  ``logw[i]`` after step ``t`` is the
unnormalised log-weight ``log w_t^i``; ``log W_t`` is its log-sum-exp and
``ell[i] = logw[i] - log W_t`` the normalised log-weight.  The initial
weights are ``-log N`` plus a zero-valued score term for the prior, so
``ell_0`` needs no normalisation and ``log Z = sum_{t>=1} log W_t``.

Each quantity in a step is either a tape node (when it depends on a
parameter) or a plain per-lane array, and is lifted only when it meets a
node.  That keeps parameter-free work off the tape.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import adcore as ad
from . import resampling as rs
from .rng import INIT, MIXTURE, PROPOSAL, RESAMPLE, Streams
from .ssm import BootstrapProposal, Dataset, GaussianProposal

VARIANTS = ("sis", "pf", "pf_sf", "dpf_sgr", "mpf", "dpf2")
PROPOSALS = ("bootstrap", "learned", "reparam")


class FilterError(RuntimeError):
    """Numeric failure inside a filter run (non-finite or all-zero weights)."""

    def __init__(self, message, step=None, particle=None):
        super().__init__(message)
        self.step = step
        self.particle = particle


def canonical_variant(name):
    v = name.strip().lower().replace("-", "_")
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return v


@dataclass
class FilterConfig:
    variant: str = "dpf_sgr"
    n_particles: int = 10
    scheme: str = "systematic"
    ess_threshold: float = 1.0
    seed: int = 0
    proposal: str = "bootstrap"
    lanes: int = 1
    lane0: int = 0
    epoch: int = 0
    soft_alpha: float | None = None
    record: bool = True

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.scheme not in rs.SCHEMES:
            raise ValueError(f"unknown resampling scheme {self.scheme!r}")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in [0, 1]")
        if self.proposal not in PROPOSALS:
            raise ValueError(f"unknown proposal {self.proposal!r}")
        if self.soft_alpha is not None and not 0.0 <= self.soft_alpha <= 1.0:
            raise ValueError("soft_alpha must lie in [0, 1]")
        if self.lanes < 1:
            raise ValueError("lanes must be >= 1")
        if not self.record and not (self.marginal and self.proposal == "bootstrap"):
            raise ValueError("record=False is only available for the bootstrap marginal filter")

    @property
    def marginal(self):
        return self.variant in ("mpf", "dpf2")

    def to_dict(self):
        return asdict(self)


@dataclass
class ParticleSystem:
    """Snapshot of step ``t``: values and (where taped) weight nodes."""

    step: int
    x: np.ndarray
    logw: list
    logw_normalized: list
    ancestors: np.ndarray | None


@dataclass
class FilterRun:
    config: FilterConfig
    model: object
    y: np.ndarray
    tape: ad.Tape
    theta: list
    phi: list
    logZhat: ad.Node
    objective: ad.Node
    logW: list
    logW_values: np.ndarray
    x: np.ndarray
    eps: np.ndarray
    ancestors: np.ndarray
    resampled: np.ndarray
    ell_values: np.ndarray
    ell_nodes: list
    ess_trace: np.ndarray
    dice_terms: list = field(default_factory=list)
    x_nodes: list | None = None
    diagnostics: dict = field(default_factory=dict)
    released: bool = False

    @property
    def n_particles(self):
        return self.config.n_particles

    @property
    def t_count(self):
        return self.y.shape[0]

    @property
    def lanes(self):
        return self.tape.lanes

    @property
    def resample_count(self):
        return self.resampled.sum(axis=0)

    @property
    def logZ_value(self):
        return self.logZhat.value

    @property
    def wbar_final(self):
        """Normalised final weights, shape (N, L)."""
        return np.exp(self.ell_values[-1])

    @property
    def f_hat_suffix(self):
        """``log F_t = sum_{s>t} log W_s`` for ``t = 0..T``."""
        w = self.logW_values
        suffix = np.zeros((w.shape[0] + 1, w.shape[1]))
        suffix[:-1] = np.cumsum(w[::-1], axis=0)[::-1]
        return suffix

    def particles(self, t):
        anc = None if t == 0 else self.ancestors[t - 1]
        return ParticleSystem(t, self.x[t], None, self.ell_nodes[t], anc)

    def lineage_indices(self):
        """``idx[t, i, l]``: index at step t on the lineage of final particle i."""
        t_count, n, lanes = self.ancestors.shape
        idx = np.empty((t_count + 1, n, lanes), dtype=np.int64)
        idx[-1] = np.arange(n)[:, None]
        for t in range(t_count, 0, -1):
            idx[t - 1] = np.take_along_axis(self.ancestors[t - 1], idx[t], axis=0)
        return idx

    def lineages(self):
        """Particle values along every final lineage, shape (T+1, N, L)."""
        return np.take_along_axis(self.x, self.lineage_indices(), axis=1)

    def theta_leaves(self):
        return [n for n in self.theta if isinstance(n, ad.Node) and n.idx in self.tape.inputs]

    def phi_leaves(self):
        return [n for n in self.phi if isinstance(n, ad.Node) and n.idx in self.tape.inputs]

    def release(self):
        self.tape = None
        self.released = True

    def summary(self):
        return {
            "variant": self.config.variant,
            "logZhat": self.logZ_value.tolist(),
            "logW": self.logW_values.T.tolist(),
            "ess": self.ess_trace.T.tolist(),
            "resample_count": self.resample_count.tolist(),
        }


def _observations(data, lanes):
    y = data.y if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if y.ndim == 1:
        return y
    if y.shape[1] != lanes:
        raise ValueError("per-lane observations must have shape (T, lanes)")
    return y


def _leaves(tape, values, lanes):
    out = []
    for v in values:
        if isinstance(v, ad.Node):
            if v.tape is not tape:
                raise ValueError("parameter nodes must live on the run's tape")
            out.append(v)
        else:
            out.append(tape.input(np.broadcast_to(np.asarray(v, dtype=np.float64), (lanes,))))
    return out


def _tape_for(tape, theta, phi, lanes):
    if tape is None:
        owners = [v.tape for v in list(theta) + list(phi or []) if isinstance(v, ad.Node)]
        tape = owners[0] if owners else ad.Tape(lanes)
    if tape.lanes != lanes:
        raise ValueError("tape lane count does not match the configuration")
    return tape


def _values(items, lanes):
    return np.stack([np.broadcast_to(np.asarray(ad.value_of(v), dtype=np.float64), (lanes,)) for v in items])


def _normalise(tape, logw, lanes, step):
    vals = _values(logw, lanes)
    bad = np.isnan(vals) | np.isposinf(vals)
    if bad.any():
        i = int(np.argwhere(bad)[0][0])
        raise FilterError(f"non-finite log-weight at step {step}, particle {i}", step, i)
    if np.all(np.isneginf(vals), axis=0).any():
        raise FilterError(f"all weights are zero at step {step}", step)
    logW = ad.logsumexp(logw)
    ell = [w - logW for w in logw]
    return logW, ell


def _normalise_values(logw, step):
    """Numeric counterpart of ``_normalise`` for (N, L) log-weights."""
    bad = np.isnan(logw) | np.isposinf(logw)
    if bad.any():
        i = int(np.argwhere(bad)[0][0])
        raise FilterError(f"non-finite log-weight at step {step}, particle {i}", step, i)
    if np.all(np.isneginf(logw), axis=0).any():
        raise FilterError(f"all weights are zero at step {step}", step)
    logW = _np_logsumexp(logw, axis=0)
    return logW, logw - logW


def run_filter(model, data, theta, cfg, phi=None, tape=None):
    """Run the configured filter; returns a :class:`FilterRun` with a live tape."""
    if cfg.marginal:
        return run_mpf(model, data, theta, cfg, phi, tape)
    lanes = cfg.lanes
    y = _observations(data, lanes)
    t_count = y.shape[0]
    model.check_theta(theta)
    tape = _tape_for(tape, theta, phi, lanes)
    theta = _leaves(tape, theta, lanes)
    theta_v = [t.value for t in theta]
    proposal, phi = _proposal(cfg, tape, phi, lanes)
    n = cfg.n_particles
    log_n = math.log(n)
    rng = Streams(cfg.seed, lanes, cfg.lane0, cfg.epoch)
    diag = rs.ResampleDiagnostics()
    variant = cfg.variant

    xs = np.empty((t_count + 1, n, lanes))
    eps_all = np.empty((t_count + 1, n, lanes))
    anc_all = np.empty((t_count, n, lanes), dtype=np.int64)
    res_all = np.zeros((t_count, lanes), dtype=bool)
    ell_vals = np.empty((t_count + 1, n, lanes))
    ess = np.empty((t_count + 1, lanes))
    ell_nodes = []
    logW_nodes = []
    dice_terms = []
    pathwise = cfg.proposal == "reparam"

    eps = rng.normal(INIT, 0, n)
    eps_all[0] = eps
    if pathwise:
        x = [model.init_sample(eps[i], theta) for i in range(n)]
        ell = [-log_n] * n
    else:
        x = [model.init_sample(eps[i], theta_v) for i in range(n)]
        ell = []
        for i in range(n):
            lp0 = model.init_logpdf(x[i], theta)
            ell.append((lp0 - ad.stop_gradient(lp0)) + (-log_n) if isinstance(lp0, ad.Node) else -log_n)
    xs[0] = _values(x, lanes)
    ell_vals[0] = _values(ell, lanes)
    ell_nodes.append(ell)
    ess[0] = rs.effective_sample_size(np.exp(ell_vals[0]))
    identity = np.broadcast_to(np.arange(n)[:, None], (n, lanes))

    for t in range(1, t_count + 1):
        yt = y[t - 1]
        if variant == "sis" or cfg.ess_threshold == 0.0:
            mask = np.zeros(lanes, dtype=bool)
        elif cfg.ess_threshold >= 1.0:
            mask = np.ones(lanes, dtype=bool)
        else:
            mask = ess[t - 1] < cfg.ess_threshold * n
        if mask.any():
            probs = rs.normalized_probs(ell_vals[t - 1])
            if cfg.soft_alpha is not None:
                probs = rs.soft_alpha_probs(probs, cfg.soft_alpha)
            u = rng.uniform(RESAMPLE, t, n)
            a = rs.draw_ancestors(cfg.scheme, probs, u, diag)
            a = np.where(mask[None, :], a, identity)
            if cfg.soft_alpha is not None:
                logr_a = np.log(np.take_along_axis(probs, a, axis=0))
        else:
            a = identity
        anc_all[t - 1] = a
        res_all[t - 1] = mask

        # weights after resampling
        if mask.any():
            if variant in ("dpf_sgr", "pf_sf"):
                diffs = [(w - ad.stop_gradient(w)) if isinstance(w, ad.Node) else 0.0 for w in ell]
            tilde = []
            for i in range(n):
                if cfg.soft_alpha is not None:
                    # weighted resampling: carry wbar[a] / r[a], with r treated as a constant
                    base = ad.select(ell, a[i]) - (logr_a[i] + log_n)
                elif variant == "dpf_sgr":
                    base = ad.select(diffs, a[i]) + (-log_n)
                else:
                    base = -log_n
                    if variant == "pf_sf":
                        d = ad.select(diffs, a[i])
                        dice_terms.append(d if mask.all() else ad.where(mask, d, 0.0))
                tilde.append(base if mask.all() else ad.where(mask, base, ad.select(ell, a[i])))
        else:
            tilde = ell

        # propagate
        eps = rng.normal(PROPOSAL, t, n)
        eps_all[t] = eps
        if proposal.kind == "bootstrap" and not pathwise:
            xp = np.take_along_axis(xs[t - 1], a, axis=0)
            x_new = model.transition_sample(eps, xp, theta_v)
            logw = []
            for i in range(n):
                lp = model.transition_logpdf(x_new[i], xp[i], theta)
                inc = lp - ad.stop_gradient(lp) if isinstance(lp, ad.Node) else 0.0
                logw.append(tilde[i] + (inc + model.observation_logpdf(yt, x_new[i], theta)))
            x = list(x_new)
        else:
            xp = [ad.select(x, a[i]) for i in range(n)]
            if pathwise:
                x = [model.transition_sample(eps[i], xp[i], theta) for i in range(n)]
                logw = [tilde[i] + model.observation_logpdf(yt, x[i], theta) for i in range(n)]
            else:
                x = [proposal.sample(model, eps[i], xp[i], yt, theta, phi) for i in range(n)]
                logw = [
                    tilde[i]
                    + (
                        (model.transition_logpdf(x[i], xp[i], theta) + model.observation_logpdf(yt, x[i], theta))
                        - proposal.logpdf(model, x[i], xp[i], yt, theta, phi)
                    )
                    for i in range(n)
                ]
        xs[t] = _values(x, lanes)
        logW, ell = _normalise(tape, logw, lanes, t)
        logW_nodes.append(logW)
        ell_nodes.append(ell)
        ell_vals[t] = _values(ell, lanes)
        ess[t] = rs.effective_sample_size(np.exp(ell_vals[t]))

    logZ = _lift(tape, ad.vsum(logW_nodes))
    objective = logZ
    if variant == "pf_sf" and dice_terms:
        s = ad.vsum(dice_terms)
        if isinstance(s, ad.Node):
            objective = logZ + ad.stop_gradient(logZ) * s
    return FilterRun(
        config=cfg,
        model=model,
        y=y,
        tape=tape,
        theta=theta,
        phi=phi,
        logZhat=logZ,
        objective=objective,
        logW=logW_nodes,
        logW_values=_values(logW_nodes, lanes),
        x=xs,
        eps=eps_all,
        ancestors=anc_all,
        resampled=res_all,
        ell_values=ell_vals,
        ell_nodes=ell_nodes,
        ess_trace=ess,
        dice_terms=dice_terms,
        x_nodes=x if not all(isinstance(v, np.ndarray) for v in x) else None,
        diagnostics=diag.as_dict(),
    )


def _lift(tape, v):
    return v if isinstance(v, ad.Node) else tape.const(v)


def _proposal(cfg, tape, phi, lanes):
    if cfg.proposal == "learned":
        prop = GaussianProposal()
        phi = _leaves(tape, prop.default_phi if phi is None else phi, lanes)
        if len(phi) != prop.dim_phi:
            raise ValueError("learned proposal needs phi = (a, b, c)")
        return prop, phi
    return BootstrapProposal(), []


def run_mpf(model, data, theta, cfg, phi=None, tape=None):
    """Marginal particle filter.

    Every particle picks a mixture component from the detached normalised
    weights and samples from the proposal attached to it; its weight is the
    ratio of the weighted transition mixture to the proposal mixture.  For
    DPF2 the previous normalised weights stay live in the numerator; for
    MPF they are detached everywhere.

    With ``cfg.record`` false nothing per particle is taped: weights are
    computed in numpy and ``logZhat`` is a constant node.  The run then
    serves value-only consumers such as the alpha-recursion oracle, at a
    fraction of the O(N^2) tape cost.
    """
    if not cfg.marginal:
        raise ValueError("run_mpf needs variant mpf or dpf2")
    if cfg.proposal == "reparam":
        raise ValueError("the marginal filter supports bootstrap and learned proposals")
    lanes = cfg.lanes
    y = _observations(data, lanes)
    t_count = y.shape[0]
    model.check_theta(theta)
    tape = _tape_for(tape, theta, phi, lanes)
    theta = _leaves(tape, theta, lanes)
    theta_v = [t.value for t in theta]
    proposal, phi = _proposal(cfg, tape, phi, lanes)
    n = cfg.n_particles
    log_n = math.log(n)
    rng = Streams(cfg.seed, lanes, cfg.lane0, cfg.epoch)
    diag = rs.ResampleDiagnostics()
    live = cfg.variant == "dpf2"

    xs = np.empty((t_count + 1, n, lanes))
    eps_all = np.empty((t_count + 1, n, lanes))
    comp_all = np.empty((t_count, n, lanes), dtype=np.int64)
    ell_vals = np.empty((t_count + 1, n, lanes))
    ess = np.empty((t_count + 1, lanes))
    ell_nodes, logW_nodes = [], []

    eps = rng.normal(INIT, 0, n)
    eps_all[0] = eps
    x = [model.init_sample(eps[i], theta_v) for i in range(n)]
    ell = []
    for i in range(n):
        lp0 = model.init_logpdf(x[i], theta)
        ell.append((lp0 - ad.stop_gradient(lp0)) + (-log_n) if isinstance(lp0, ad.Node) else -log_n)
    xs[0] = _values(x, lanes)
    ell_vals[0] = _values(ell, lanes)
    ell_nodes.append(ell)
    ess[0] = rs.effective_sample_size(np.exp(ell_vals[0]))

    for t in range(1, t_count + 1):
        yt = y[t - 1]
        prev_v = ell_vals[t - 1]
        probs = rs.normalized_probs(prev_v)
        u = rng.uniform(MIXTURE, t, n)
        comp = rs.draw_ancestors(cfg.scheme, probs, u, diag)
        comp_all[t - 1] = comp
        eps = rng.normal(PROPOSAL, t, n)
        eps_all[t] = eps
        if not cfg.record:
            xp_sel = np.take_along_axis(xs[t - 1], comp, axis=0)
            xv = model.transition_sample(eps, xp_sel, theta_v)
            # bootstrap: the transition and proposal mixtures coincide in value
            logw = model.observation_logpdf(yt, xv, theta_v) - log_n
            xs[t] = xv
            logW_v, ell_v = _normalise_values(logw, t)
            logW_nodes.append(logW_v)
            ell_vals[t] = ell_v
            ess[t] = rs.effective_sample_size(np.exp(ell_v))
            continue
        weights_num = ell if live else [ad.value_of(w) for w in ell]
        if proposal.kind == "bootstrap":
            xp_sel = np.take_along_axis(xs[t - 1], comp, axis=0)
            x = list(model.transition_sample(eps, xp_sel, theta_v))
            xv = np.stack(x)
            prev_states = xs[t - 1]
            # proposal mixture with detached weights: numeric throughout
            lq = model.transition_logpdf(xv[:, None, :], xs[t - 1][None, :, :], theta_v)
            den = _np_logsumexp(prev_v[None, :, :] + lq, axis=1)
        else:
            xp_sel = [ad.select(x, comp[i]) for i in range(n)]
            prev_states = x
            x = [proposal.sample(model, eps[i], xp_sel[i], yt, theta, phi) for i in range(n)]
            xv = _values(x, lanes)
        logw = []
        for k in range(n):
            num = ad.logsumexp([weights_num[i] + model.transition_logpdf(x[k], prev_states[i], theta) for i in range(n)])
            if proposal.kind == "bootstrap":
                d = den[k]
            else:
                d = ad.logsumexp([prev_v[i] + proposal.logpdf(model, x[k], prev_states[i], yt, theta, phi) for i in range(n)])
            logw.append((num - d) + (model.observation_logpdf(yt, x[k], theta) + (-log_n)))
        xs[t] = xv
        logW, ell = _normalise(tape, logw, lanes, t)
        logW_nodes.append(logW)
        ell_nodes.append(ell)
        ell_vals[t] = _values(ell, lanes)
        ess[t] = rs.effective_sample_size(np.exp(ell_vals[t]))

    logZ = _lift(tape, ad.vsum(logW_nodes))
    return FilterRun(
        config=cfg,
        model=model,
        y=y,
        tape=tape,
        theta=theta,
        phi=phi,
        logZhat=logZ,
        objective=logZ,
        logW=logW_nodes,
        logW_values=_values(logW_nodes, lanes),
        x=xs,
        eps=eps_all,
        ancestors=comp_all,
        resampled=np.ones((t_count, lanes), dtype=bool),
        ell_values=ell_vals,
        ell_nodes=ell_nodes,
        ess_trace=ess,
        x_nodes=None if proposal.kind == "bootstrap" else x,
        diagnostics=diag.as_dict(),
    )


def _np_logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def logzhat_gradient(run, wrt="theta", leaves=None):
    """Gradient of the run's objective (``log Z`` or its surrogate), shape (d, L)."""
    if run.released or run.tape is None:
        raise RuntimeError("the run's tape has been released")
    if leaves is None:
        leaves = run.theta_leaves() if wrt == "theta" else run.phi_leaves()
    return ad.grad_values(run.objective, leaves)


def zhat_gradient(run, leaves=None):
    """``grad Z = Z * grad log Z`` for the plain log-likelihood objective."""
    g = logzhat_gradient(run, leaves=leaves)
    return g * np.exp(run.logZ_value)[None, :]
