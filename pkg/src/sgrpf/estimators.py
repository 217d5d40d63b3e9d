"""Hand-written gradient and Hessian estimators used as oracles.

None of these read the filter's tape.  They take the stored particle values,
noises and ancestor indices from a :class:`FilterRun`, rebuild the needed
densities on fresh tapes (one lane per lineage, per particle, or per
particle pair), and combine the pieces with numpy.  Agreement with
automatic differentiation of the filter therefore checks the filter's tape
plumbing rather than re-using it.

Arrays follow the run's layout: particles on axis ``-2``, lanes last.
Gradients have shape ``(d, L)`` and Hessians ``(d, d, L)``.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import adcore as ad
from .filters import FilterRun
from .ssm import GaussianProposal

__all__ = [
    "EstimatorReport",
    "fisher_score",
    "lineage_scores",
    "alpha_recursion_score",
    "louis_hessian",
    "posterior_expectation",
    "explicit_backward_gradient",
    "iwae_gradient",
]


@dataclass
class EstimatorReport:
    name: str
    value: np.ndarray
    provenance: str
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise ValueError(f"estimator {self.name!r} produced non-finite entries")
        if self.provenance not in ("ad_path", "oracle_formula"):
            raise ValueError("provenance must be 'ad_path' or 'oracle_formula'")

    def to_dict(self):
        return {"name": self.name, "seed": self.seed, "value": self.value.tolist(), "provenance": self.provenance}

    def to_json(self):
        return json.dumps(self.to_dict())


def _theta_values(run):
    return [np.asarray(t.value, dtype=np.float64) for t in run.theta]


def _phi_values(run):
    return [np.asarray(p.value, dtype=np.float64) for p in run.phi]


def _tile(v, reps):
    """Per-lane values (L,) -> flattened (reps * L,) with lane fastest."""
    return np.tile(np.broadcast_to(v, v.shape), reps)


def _y_at(run, t, reps):
    yt = run.y[t - 1]
    return yt if np.ndim(yt) == 0 else _tile(yt, reps)


def _flat(a):
    return np.ascontiguousarray(a).reshape(-1)


def _as_node(tape, v):
    return v if isinstance(v, ad.Node) else tape.const(v)


# ---------------------------------------------------------------------------
# lineage scores


def _lineage_logweight(run, tape, theta, phi, idx, reps):
    """Log of the product of weights along each lineage, on ``tape``.

    ``idx`` is (T+1, M) flattened lineage indices; lanes are ``reps`` copies
    of the run's lanes (lineage-major).
    """
    model = run.model
    cfg = run.config
    lanes = run.lanes
    lane_of = np.tile(np.arange(lanes), reps)
    pick = lambda arr, t: arr[t][idx[t], lane_of]  # noqa: E731
    total = 0.0
    if cfg.proposal == "reparam":
        x = model.init_sample(pick(run.eps, 0), theta)
    else:
        x = pick(run.x, 0)
        total = model.init_logpdf(x, theta)
    proposal = GaussianProposal() if cfg.proposal == "learned" else None
    for t in range(1, run.t_count + 1):
        yt = _y_at(run, t, reps)
        eps = pick(run.eps, t)
        if cfg.proposal == "reparam":
            xn = model.transition_sample(eps, x, theta)
            total = total + model.observation_logpdf(yt, xn, theta)
        elif cfg.proposal == "learned":
            xn = proposal.sample(model, eps, x, yt, theta, phi)
            total = total + (
                (model.transition_logpdf(xn, x, theta) + model.observation_logpdf(yt, xn, theta))
                - proposal.logpdf(model, xn, x, yt, theta, phi)
            )
        else:
            xn = pick(run.x, t)
            total = total + (model.transition_logpdf(xn, x, theta) + model.observation_logpdf(yt, xn, theta))
        x = xn
    return total


def lineage_scores(run, wrt="theta", hessian=False):
    """Per-lineage gradient (d, N, L) (and Hessian (d, d, N, L)) of the lineage log-weight."""
    n, lanes = run.n_particles, run.lanes
    m = n * lanes
    tape = ad.Tape(m)
    theta = [tape.input(_tile(v, n)) for v in _theta_values(run)]
    phi = [tape.input(_tile(v, n)) for v in _phi_values(run)]
    idx = run.lineage_indices().reshape(run.t_count + 1, m)
    total = _lineage_logweight(run, tape, theta, phi, idx, n)
    leaves = theta if wrt == "theta" else phi
    d = len(leaves)
    if not isinstance(total, ad.Node) or d == 0:
        g = np.zeros((d, n, lanes))
        return (g, np.zeros((d, d, n, lanes))) if hessian else g
    if hessian:
        h = ad.hessian_values(total, leaves).reshape(d, d, n, lanes)
        g = ad.grad_values(total, leaves).reshape(d, n, lanes)
        return g, h
    return ad.grad_values(total, leaves).reshape(d, n, lanes)


def fisher_score(run, wrt="theta"):
    """``sum_i wbar_T^i grad log p(lineage_i, y)`` (weights p/q along the lineage for phi)."""
    s = lineage_scores(run, wrt)
    return EstimatorReport("fisher_score", np.einsum("dnl,nl->dl", s, run.wbar_final), "oracle_formula", run.config.seed)


def louis_hessian(run):
    """``sum w (H_i + s_i s_i^T) - (sum w s_i)(sum w s_i)^T`` over lineages."""
    s, h = lineage_scores(run, "theta", hessian=True)
    w = run.wbar_final
    mean_s = np.einsum("dnl,nl->dl", s, w)
    second = np.einsum("denl,nl->del", h, w) + np.einsum("dnl,enl,nl->del", s, s, w)
    value = second - np.einsum("dl,el->del", mean_s, mean_s)
    return EstimatorReport("louis_hessian", value, "oracle_formula", run.config.seed)


# ---------------------------------------------------------------------------
# marginal particle filter


def _pair_terms(run, t):
    """Values and theta-gradients of log f(x_t^n | x_{t-1}^i) and log g(y_t | x_t^n).

    Returns ``logf (N, N, L)``, ``dlogf (d, N, N, L)``, ``logg (N, L)``,
    ``dlogg (d, N, L)``; pair axes are (n, i).
    """
    model = run.model
    n, lanes = run.n_particles, run.lanes
    m = n * n * lanes
    tape = ad.Tape(m)
    theta = [tape.input(np.tile(v, n * n)) for v in _theta_values(run)]
    xn = _flat(np.broadcast_to(run.x[t][:, None, :], (n, n, lanes)))
    xi = _flat(np.broadcast_to(run.x[t - 1][None, :, :], (n, n, lanes)))
    logf = _as_node(tape, model.transition_logpdf(xn, xi, theta))
    d = len(theta)
    df = ad.grad_values(logf, theta).reshape(d, n, n, lanes)

    tape_g = ad.Tape(n * lanes)
    theta_g = [tape_g.input(np.tile(v, n)) for v in _theta_values(run)]
    logg = _as_node(tape_g, model.observation_logpdf(_y_at(run, t, n), _flat(run.x[t]), theta_g))
    dg = ad.grad_values(logg, theta_g).reshape(d, n, lanes)
    return logf.value.reshape(n, n, lanes), df, logg.value.reshape(n, lanes), dg


def _prior_scores(run):
    n, lanes = run.n_particles, run.lanes
    tape = ad.Tape(n * lanes)
    theta = [tape.input(_tile(v, n)) for v in _theta_values(run)]
    lp0 = run.model.init_logpdf(_flat(run.x[0]), theta)
    if not isinstance(lp0, ad.Node):
        return np.zeros((len(theta), n, lanes))
    return ad.grad_values(lp0, theta).reshape(len(theta), n, lanes)


def _softmax(logits, axis):
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def alpha_recursion_score(run, form="joint"):
    """Mixture-averaged running scores, ``sum_n wbar_T^n alpha_T^n``.

    ``form="joint"`` weights with ``p(x_t^n, y_t | x_{t-1}^i)``;
    ``form="transition"`` weights with the transition alone and adds the
    emission score afterwards.  The two agree algebraically.
    """
    if not run.config.marginal:
        raise ValueError("alpha recursion needs a run from the marginal particle filter")
    if run.config.proposal != "bootstrap":
        raise ValueError("alpha recursion oracle is implemented for the bootstrap proposal")
    alpha = _prior_scores(run)
    for t in range(1, run.t_count + 1):
        logf, df, logg, dg = _pair_terms(run, t)
        prev = run.ell_values[t - 1]
        if form == "joint":
            rho = _softmax(prev[None, :, :] + logf + logg[:, None, :], axis=1)
            inner = alpha[:, None, :, :] + df + dg[:, :, None, :]
            alpha = np.einsum("nil,dnil->dnl", rho, inner)
        elif form == "transition":
            rho = _softmax(prev[None, :, :] + logf, axis=1)
            alpha = np.einsum("nil,dnil->dnl", rho, alpha[:, None, :, :] + df) + dg
        else:
            raise ValueError("form must be 'joint' or 'transition'")
    value = np.einsum("dnl,nl->dl", alpha, run.wbar_final)
    return EstimatorReport(f"alpha_recursion_{form}", value, "oracle_formula", run.config.seed)


# ---------------------------------------------------------------------------
# posterior expectations


def f_last_state(states, theta):
    """``f(x_{0:T}) = x_T``."""
    return states[-1]


def _f_per_lineage(run, f):
    """Values (N, L) and theta-gradients (d, N, L) of ``f`` on each lineage."""
    n, lanes = run.n_particles, run.lanes
    tape = ad.Tape(n * lanes)
    theta = [tape.input(_tile(v, n)) for v in _theta_values(run)]
    lin = run.lineages()
    states = [_flat(lin[t]) for t in range(run.t_count + 1)]
    val = f(states, theta)
    d = len(theta)
    if not isinstance(val, ad.Node):
        val = np.broadcast_to(np.asarray(val, dtype=np.float64), (n * lanes,))
        if not np.all(np.isfinite(val)):
            raise ValueError("f returned non-finite values")
        return val.reshape(n, lanes), np.zeros((d, n, lanes))
    if not np.all(np.isfinite(val.value)):
        raise ValueError("f returned non-finite values")
    return val.value.reshape(n, lanes), ad.grad_values(val, theta).reshape(d, n, lanes)


def _increment_scores(run, t):
    """theta-gradients (d, N, L) of the incremental log-weight at step t (bootstrap)."""
    model = run.model
    n, lanes = run.n_particles, run.lanes
    tape = ad.Tape(n * lanes)
    theta = [tape.input(_tile(v, n)) for v in _theta_values(run)]
    xp = np.take_along_axis(run.x[t - 1], run.ancestors[t - 1], axis=0)
    inc = model.transition_logpdf(_flat(run.x[t]), _flat(xp), theta) + model.observation_logpdf(
        _y_at(run, t, n), _flat(run.x[t]), theta
    )
    d = len(theta)
    if not isinstance(inc, ad.Node):
        return np.zeros((d, n, lanes))
    return ad.grad_values(inc, theta).reshape(d, n, lanes)


def posterior_expectation(run, f=f_last_state):
    """``fbar = sum wbar_T f(lineage)`` plus gradient oracles.

    For DPF-SGR runs: ``expect_dpf`` (normalised, with baseline ``fbar``) and
    ``dpf_unbiased`` (``Z sum wbar (f s + grad f)``).  For PF runs with
    resampling at every step: ``expect_pf`` and ``pf_unbiased``, the
    score-function corrected forms that keep the per-step resampling scores.
    """
    fv, df = _f_per_lineage(run, f)
    w = run.wbar_final
    fbar = np.sum(w * fv, axis=0)
    zhat = np.exp(run.logZ_value)
    out = {"fbar": fbar}
    variant = run.config.variant
    if variant == "dpf_sgr":
        s = lineage_scores(run)
        out["expect_dpf"] = np.einsum("nl,dnl->dl", w, df + (fv - fbar)[None] * s)
        out["dpf_unbiased"] = zhat * np.einsum("nl,dnl->dl", w, fv[None] * s + df)
    elif variant in ("pf", "pf_sf"):
        if not run.resampled.all() or run.config.proposal != "bootstrap":
            raise ValueError("PF expectation oracles need bootstrap runs that resample every step")
        t_count = run.t_count
        score_prev = _prior_scores(run)
        resample_score = np.zeros_like(fbar)[None].repeat(score_prev.shape[0], axis=0)
        log_w_scores = np.zeros_like(resample_score)
        for t in range(1, t_count + 1):
            # grad log wbar_{t-1}^{a_t^i}, summed over i
            resample_score = resample_score + np.take_along_axis(
                score_prev, np.broadcast_to(run.ancestors[t - 1][None], score_prev.shape), axis=1
            ).sum(axis=1)
            inc = _increment_scores(run, t)
            wt = np.exp(run.ell_values[t])
            mean_inc = np.einsum("nl,dnl->dl", wt, inc)
            log_w_scores = log_w_scores + mean_inc
            score_prev = inc - mean_inc[:, None, :]
        last = inc
        tail = np.einsum("nl,dnl->dl", w, df + (fv - fbar)[None] * last)
        out["expect_pf"] = fbar[None] * resample_score + tail
        out["pf_unbiased"] = zhat * (fbar[None] * (log_w_scores + resample_score) + tail)
    else:
        raise ValueError(f"no expectation oracle for variant {variant!r}")
    return out


def dice_sum(run):
    """Tape node ``sum_t sum_i (l - stop(l))`` at the drawn ancestors."""
    terms = []
    for t in range(1, run.t_count + 1):
        mask = run.resampled[t - 1]
        ell = run.ell_nodes[t - 1]
        for i in range(run.n_particles):
            d = ad.select([(w - ad.stop_gradient(w)) if isinstance(w, ad.Node) else 0.0 for w in ell], run.ancestors[t - 1][i])
            terms.append(d if mask.all() else ad.where(mask, d, 0.0))
    return ad.vsum(terms)


def expectation_nodes(run, f=f_last_state):
    """Tape expressions whose gradients the posterior-expectation oracles reproduce.

    Returns a dict of nodes on the run's tape: ``fbar`` and, depending on
    the variant, ``unbiased`` (``Z * fbar``) and ``dice`` / ``dice_unbiased``.
    """
    tape = run.tape
    if run.x_nodes is not None:
        raise ValueError("expectation nodes are implemented for bootstrap runs")
    states = run.lineages()  # f sees the ancestral path of each final particle
    ell_t = run.ell_nodes[-1]
    fbar = None
    for i in range(run.n_particles):
        fi = f([s[i] for s in states], run.theta)
        term = ad.exp(_as_node(tape, ell_t[i])) * fi
        fbar = term if fbar is None else fbar + term
    fbar = _as_node(tape, fbar)
    z = ad.exp(run.logZhat)
    out = {"fbar": fbar, "unbiased": z * fbar}
    if run.config.variant in ("pf", "pf_sf"):
        s = _as_node(tape, dice_sum(run))
        magic = ad.exp(s - ad.stop_gradient(s))
        out["dice"] = fbar * magic
        out["dice_unbiased"] = z * fbar * magic
    return out


# ---------------------------------------------------------------------------
# explicit backward messages


def _step_partials(run, t):
    """Partials of step ``t`` per particle j, each shaped (N, L) or (d, N, L).

    ``logw``: log incremental weight; ``dw_dx``, ``dw_dxp``, ``dw_dth``: its
    derivatives (log scale); ``dx_dxp``, ``dx_dth``: derivatives of the new
    particle w.r.t. its parent and theta (zero for the bootstrap proposal).
    """
    model = run.model
    n, lanes = run.n_particles, run.lanes
    m = n * lanes
    tv = _theta_values(run)
    d = len(tv)
    pathwise = run.config.proposal == "reparam"
    xp_vals = np.take_along_axis(run.x[t - 1], run.ancestors[t - 1], axis=0)
    yt = _y_at(run, t, n)

    if pathwise:
        tape_x = ad.Tape(m)
        xp = tape_x.input(_flat(xp_vals))
        th = [tape_x.input(_tile(v, n)) for v in tv]
        xn = model.transition_sample(_flat(run.eps[t]), xp, th)
        g = ad.grad_values(xn, [xp] + th)
        dx_dxp = g[0].reshape(n, lanes)
        dx_dth = g[1:].reshape(d, n, lanes)
    else:
        dx_dxp = np.zeros((n, lanes))
        dx_dth = np.zeros((d, n, lanes))

    tape_w = ad.Tape(m)
    x = tape_w.input(_flat(run.x[t]))
    xp = tape_w.input(_flat(xp_vals))
    th = [tape_w.input(_tile(v, n)) for v in tv]
    if pathwise:
        logw = model.observation_logpdf(yt, x, th)
    else:
        lp = model.transition_logpdf(x, xp, th)
        logw = (lp - ad.stop_gradient(lp)) + model.observation_logpdf(yt, x, th)
    logw = _as_node(tape_w, logw) + 0.0
    g = ad.grad_values(logw, [x, xp] + th)
    return {
        "logw": logw.value.reshape(n, lanes),
        "dw_dx": g[0].reshape(n, lanes),
        "dw_dxp": g[1].reshape(n, lanes),
        "dw_dth": g[2:].reshape(d, n, lanes),
        "dx_dxp": dx_dxp,
        "dx_dth": dx_dth,
    }


def explicit_backward_gradient(run, return_messages=False):
    """``dZ/dtheta`` for DPF-SGR from the explicit backward recursions.

    With ``F_t = prod_{s>t} W_s`` and ``D_j = F_{t+1} + W_{t+1} b_j``,
    ``b_j = (bw_{t+1}^j - sum_k wbar_{t+1}^k bw_{t+1}^k) / W_{t+1}``::

        bw_t^i  = sum_{j: a_j = i} (w_{t+1}^j / wbar_t^i) D_j
        bx_t^i  = sum_{j: a_j = i} dx_j/dx_i (dw_j/dx_j D_j + W_{t+1} bx_{t+1}^j) + dw_j/dx_i D_j
        bth_t   = sum_j (dw_j/dth + dw_j/dx_j dx_j/dth) D_j
                  + W_{t+1} (bth_{t+1} + sum_j dx_j/dth bx_{t+1}^j)

    and ``G = bth_0 + sum_i dx_0^i/dth bx_0^i + sum_i dwbar_0^i/dth bw_0^i``.
    Terminal messages are zero.  Needs resampling at every step.
    """
    cfg = run.config
    if cfg.variant != "dpf_sgr" or not run.resampled.all():
        raise ValueError("explicit backward messages need a DPF-SGR run that resamples every step")
    if cfg.proposal not in ("bootstrap", "reparam"):
        raise ValueError("explicit backward messages support bootstrap and reparam proposals")
    n, lanes = run.n_particles, run.lanes
    t_count = run.t_count
    d = len(run.theta)
    lane_idx = np.broadcast_to(np.arange(lanes), (n, lanes))
    log_f = run.f_hat_suffix
    W = np.exp(run.logW_values)

    bw = np.zeros((n, lanes))
    bx = np.zeros((n, lanes))
    bth = np.zeros((d, lanes))
    history = {"bw": [None] * (t_count + 1), "bx": [None] * (t_count + 1), "bth": [None] * (t_count + 1), "bb": [None] * (t_count + 1)}
    history["bw"][t_count], history["bx"][t_count], history["bth"][t_count] = bw, bx, bth
    for t in range(t_count - 1, -1, -1):
        p = _step_partials(run, t + 1)
        a = run.ancestors[t]
        w_next = np.exp(p["logw"]) / n
        wbar_next = w_next / w_next.sum(axis=0)
        big_w = W[t]
        big_f = np.exp(log_f[t + 1])
        b = (bw - np.sum(wbar_next * bw, axis=0)) / big_w
        dmsg = big_f + big_w * b
        wbar_t = np.exp(run.ell_values[t])

        new_bw = np.zeros((n, lanes))
        np.add.at(new_bw, (a, lane_idx), w_next * dmsg)
        new_bw /= wbar_t

        dw_dx = w_next * p["dw_dx"]
        dw_dxp = w_next * p["dw_dxp"]
        dw_dth = w_next[None] * p["dw_dth"]
        contrib_x = p["dx_dxp"] * (dw_dx * dmsg + big_w * bx) + dw_dxp * dmsg
        new_bx = np.zeros((n, lanes))
        np.add.at(new_bx, (a, lane_idx), contrib_x)

        new_bth = np.sum((dw_dth + dw_dx[None] * p["dx_dth"]) * dmsg[None], axis=1)
        new_bth += big_w * (bth + np.sum(p["dx_dth"] * bx[None], axis=1))

        bw, bx, bth = new_bw, new_bx, new_bth
        history["bw"][t], history["bx"][t], history["bth"][t], history["bb"][t + 1] = bw, bx, bth, b

    g = bth.copy()
    if cfg.proposal == "reparam":
        tape = ad.Tape(n * lanes)
        th = [tape.input(_tile(v, n)) for v in _theta_values(run)]
        x0 = run.model.init_sample(_flat(run.eps[0]), th)
        if isinstance(x0, ad.Node):
            dx0 = ad.grad_values(x0, th).reshape(d, n, lanes)
            g += np.sum(dx0 * bx[None], axis=1)
    else:
        g += np.sum(_prior_scores(run) / n * bw[None], axis=1)
    report = EstimatorReport("explicit_backward_gradient", g, "oracle_formula", cfg.seed)
    if return_messages:
        return report, history
    return report


# ---------------------------------------------------------------------------
# importance weighted single-step objective


def one_step_joint(model, x, y, theta, x_prev=1.0):
    """``log p(x, y)`` for one step of ``model`` started at ``x_prev``."""
    return model.transition_logpdf(x, x_prev, theta) + model.observation_logpdf(y, x, theta)


def iwae_gradient(model, y, theta, n, seed, q_mean=0.5, q_logscale=0.0, q_depends_on_theta=False, lanes=1):
    """Gradients of ``log (1/N) sum p(x^i, y) / q(x^i)`` with ``x^i ~ q``.

    Returns a dict with the oracle ``sum wbar grad log p(x^i, y)``, the
    stop-gradient-on-proposal AD path, and the score-function (DiCE) AD path
    for a proposal whose mean may be ``theta[0]``.
    """
    from .rng import PROPOSAL, Streams

    eps = Streams(seed, lanes).normal(PROPOSAL, 0, n)
    theta_vals = [np.broadcast_to(np.asarray(v, dtype=np.float64), (lanes,)) for v in theta]
    mean = theta_vals[0] if q_depends_on_theta else q_mean
    x = mean + math.exp(q_logscale) * eps

    def build(live_q):
        tape = ad.Tape(lanes)
        th = [tape.input(v) for v in theta_vals]
        m = th[0] if q_depends_on_theta else q_mean
        lps, lqs = [], []
        for i in range(n):
            lps.append(one_step_joint(model, x[i], y, th))
            z = (x[i] - m) * math.exp(-q_logscale)
            lq = (-0.5 * math.log(2 * math.pi)) - q_logscale - 0.5 * (z * z)
            lqs.append(lq)
        if live_q:
            logws = [lp - lq for lp, lq in zip(lps, lqs)]
        else:
            logws = [lp - ad.stop_gradient(lq) for lp, lq in zip(lps, lqs)]
        logz = ad.logsumexp(logws) - math.log(n)
        obj = logz
        if live_q:
            s = ad.vsum([lq - ad.stop_gradient(lq) for lq in lqs])
            if isinstance(s, ad.Node):
                obj = logz + ad.stop_gradient(logz) * s
        return tape, th, obj, logws, lps

    tape, th, obj_stop, logws, lps = build(False)
    g_stop = ad.grad_values(obj_stop, th)
    wbar = np.stack([np.broadcast_to(ad.value_of(lw), (lanes,)) for lw in logws])
    wbar = np.exp(wbar - wbar.max(axis=0))
    wbar /= wbar.sum(axis=0)
    scores = np.stack([ad.grad_values(lp, th) for lp in lps], axis=1)
    oracle = np.einsum("nl,dnl->dl", wbar, scores)
    _, th2, obj_dice, _, _ = build(True)
    g_dice = ad.grad_values(obj_dice, th2)
    return {"oracle": oracle, "stop_path": g_stop, "dice_path": g_dice, "wbar": wbar}
