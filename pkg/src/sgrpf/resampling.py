"""Resampling: ancestor draws, weighted resampling and the stop-gradient correction.

Probabilities and uniforms are ``(N, lanes)`` arrays; every lane is an
independent resampling problem.  Ancestor indices are 0-based.
"""

import logging

import numpy as np

from . import _accel
from . import adcore as ad

log = logging.getLogger(__name__)

SCHEMES = ("multinomial", "stratified", "systematic")
ZERO_FLOOR = 1e-300


class ResampleDiagnostics:
    """Counters for events that are handled rather than raised."""

    def __init__(self):
        self.floored = 0

    def as_dict(self):
        return {"floored_probabilities": self.floored}


def _as_lanes(a):
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def check_probs(r, diagnostics=None):
    """Validate ``r`` (N, L); floor exact zeros at ``ZERO_FLOOR`` and renormalise."""
    r = _as_lanes(r)
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise ValueError("resampling probabilities must be finite and non-negative")
    total = r.sum(axis=0)
    if np.any(np.abs(total - 1.0) > 1e-9):
        raise ValueError("resampling probabilities must sum to 1")
    zeros = r == 0.0
    if zeros.any():
        count = int(zeros.sum())
        if diagnostics is not None:
            diagnostics.floored += count
        log.debug("floored %d zero resampling probabilities", count)
        r = np.where(zeros, ZERO_FLOOR, r)
        r = r / r.sum(axis=0)
    return r


def positions(kind, u):
    """Sorted (or i.i.d. for multinomial) points in [0, 1) from uniforms ``u`` (N, L)."""
    n = u.shape[0]
    k = np.arange(n, dtype=np.float64)[:, None]
    if kind == "systematic":
        return (k + u[:1]) / n
    if kind == "stratified":
        return (k + u) / n
    if kind == "multinomial":
        return u
    raise ValueError(f"unknown resampling scheme {kind!r}")


def _cumulative(r):
    c = np.cumsum(r, axis=0)
    c[-1] = 1.0
    return c


def _search_np(c, p):
    n, lanes = c.shape
    shift = 2.0 * np.arange(lanes, dtype=np.float64)
    flat_c = (c + shift).T.ravel()
    flat_p = (p + shift).T.ravel()
    idx = np.searchsorted(flat_c, flat_p, side="right").reshape(lanes, -1).T
    idx -= (n * np.arange(lanes))[None, :]
    return np.minimum(idx, n - 1)


def _search_loops(c, p, out, ordered):
    # lane-major (L, N) inputs keep each search in one contiguous row;
    # ordered positions (systematic, stratified) take a linear merge
    lanes, n = c.shape
    m = p.shape[1]
    for l in range(lanes):
        j = 0
        for k in range(m):
            x = p[l, k]
            if ordered:
                while j < n - 1 and c[l, j] <= x:
                    j += 1
                out[l, k] = j
                continue
            lo = 0
            hi = n - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if c[l, mid] <= x:
                    lo = mid + 1
                else:
                    hi = mid
            out[l, k] = lo


_search_nb = _accel.njit(_search_loops)


def draw_ancestors(kind, r, u, diagnostics=None):
    """Ancestor indices (N, L) for probabilities ``r`` and uniforms ``u``."""
    r = check_probs(r, diagnostics)
    u = _as_lanes(u)
    if u.shape != r.shape:
        raise ValueError("uniforms must have the same shape as the probabilities")
    p = positions(kind, u)
    c = _cumulative(r)
    if _accel.use_numba():
        out = np.empty(p.shape[::-1], dtype=np.int64)
        _search_nb(np.ascontiguousarray(c.T), np.ascontiguousarray(p.T), out, kind != "multinomial")
        return out.T.copy()
    return _search_np(c, p)


def offspring_counts(ancestors, n=None):
    a = np.asarray(ancestors)
    a = a[:, None] if a.ndim == 1 else a
    n = a.shape[0] if n is None else n
    counts = np.zeros((n, a.shape[1]), dtype=np.int64)
    np.add.at(counts, (a, np.arange(a.shape[1])[None, :]), 1)
    return counts


def soft_alpha_probs(wbar, alpha):
    """Mixture ``alpha * wbar + (1 - alpha) / N``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    wbar = np.asarray(wbar, dtype=np.float64)
    return alpha * wbar + (1.0 - alpha) / wbar.shape[0]


def effective_sample_size(wbar):
    """``1 / sum(wbar**2)`` along the particle axis."""
    wbar = np.asarray(wbar, dtype=np.float64)
    return 1.0 / np.sum(wbar * wbar, axis=0)


def normalized_probs(logw):
    """Detached normalised weights from log-weights (N, L) via a max shift."""
    logw = _as_lanes(logw)
    w = np.exp(logw - logw.max(axis=0))
    return w / w.sum(axis=0)


def gather(values, ancestors):
    """``values[ancestors[i, l], l]`` for numeric (N, L) arrays."""
    values = _as_lanes(values)
    return np.take_along_axis(values, ancestors, axis=0)


def gather_nodes(nodes, ancestors):
    """Per-lane ancestor gather over a list of nodes."""
    return [ad.select(nodes, ancestors[i]) for i in range(ancestors.shape[0])]


def weighted_resample(x, wbar, r, kind, u, diagnostics=None):
    """Resample with probabilities ``r`` and weights ``(1/N) wbar[a] / r[a]``.

    ``x`` is a numeric (N, L) array; ``wbar`` either numeric (N, L) or a list
    of weight nodes.  Returns ``(x_new, w_new, ancestors)``.
    """
    r_checked = _as_lanes(r)
    wbar_vals = _as_lanes([ad.value_of(w) for w in wbar]) if isinstance(wbar, list) else _as_lanes(wbar)
    if np.any((r_checked == 0.0) & (wbar_vals > 0.0)):
        raise ValueError("zero resampling probability on a particle with positive weight")
    a = draw_ancestors(kind, r_checked, u, diagnostics)
    n = a.shape[0]
    x_new = gather(x, a)
    r_a = gather(r_checked, a)
    if isinstance(wbar, list):
        picked = gather_nodes(wbar, a)
        w_new = [picked[i] * (1.0 / n) / r_a[i] for i in range(n)]
    else:
        w_new = gather(wbar_vals, a) / (n * r_a)
    return x_new, w_new, a


def sgr_resample(x, wbar, kind, u, diagnostics=None):
    """Resample from detached ``wbar``; new weights ``(1/N) wbar[a] / stop(wbar[a])``.

    ``wbar`` is a list of weight nodes.  Forward value of every new weight
    is exactly 1/N.
    """
    r = np.stack([np.broadcast_to(ad.value_of(w), ad.value_of(wbar[0]).shape) for w in wbar])
    a = draw_ancestors(kind, r, u, diagnostics)
    n = a.shape[0]
    picked = gather_nodes(wbar, a)
    w_new = [(p / ad.stop_gradient(p)) * (1.0 / n) for p in picked]
    return gather(x, a), w_new, a


def sgr_log_weights(logwbar, ancestors):
    """Log-domain correction ``-log N + l[a] - stop(l[a])`` for log-weight nodes."""
    n = ancestors.shape[0]
    diffs = [l - ad.stop_gradient(l) for l in logwbar]
    return [ad.select(diffs, ancestors[i]) + (-np.log(n)) for i in range(n)]
