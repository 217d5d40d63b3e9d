"""Scalar reverse-mode automatic differentiation with a stop-gradient node.

A :class:`Tape` records one node per scalar operation.  Every node carries a
*lane* axis: ``tape.lanes`` independent copies of the same scalar program
that differ only in their data (replicates, seeds, lineages).  Lanes never
interact, so a tape with ``L`` lanes computes exactly what ``L`` single-lane
tapes would, in one pass.  Per-lane control flow (which ancestor a particle
copies, whether a step resamples) is expressed with :func:`select`, a gather
over candidate nodes by a per-lane index.

Two reverse sweeps are provided:

* :func:`grad` records the adjoints as new tape nodes, so they can be
  differentiated again (:func:`grad_twice`);
* :func:`grad_values` computes adjoint values only, through a compiled
  kernel, and is what the filters use on the hot path.

Stop-gradient is a genuine node.  ``grad`` and ``grad_values`` treat it as
having zero derivative; ``eval_then_grad`` differentiates the evaluated
expression instead, i.e. with every stop-gradient removed.
"""

import math

import numpy as np

from . import _accel

# Opcodes.  The order matters to the kernels below.
CONST, INPUT, ADD, SUB, MUL, DIV, NEG, EXP, LOG, SQRT, POW, STOP, SELECT = range(13)

OP_NAMES = (
    "constant",
    "input",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "pow",
    "stop_gradient",
    "select",
)


class Node:
    """Handle to one scalar (per lane) on a tape."""

    __slots__ = ("tape", "idx")
    # Make ``ndarray <op> Node`` defer to the Node's reflected operators.
    __array_ufunc__ = None

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape._vals[self.idx]

    @property
    def op(self):
        return OP_NAMES[self.tape._op[self.idx]]

    @property
    def parents(self):
        t = self.tape
        o = t._op[self.idx]
        if o == SELECT:
            return sorted(set(t._sel[t._selrow[self.idx]].tolist()))
        return [p for p in (t._a[self.idx], t._b[self.idx]) if p >= 0]

    @property
    def stop_flag(self):
        return self.tape._op[self.idx] == STOP

    def item(self):
        v = self.value
        if v.shape[0] != 1:
            raise ValueError("item() needs a single-lane tape")
        return float(v[0])

    def __repr__(self):
        v = self.value
        shown = f"{v[0]:.6g}" if v.shape[0] == 1 else f"<{v.shape[0]} lanes>"
        return f"Node({self.idx}, {self.op}, {shown})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)


class Tape:
    """Append-only record of scalar operations over ``lanes`` lanes."""

    def __init__(self, lanes=1, capacity=1024):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self.lanes = int(lanes)
        # wide tapes start small and grow by doubling
        capacity = min(capacity, (1 << 22) // self.lanes)
        self._vals = np.empty((max(capacity, 16), self.lanes))
        self._op = []
        self._a = []
        self._b = []
        self._aux = []
        self._selrow = {}
        self._sel = []
        self._consts = {}
        self.inputs = set()
        self._packed = None

    def __len__(self):
        return len(self._op)

    @property
    def values(self):
        """Node values, shape ``(len(tape), lanes)`` (read-only view)."""
        v = self._vals[: len(self._op)]
        v.flags.writeable = False
        return v

    def _push(self, op, a, b, aux, value):
        n = len(self._op)
        if n == self._vals.shape[0]:
            grown = np.empty((2 * n, self.lanes))
            grown[:n] = self._vals
            self._vals = grown
        self._vals[n] = value
        self._op.append(op)
        self._a.append(a)
        self._b.append(b)
        self._aux.append(aux)
        return Node(self, n)

    def input(self, value):
        """New differentiable leaf."""
        v = _check_finite(value, self.lanes)
        node = self._push(INPUT, -1, -1, 0.0, v)
        self.inputs.add(node.idx)
        return node

    def inputs_from(self, values):
        return [self.input(v) for v in values]

    def const(self, value):
        """Constant node; python scalars are shared per tape."""
        if isinstance(value, (int, float)):
            key = float(value)
            idx = self._consts.get(key)
            if idx is not None:
                return Node(self, idx)
            node = self._push(CONST, -1, -1, 0.0, _check_finite(key, self.lanes))
            # indices, not nodes: a node would make a tape -> node -> tape cycle
            # and keep big value arrays alive until the next full gc
            self._consts[key] = node.idx
            return node
        return self._push(CONST, -1, -1, 0.0, _check_finite(value, self.lanes))

    def pack(self):
        """Flat arrays describing the tape, for the kernels."""
        n = len(self._op)
        if self._packed is not None and self._packed[0] == n:
            return self._packed[1]
        sel = (
            np.stack(self._sel).astype(np.int64)
            if self._sel
            else np.zeros((1, self.lanes), dtype=np.int64)
        )
        selrow = np.full(n, -1, dtype=np.int64)
        for k, r in self._selrow.items():
            selrow[k] = r
        packed = (
            np.asarray(self._op, dtype=np.int64),
            np.asarray(self._a, dtype=np.int64),
            np.asarray(self._b, dtype=np.int64),
            np.asarray(self._aux, dtype=np.float64),
            self._vals[:n],
            selrow,
            sel,
        )
        self._packed = (n, packed)
        return packed

    def replay(self, leaf_values=None):
        """Recompute every node value from the leaves.

        ``leaf_values`` optionally maps input nodes to new values; select
        nodes keep their recorded per-lane choices.
        """
        op, pa, pb, aux, vals, selrow, sel = self.pack()
        out = np.array(vals, copy=True)
        if leaf_values:
            for leaf, v in leaf_values.items():
                if leaf.idx not in self.inputs:
                    raise ValueError("replay overrides must be input nodes")
                out[leaf.idx] = v
        if _accel.use_numba():
            _replay_nb(op, pa, pb, aux, out, selrow, sel)
        else:
            _replay_np(op, pa, pb, aux, out, selrow, sel)
        return out


def _check_finite(value, lanes):
    if isinstance(value, float):  # scalars broadcast when stored
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {value!r}")
        return value
    v = np.asarray(value, dtype=np.float64)
    if v.shape != (lanes,):
        v = np.broadcast_to(v, (lanes,))
    if not np.isfinite(v).all():
        raise ValueError(f"non-finite value {value!r}")
    return v


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _as_node(tape, x):
    if isinstance(x, Node):
        return x
    return tape.const(x)


def lift(value, tape):
    """Constant node holding ``value`` (scalar or per-lane array)."""
    return tape.const(value)


def value_of(x):
    """Forward value of a node, or ``x`` itself for plain numbers/arrays."""
    return x.value if isinstance(x, Node) else x


def _binary(op, x, y, f):
    if isinstance(x, Node):
        tape = x.tape
        if isinstance(y, Node):
            if y.tape is not tape:
                raise ValueError("operands live on different tapes")
        else:
            y = tape.const(y)
    elif isinstance(y, Node):
        tape = y.tape
        x = tape.const(x)
    else:
        return f(x, y)
    vals = tape._vals
    return tape._push(op, x.idx, y.idx, 0.0, f(vals[x.idx], vals[y.idx]))


def add(x, y):
    return _binary(ADD, x, y, np.add)


def sub(x, y):
    return _binary(SUB, x, y, np.subtract)


def mul(x, y):
    return _binary(MUL, x, y, np.multiply)


def div(x, y):
    return _binary(DIV, x, y, np.divide)


def neg(x):
    if isinstance(x, Node):
        return x.tape._push(NEG, x.idx, -1, 0.0, -x.value)
    return -x


def exp(x):
    if isinstance(x, Node):
        return x.tape._push(EXP, x.idx, -1, 0.0, np.exp(x.value))
    return np.exp(x)


def log(x):
    if isinstance(x, Node):
        return x.tape._push(LOG, x.idx, -1, 0.0, np.log(x.value))
    return np.log(x)


def sqrt(x):
    if isinstance(x, Node):
        return x.tape._push(SQRT, x.idx, -1, 0.0, np.sqrt(x.value))
    return np.sqrt(x)


def power(x, exponent):
    """``x ** exponent`` for a constant real exponent."""
    if isinstance(exponent, Node):
        raise TypeError("only constant exponents are supported")
    c = float(exponent)
    if isinstance(x, Node):
        return x.tape._push(POW, x.idx, -1, c, np.power(x.value, c))
    return np.power(x, c)


def square(x):
    return power(x, 2.0)


def stop_gradient(x):
    """Value of ``x`` with zero derivative.  Plain values pass through."""
    if isinstance(x, Node):
        return x.tape._push(STOP, x.idx, -1, 0.0, x.value)
    return x


def select(candidates, index):
    """Per-lane gather: lane ``l`` takes ``candidates[index[l]]``.

    ``candidates`` are nodes on one tape (or plain values, in which case the
    result is a plain array).  When every lane picks the same candidate that
    node is returned unchanged.
    """
    tape = _tape_of(*candidates)
    index = np.asarray(index, dtype=np.int64)
    if tape is None:
        stacked = np.broadcast_arrays(*[np.asarray(c, dtype=float) for c in candidates])
        stacked = np.stack(stacked)
        if stacked.ndim == 1:
            return stacked[index]
        lanes = stacked.shape[1]
        return stacked[np.broadcast_to(index, (lanes,)), np.arange(lanes)]
    nodes = [_as_node(tape, c) for c in candidates]
    index = np.broadcast_to(index, (tape.lanes,))
    first = index[0]
    if np.all(index == first):
        return nodes[first]
    ids = np.fromiter((n.idx for n in nodes), dtype=np.int64, count=len(nodes))
    chosen = ids[index]
    value = tape._vals[chosen, np.arange(tape.lanes)]
    node = tape._push(SELECT, -1, -1, 0.0, value)
    tape._selrow[node.idx] = len(tape._sel)
    tape._sel.append(chosen)
    return node


def where(mask, x, y):
    """Lane-wise ``x if mask else y``."""
    mask = np.asarray(mask, dtype=bool)
    return select([x, y], np.where(mask, 0, 1))


def vsum(terms):
    """Left-to-right sum of a sequence of nodes/values."""
    it = iter(terms)
    total = next(it)
    for t in it:
        total = total + t
    return total


def logsumexp(terms):
    """``log(sum(exp(terms)))`` with a detached max shift."""
    terms = list(terms)
    tape = _tape_of(*terms)
    vals = [value_of(t) for t in terms]
    m = np.max(np.stack(np.broadcast_arrays(*vals)), axis=0)
    if tape is None:
        return m + np.log(sum(np.exp(v - m) for v in vals))
    shift = tape.const(m)
    return shift + log(vsum(exp(t - shift) for t in terms))


# ---------------------------------------------------------------------------
# reverse sweeps


def _check_leaves(output, leaves):
    tape = output.tape
    for leaf in leaves:
        if not isinstance(leaf, Node) or leaf.tape is not tape:
            raise ValueError("leaves must be nodes on the output's tape")
        if leaf.idx not in tape.inputs:
            raise ValueError(f"node {leaf.idx} is not a designated input")
    return tape


def grad(output, leaves):
    """Adjoints of ``output`` w.r.t. ``leaves``, recorded as tape nodes.

    Returns a dict mapping each leaf to a node; the result can be passed to
    ``grad`` again for higher derivatives.
    """
    tape = _check_leaves(output, leaves)
    adj = {output.idx: tape.const(1.0)}

    def acc(i, contrib):
        prev = adj.get(i)
        adj[i] = contrib if prev is None else prev + contrib

    ops, pa, pb, aux = tape._op, tape._a, tape._b, tape._aux
    keep = {leaf.idx for leaf in leaves}
    for k in range(output.idx, -1, -1):
        g = adj.get(k) if k in keep else adj.pop(k, None)
        if g is None:
            continue
        o = ops[k]
        if o <= INPUT or o == STOP:
            continue
        a = pa[k]
        if o == ADD:
            acc(a, g)
            acc(pb[k], g)
        elif o == SUB:
            acc(a, g)
            acc(pb[k], -g)
        elif o == MUL:
            acc(a, g * Node(tape, pb[k]))
            acc(pb[k], g * Node(tape, a))
        elif o == DIV:
            b = Node(tape, pb[k])
            acc(a, g / b)
            acc(pb[k], -(g * Node(tape, k)) / b)
        elif o == NEG:
            acc(a, -g)
        elif o == EXP:
            acc(a, g * Node(tape, k))
        elif o == LOG:
            acc(a, g / Node(tape, a))
        elif o == SQRT:
            acc(a, (g / Node(tape, k)) * 0.5)
        elif o == POW:
            c = aux[k]
            if c == 1.0:
                acc(a, g)
            elif c == 2.0:
                acc(a, g * (Node(tape, a) * 2.0))
            else:
                acc(a, g * (power(Node(tape, a), c - 1.0) * c))
        elif o == SELECT:
            chosen = tape._sel[tape._selrow[k]]
            for p in np.unique(chosen):
                mask = chosen == p
                if mask.all():
                    acc(int(p), g)
                else:
                    acc(int(p), g * tape.const(mask.astype(np.float64)))
    zero = None
    result = {}
    for leaf in leaves:
        node = adj.get(leaf.idx)
        if node is None:
            if zero is None:
                zero = tape.const(0.0)
            node = zero
        result[leaf] = node
    return result


def grad_twice(output, leaves):
    """Hessian of ``output`` as a nested list of nodes (row = first leaf)."""
    first = grad(output, leaves)
    return [[grad(first[li], leaves)[lj] for lj in leaves] for li in leaves]


def adjoint_values(output, through_stop=False):
    """Adjoint values of ``output`` for every node up to it.

    Shape ``(output.idx + 1, lanes)``.  With ``through_stop`` the
    stop-gradient nodes pass adjoints unchanged (derivative of the
    evaluated expression).
    """
    tape = output.tape
    op, pa, pb, aux, vals, selrow, sel = tape.pack()
    if _accel.use_numba():
        return _sweep_nb(op, pa, pb, aux, vals, selrow, sel, output.idx, through_stop)
    return _sweep_np(op, pa, pb, aux, vals, selrow, sel, output.idx, through_stop)


def grad_values(output, leaves, through_stop=False):
    """Gradient values, shape ``(len(leaves), lanes)``."""
    _check_leaves(output, leaves)
    adj = adjoint_values(output, through_stop)
    out = np.zeros((len(leaves), output.tape.lanes))
    for j, leaf in enumerate(leaves):
        if leaf.idx <= output.idx:
            out[j] = adj[leaf.idx]
    return out


def eval_then_grad(output, leaves):
    """Gradient of the evaluated expression (all stop-gradients removed)."""
    return grad_values(output, leaves, through_stop=True)


def hessian_values(output, leaves):
    """Hessian values, shape ``(d, d, lanes)``: taped first sweep, fast second."""
    first = grad(output, leaves)
    return np.stack([grad_values(first[leaf], leaves) for leaf in leaves])


def finite_difference(f, theta, h=1e-5):
    """Central differences ``(f(θ+h e_k) - f(θ-h e_k)) / 2h`` per coordinate."""
    if h <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    out = []
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e.flat[k] = h
        hi = np.asarray(f(theta + e), dtype=np.float64)
        lo = np.asarray(f(theta - e), dtype=np.float64)
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise ValueError(f"non-finite function value at coordinate {k}")
        out.append((hi - lo) / (2.0 * h))
    return np.array(out)


# ---------------------------------------------------------------------------
# kernels: explicit loops (numba) and row-vectorised numpy fallbacks


def _sweep_loops(op, pa, pb, aux, vals, selrow, sel, out, through_stop):
    lanes = vals.shape[1]
    adj = np.zeros((out + 1, lanes))
    for l in range(lanes):
        adj[out, l] = 1.0
    for k in range(out, -1, -1):
        o = op[k]
        if o <= 1:
            continue
        live = False
        for l in range(lanes):
            if adj[k, l] != 0.0:
                live = True
                break
        if not live:
            continue
        a = pa[k]
        b = pb[k]
        if o == 2:
            for l in range(lanes):
                adj[a, l] += adj[k, l]
                adj[b, l] += adj[k, l]
        elif o == 3:
            for l in range(lanes):
                adj[a, l] += adj[k, l]
                adj[b, l] -= adj[k, l]
        elif o == 4:
            for l in range(lanes):
                g = adj[k, l]
                adj[a, l] += g * vals[b, l]
                adj[b, l] += g * vals[a, l]
        elif o == 5:
            for l in range(lanes):
                g = adj[k, l] / vals[b, l]
                adj[a, l] += g
                adj[b, l] -= g * vals[k, l]
        elif o == 6:
            for l in range(lanes):
                adj[a, l] -= adj[k, l]
        elif o == 7:
            for l in range(lanes):
                adj[a, l] += adj[k, l] * vals[k, l]
        elif o == 8:
            for l in range(lanes):
                adj[a, l] += adj[k, l] / vals[a, l]
        elif o == 9:
            for l in range(lanes):
                adj[a, l] += adj[k, l] / vals[k, l] * 0.5
        elif o == 10:
            c = aux[k]
            for l in range(lanes):
                adj[a, l] += adj[k, l] * (c * vals[a, l] ** (c - 1.0))
        elif o == 11:
            if through_stop:
                for l in range(lanes):
                    adj[a, l] += adj[k, l]
        elif o == 12:
            r = selrow[k]
            for l in range(lanes):
                adj[sel[r, l], l] += adj[k, l]
    return adj


def _sweep_np(op, pa, pb, aux, vals, selrow, sel, out, through_stop):
    lanes = vals.shape[1]
    adj = np.zeros((out + 1, lanes))
    adj[out] = 1.0
    lane_ids = np.arange(lanes)
    op = op.tolist()
    pa = pa.tolist()
    pb = pb.tolist()
    for k in range(out, -1, -1):
        o = op[k]
        if o <= 1:
            continue
        g = adj[k]
        if not g.any():
            continue
        a = pa[k]
        if o == 2:
            adj[a] += g
            adj[pb[k]] += g
        elif o == 3:
            adj[a] += g
            adj[pb[k]] -= g
        elif o == 4:
            b = pb[k]
            adj[a] += g * vals[b]
            adj[b] += g * vals[a]
        elif o == 5:
            b = pb[k]
            q = g / vals[b]
            adj[a] += q
            adj[b] -= q * vals[k]
        elif o == 6:
            adj[a] -= g
        elif o == 7:
            adj[a] += g * vals[k]
        elif o == 8:
            adj[a] += g / vals[a]
        elif o == 9:
            adj[a] += g / vals[k] * 0.5
        elif o == 10:
            c = aux[k]
            adj[a] += g * (c * vals[a] ** (c - 1.0))
        elif o == 11:
            if through_stop:
                adj[a] += g
        elif o == 12:
            # one (row, lane) pair per lane, so no repeated indices
            adj[sel[selrow[k]], lane_ids] += g
    return adj


def _replay_loops(op, pa, pb, aux, vals, selrow, sel):
    n, lanes = vals.shape
    for k in range(n):
        o = op[k]
        a = pa[k]
        b = pb[k]
        for l in range(lanes):
            if o == 2:
                vals[k, l] = vals[a, l] + vals[b, l]
            elif o == 3:
                vals[k, l] = vals[a, l] - vals[b, l]
            elif o == 4:
                vals[k, l] = vals[a, l] * vals[b, l]
            elif o == 5:
                vals[k, l] = vals[a, l] / vals[b, l]
            elif o == 6:
                vals[k, l] = -vals[a, l]
            elif o == 7:
                vals[k, l] = math.exp(vals[a, l])
            elif o == 8:
                vals[k, l] = math.log(vals[a, l])
            elif o == 9:
                vals[k, l] = math.sqrt(vals[a, l])
            elif o == 10:
                vals[k, l] = vals[a, l] ** aux[k]
            elif o == 11:
                vals[k, l] = vals[a, l]
            elif o == 12:
                vals[k, l] = vals[sel[selrow[k], l], l]


def _replay_np(op, pa, pb, aux, vals, selrow, sel):
    lane_ids = np.arange(vals.shape[1])
    for k, o in enumerate(op.tolist()):
        a = pa[k]
        if o <= 1:
            continue
        if o == 2:
            vals[k] = vals[a] + vals[pb[k]]
        elif o == 3:
            vals[k] = vals[a] - vals[pb[k]]
        elif o == 4:
            vals[k] = vals[a] * vals[pb[k]]
        elif o == 5:
            vals[k] = vals[a] / vals[pb[k]]
        elif o == 6:
            vals[k] = -vals[a]
        elif o == 7:
            vals[k] = np.exp(vals[a])
        elif o == 8:
            vals[k] = np.log(vals[a])
        elif o == 9:
            vals[k] = np.sqrt(vals[a])
        elif o == 10:
            vals[k] = np.power(vals[a], aux[k])
        elif o == 11:
            vals[k] = vals[a]
        elif o == 12:
            vals[k] = vals[sel[selrow[k]], lane_ids]


_sweep_nb = _accel.njit(_sweep_loops)
_replay_nb = _accel.njit(_replay_loops)
