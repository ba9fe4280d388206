"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every operation records its inputs and a backward closure on the output
tensor.  ``backward`` walks those records in reverse topological order and
accumulates gradients on grad-tracking leaves.  Buffers are numpy arrays;
the tape itself, the broadcast rule, and all derivative formulas live here.

Broadcasting is deliberately narrow: two operands combine only when their
shapes are equal, one is a scalar, or one is a vector of length C and the
other's trailing extent is C.  Anything else raises ``ShapeError`` instead
of silently reshaping.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes outside an op's declared contract."""


class DomainError(ValueError):
    """Input value outside an op's mathematical domain."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar backward, detached root, ...)."""


_SEQ = itertools.count()

# Autograd switch, toggled by no_grad().  When off no records are created,
# so inference does not build graphs.  Thread-local: concurrent evaluation
# threads each scope their own flag instead of racing on a shared one.
_GRAD_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


class OpRecord:
    """One recorded operation: producer kind, inputs, and backward closure.

    ``backward`` maps the output gradient to a list of per-input gradients
    (None for inputs that need none), aligned with ``inputs``.
    """

    __slots__ = ("kind", "inputs", "backward", "seq")

    def __init__(self, kind, inputs, backward):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward = backward
        self.seq = next(_SEQ)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_detached",
                 "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        # np.array rather than ascontiguousarray: the latter promotes 0-d to 1-d
        self.data = np.array(data, dtype=np.float64, order="C", copy=None)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self._detached = False
        self._consumed = False

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- grad bookkeeping ----------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor(self.data)
        out._detached = True
        return out

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def record_op(kind, inputs, data, backward) -> Tensor:
    """Build the output tensor for an op, recording it when grads are on.

    Shared by every op in this module and by fused ops elsewhere (the scan
    kernel records itself through this hook).
    """
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = OpRecord(kind, inputs, backward)
    return out


# -- broadcast rule ----------------------------------------------------------


def _broadcast_shape(sa, sb, kind):
    if sa == sb:
        return sa
    if sb == ():
        return sa
    if sa == ():
        return sb
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return sa
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return sb
    raise ShapeError(
        f"{kind}: shapes {sa} and {sb} do not match and neither is a scalar "
        f"or a trailing-dimension vector"
    )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape of the operand it belongs to."""
    if g.shape == tuple(shape):
        return g
    if shape == ():
        return np.asarray(g.sum())
    # the only remaining legal case: operand is a trailing C-vector
    return g.reshape(-1, shape[0]).sum(axis=0)


def _binary(kind, a, b, fwd, grad_a, grad_b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, kind)
    ad, bd = a.data, b.data
    out = fwd(ad, bd)

    def backward(g):
        ga = _unbroadcast(grad_a(g, ad, bd), a.shape) if a.requires_grad else None
        gb = _unbroadcast(grad_b(g, ad, bd), b.shape) if b.requires_grad else None
        return [ga, gb]

    return record_op(kind, (a, b), out, backward)


# -- elementwise family --------------------------------------------------------


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record_op("neg", (a,), -a.data, lambda g: [-g])


def _unary(kind, a, out, dfdx) -> Tensor:
    return record_op(kind, (a,), out, lambda g: [g * dfdx])


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _unary("exp", a, out, out)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    return _unary("log", a, np.log(a.data), 1.0 / a.data)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exponentiate only non-positive arguments: e = exp(-|x|) <= 1, then
    # sigmoid is 1/(1+e) on the positive side and e/(1+e) on the negative
    e = np.exp(-np.abs(x))
    d = 1.0 + e
    return np.where(x >= 0, 1.0 / d, e / d)


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1+e^x) = max(x,0) + log1p(e^-|x|)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _unary("sigmoid", a, s, s * (1.0 - s))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("softplus", a, _softplus(a.data), _sigmoid(a.data))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _unary("silu", a, a.data * s, s * (1.0 + a.data * (1.0 - s)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("relu", a, np.maximum(a.data, 0.0), (a.data > 0).astype(np.float64))


def pow_const(a, p: float) -> Tensor:
    """a ** p for a constant exponent p >= 0 (used by the focal term)."""
    a = _as_tensor(a)
    p = float(p)
    if p < 0:
        raise DomainError("pow_const exponent must be non-negative")
    out = a.data ** p
    if p == 0.0:
        dfdx = np.zeros_like(a.data)
    elif p == 1.0:
        dfdx = np.ones_like(a.data)
    else:
        dfdx = p * a.data ** (p - 1.0)
    return _unary("pow", a, out, dfdx)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return record_op("scale", (a,), a.data * s, lambda g: [g * s])


# -- structural ops ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return [ga, gb]

    return record_op("matmul", (a, b), ad @ bd, backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return record_op("reshape", (a,), a.data.reshape(shape),
                     lambda g: [g.reshape(old)])


def gather_rows(a, index) -> Tensor:
    """Select rows (axis-0 slices) by integer index; repeats accumulate grads."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows index must be 1-d")
    if a.ndim < 1:
        raise ShapeError("gather_rows input must have rows")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows index out of range for {n} rows")
    in_shape = a.shape
    # scan permutations and window regroupings gather with all-distinct
    # indices, where scatter-assign replaces the much slower np.add.at
    distinct = np.unique(idx).size == idx.size

    def backward(g):
        ga = np.zeros(in_shape, dtype=np.float64)
        if distinct:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return [ga]

    return record_op("gather_rows", (a,), a.data[idx], backward)


def concat_rows(parts) -> Tensor:
    """Concatenate along axis 0; shapes must agree on all other axes."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows of no tensors")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ShapeError("concat_rows operands disagree beyond axis 0")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return [g[offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return record_op("concat_rows", tuple(parts),
                     np.concatenate([p.data for p in parts], axis=0), backward)


def concat_last(parts) -> Tensor:
    """Concatenate along the trailing axis (feature concat for the head)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last of no tensors")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError("concat_last operands disagree before the last axis")
    sizes = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return [g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return record_op("concat_last", tuple(parts),
                     np.concatenate([p.data for p in parts], axis=-1), backward)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {n} rows")
    in_shape = a.shape

    def backward(g):
        ga = np.zeros(in_shape, dtype=np.float64)
        ga[start:stop] = g
        return [ga]

    return record_op("slice_rows", (a,), a.data[start:stop].copy(), backward)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[-1]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_last [{start}:{stop}] out of range for width {n}")
    in_shape = a.shape

    def backward(g):
        ga = np.zeros(in_shape, dtype=np.float64)
        ga[..., start:stop] = g
        return [ga]

    return record_op("slice_last", (a,), a.data[..., start:stop].copy(), backward)


def pad_bottom_right(a, extra_h: int, extra_w: int) -> Tensor:
    """Zero-pad an [H,W,C] map on its bottom and right edges."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"pad_bottom_right needs [H,W,C], got {a.shape}")
    if extra_h < 0 or extra_w < 0:
        raise ShapeError("pad extents must be non-negative")
    h, w, _ = a.shape
    out = np.pad(a.data, ((0, extra_h), (0, extra_w), (0, 0)))
    return record_op("pad_bottom_right", (a,), out, lambda g: [g[:h, :w]])


def crop_top_left(a, h: int, w: int) -> Tensor:
    """Keep the top-left h x w region of an [H,W,...] array."""
    a = _as_tensor(a)
    if a.ndim < 2 or h > a.shape[0] or w > a.shape[1]:
        raise ShapeError(f"crop to ({h},{w}) out of range for {a.shape}")
    in_shape = a.shape

    def backward(g):
        ga = np.zeros(in_shape, dtype=np.float64)
        ga[:h, :w] = g
        return [ga]

    return record_op("crop_top_left", (a,), a.data[:h, :w].copy(), backward)


def avg_pool_seq(a) -> Tensor:
    """Mean over the sequence axis: [L,C] -> [C].

    Columns are summed exactly (fsum), so the result is bitwise invariant
    under any permutation of the rows; conditioning on pooled text must not
    depend on token order even in the last ulp.
    """
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"avg_pool_seq needs [L,C], got {a.shape}")
    n = a.shape[0]
    if n < 1:
        raise ShapeError("avg_pool_seq over an empty sequence")
    out = np.array([math.fsum(col) for col in a.data.T]) / n

    def backward(g):
        return [np.broadcast_to(g / n, (n, g.shape[0])).copy()]

    return record_op("avg_pool_seq", (a,), out, backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape
    return record_op("sum_all", (a,), np.asarray(a.data.sum()),
                     lambda g: [np.broadcast_to(g, in_shape).copy()])


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape
    n = a.size
    if n == 0:
        raise ShapeError("mean_all of an empty tensor")
    return record_op("mean_all", (a,), np.asarray(a.data.mean()),
                     lambda g: [np.broadcast_to(g / n, in_shape).copy()])


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine.

    A constant row has zero variance: its normalized value is 0 and the
    output is the bias (eps keeps the denominator finite).
    """
    a = _as_tensor(a)
    gain = _as_tensor(gain)
    bias = _as_tensor(bias)
    if a.ndim < 1:
        raise ShapeError("layer_norm input needs a trailing axis")
    c = a.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm gain/bias must be ({c},), got {gain.shape}/{bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def backward(g):
        ga = None
        if a.requires_grad:
            dxhat = g * gd
            # standard layer-norm backward, vectorized over leading axes
            ga = inv * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, c).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(-1, c).sum(axis=0) if bias.requires_grad else None
        return [ga, ggain, gbias]

    return record_op("layer_norm", (a, gain, bias), out, backward)


def upsample_bilinear(a, factor: int) -> Tensor:
    """Bilinearly upsample [H,W,C] by an integer factor (half-pixel centers)."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"upsample_bilinear needs [H,W,C], got {a.shape}")
    f = int(factor)
    if f < 1:
        raise ShapeError("upsample factor must be >= 1")
    h, w, c = a.shape

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) / f - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        t = src - lo
        return lo, hi, t

    r0, r1, tr = axis_weights(h, h * f)
    c0, c1, tc = axis_weights(w, w * f)
    x = a.data
    trc = tr[:, None, None]
    tcc = tc[None, :, None]
    top = x[r0][:, c0] * (1 - tcc) + x[r0][:, c1] * tcc
    bot = x[r1][:, c0] * (1 - tcc) + x[r1][:, c1] * tcc
    out = top * (1 - trc) + bot * trc
    in_shape = a.shape

    def backward(g):
        ga = np.zeros(in_shape, dtype=np.float64)
        rr0 = np.repeat(r0, w * f)
        rr1 = np.repeat(r1, w * f)
        cc0 = np.tile(c0, h * f)
        cc1 = np.tile(c1, h * f)
        wr = np.repeat(tr, w * f)[:, None]
        wc = np.tile(tc, h * f)[:, None]
        gf = g.reshape(-1, c)
        np.add.at(ga, (rr0, cc0), gf * (1 - wr) * (1 - wc))
        np.add.at(ga, (rr0, cc1), gf * (1 - wr) * wc)
        np.add.at(ga, (rr1, cc0), gf * wr * (1 - wc))
        np.add.at(ga, (rr1, cc1), gf * wr * wc)
        return [ga]

    return record_op("upsample_bilinear", (a,), out, backward)


# -- backward pass -------------------------------------------------------------


def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.op is None or id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for src in node.op.inputs:
            if src.op is not None and id(src) not in visited:
                stack.append((src, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False):
    """Accumulate d(loss)/d(leaf) into .grad of every grad-tracking leaf.

    Unless ``retain_graph`` is set the op records are dropped afterwards,
    so a second backward through the same graph raises.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.op is None:
        if loss._detached:
            raise GraphError("backward on a detached tensor")
        if loss._consumed:
            raise GraphError("graph already consumed; re-run the forward pass "
                             "or use retain_graph=True")
        if loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
        return  # plain constant: nothing to do

    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.op.backward(g)
        for src, ig in zip(node.op.inputs, in_grads):
            if ig is None or not src.requires_grad:
                continue
            if src.op is None:
                src._accumulate(ig)
            else:
                key = id(src)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig.copy() if ig.base is not None else ig
    if not retain_graph:
        for node in order:
            node.op = None
            node._consumed = True


def graph_nodes(root: Tensor):
    """All recorded tensors reachable from root, in creation order."""
    return sorted(_toposort(root), key=lambda t: t.op.seq)


def first_nonfinite(root: Tensor):
    """Name the earliest op whose output went non-finite, or None.

    Walks the live graph in creation order, so the reported op is the one
    that introduced the NaN/inf rather than a downstream casualty.
    """
    for node in graph_nodes(root):
        if not np.all(np.isfinite(node.data)):
            return node.op.kind
    if not np.all(np.isfinite(root.data)):
        return "input"
    return None


# -- finite-difference checking --------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    entries_checked: int
    tol: float
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f, leaves, step: float = 1e-5, tol: float = 1e-5,
               max_entries_per_leaf=None, rng=None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*leaves)`` to central differences.

    ``f`` is evaluated twice up front; if the two values differ bitwise the
    function is not deterministic and the comparison would be meaningless,
    so that raises ``GraphError``.  Relative error uses
    |num - ana| / max(|num|, |ana|, 1e-8).  When ``max_entries_per_leaf``
    is given, that many entries per leaf are sampled with ``rng``.
    """
    leaves = list(leaves)
    for leaf in leaves:
        if not leaf.requires_grad:
            raise GraphError("grad_check leaves must require grad")

    y0 = f(*leaves)
    if y0.size != 1:
        raise GraphError("grad_check target must be scalar")
    with no_grad():
        y1 = f(*leaves)
    if y0.data.tobytes() != y1.data.tobytes():
        raise GraphError("grad_check target is not deterministic")

    for leaf in leaves:
        leaf.zero_grad()
    backward(y0)

    max_rel = 0.0
    worst = None
    checked = 0
    for li, leaf in enumerate(leaves):
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        ana = np.asarray(ana).reshape(-1)
        n = leaf.data.size
        if max_entries_per_leaf is not None and n > max_entries_per_leaf:
            if rng is None:
                rng = np.random.default_rng(0)
            entries = rng.choice(n, size=max_entries_per_leaf, replace=False)
        else:
            entries = range(n)
        flat = leaf.data.reshape(-1)
        for ei in entries:
            orig = flat[ei]
            with no_grad():
                flat[ei] = orig + step
                yp = f(*leaves).item()
                flat[ei] = orig - step
                ym = f(*leaves).item()
            flat[ei] = orig
            num = (yp - ym) / (2.0 * step)
            a = float(ana[ei])
            rel = abs(num - a) / max(abs(num), abs(a), 1e-8)
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (li, int(ei), a, num)
    return GradCheckReport(max_rel_err=max_rel, entries_checked=checked,
                           tol=tol, worst=worst)
