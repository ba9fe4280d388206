"""Selective state-space scan and the VSSM block built on it.

The recurrence over a [T,C] sequence with N states per channel:

    h_t = exp(dt_t * A) * h_{t-1} + (dt_t * B_t) * x_t
    y_t = <C_t, h_t> + D * x_t

with A = -exp(a_log) diagonal (so every decay factor lies in (0,1) for
dt > 0), dt = softplus of a learned projection of x, and B_t/C_t learned
projections of x.  The zero-order-hold discretization keeps exp(dt*A) for
the state decay and the Euler step dt*B for the input (the usual
selective-scan simplification).

The hot loop is compiled with numba when available; the same functions run
uncompiled otherwise.  Its hand-derived backward is cross-checked against a
reference scan composed purely of generic tape ops (see reference_scan) and
against finite differences in the test suite.

Scan directions are bijective permutations of token order.  1-d sequences
scan forward/backward; 2-d maps additionally scan column-major and the two
reverses, which is what lets a later merge see every token from four sides.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, record_op, gather_rows, matmul, add, mul, scale, reshape,
    slice_rows, concat_rows, softplus, silu, layer_norm, backward,
    ShapeError, DomainError,
)

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap


class ScanDirection(enum.Enum):
    FORWARD_1D = "forward-1d"
    BACKWARD_1D = "backward-1d"
    ROWMAJOR_2D = "rowmajor-2d"
    ROWMAJOR_REVERSE_2D = "rowmajor-reverse-2d"
    COLMAJOR_2D = "colmajor-2d"
    COLMAJOR_REVERSE_2D = "colmajor-reverse-2d"


DIRECTIONS_1D = (ScanDirection.FORWARD_1D, ScanDirection.BACKWARD_1D)
DIRECTIONS_2D = (ScanDirection.ROWMAJOR_2D, ScanDirection.ROWMAJOR_REVERSE_2D,
                 ScanDirection.COLMAJOR_2D, ScanDirection.COLMAJOR_REVERSE_2D)


def direction_permutation(direction: ScanDirection, length: int,
                          layout=None) -> np.ndarray:
    """Token visit order for a scan direction, as a permutation of range(T).

    2-d directions need ``layout=(H, W)`` with H*W == length; the flat
    sequence is taken to be the row-major flattening of that map.
    """
    if direction in DIRECTIONS_1D:
        base = np.arange(length, dtype=np.int64)
        if direction is ScanDirection.BACKWARD_1D:
            base = base[::-1].copy()
        return base
    if layout is None:
        raise ShapeError(f"{direction.value} needs a 2-d layout")
    h, w = layout
    if h * w != length:
        raise ShapeError(f"layout {layout} does not cover length {length}")
    grid = np.arange(length, dtype=np.int64).reshape(h, w)
    if direction is ScanDirection.ROWMAJOR_2D:
        out = grid.reshape(-1)
    elif direction is ScanDirection.ROWMAJOR_REVERSE_2D:
        out = grid.reshape(-1)[::-1]
    elif direction is ScanDirection.COLMAJOR_2D:
        out = grid.T.reshape(-1)
    elif direction is ScanDirection.COLMAJOR_REVERSE_2D:
        out = grid.T.reshape(-1)[::-1]
    else:  # pragma: no cover
        raise ValueError(direction)
    return out.copy()


# -- parameters ----------------------------------------------------------------


@dataclass
class SsmParams:
    """Per-block scan parameters, shared by every direction of that block."""

    a_log: Tensor   # [D,N]; A = -exp(a_log)
    w_b: Tensor     # [D,N] input -> B_t
    w_c: Tensor     # [D,N] input -> C_t
    w_delta: Tensor  # [D,D] input -> dt pre-activation
    b_delta: Tensor  # [D]
    d_skip: Tensor   # [D]

    @property
    def d_model(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    def named(self, prefix: str):
        yield prefix + ".a_log", self.a_log
        yield prefix + ".w_b", self.w_b
        yield prefix + ".w_c", self.w_c
        yield prefix + ".w_delta", self.w_delta
        yield prefix + ".b_delta", self.b_delta
        yield prefix + ".d_skip", self.d_skip


def init_ssm(rng: np.random.Generator, d_model: int, d_state: int) -> SsmParams:
    # S4D-real style: n-th state decays with rate n+1, same for all channels
    a_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)),
                    (d_model, 1))
    w_b = rng.normal(size=(d_model, d_state)) / math.sqrt(d_model)
    w_c = rng.normal(size=(d_model, d_state)) / math.sqrt(d_model)
    w_delta = rng.normal(size=(d_model, d_model)) * (0.1 / math.sqrt(d_model))
    # bias chosen so softplus(b) lands log-uniformly in [1e-3, 1e-1]
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=d_model))
    b_delta = np.log(np.expm1(dt))
    d_skip = np.ones(d_model)
    return SsmParams(
        a_log=Tensor(a_log, requires_grad=True),
        w_b=Tensor(w_b, requires_grad=True),
        w_c=Tensor(w_c, requires_grad=True),
        w_delta=Tensor(w_delta, requires_grad=True),
        b_delta=Tensor(b_delta, requires_grad=True),
        d_skip=Tensor(d_skip, requires_grad=True),
    )


# -- discretization --------------------------------------------------------------


def discretize(delta: Tensor, params: SsmParams):
    """ZOH decay factors exp(dt*A) plus the Euler input scale (dt itself).

    Returns (a_bar [T,C,N], b_scale [T,C]).  dt must be strictly positive,
    which pins every a_bar into (0,1); dt -> 0 recovers a_bar -> 1 (the
    no-update limit).
    """
    if np.any(delta.data <= 0.0):
        raise DomainError("discretize needs strictly positive step sizes")
    a = -np.exp(params.a_log.data)
    a_bar_data = np.exp(delta.data[:, :, None] * a[None])
    a_log = params.a_log
    delta_data = delta.data

    def bwd(g):
        gdelta = (g * a_bar_data * a[None]).sum(axis=2) \
            if delta.requires_grad else None
        if a_log.requires_grad:
            ga = (g * a_bar_data * delta_data[:, :, None]).sum(axis=0)
            ga_log = ga * a  # dA/da_log = -exp(a_log) = A
        else:
            ga_log = None
        return [gdelta, ga_log]

    a_bar = record_op("discretize", (delta, a_log), a_bar_data, bwd)
    return a_bar, delta


# -- fused scan kernel -------------------------------------------------------------


def _scan_fwd_py(x, delta, B, Cm, A, D, h0):
    # abar is written out so the backward pass never recomputes the exps
    T, C = x.shape
    N = A.shape[1]
    hs = np.empty((T + 1, C, N))
    hs[0] = h0
    abar = np.empty((T, C, N))
    y = np.empty((T, C))
    for t in range(T):
        for c in range(C):
            dtc = delta[t, c]
            xtc = x[t, c]
            acc = 0.0
            for n in range(N):
                a_bar = math.exp(dtc * A[c, n])
                abar[t, c, n] = a_bar
                h = a_bar * hs[t, c, n] + dtc * B[t, n] * xtc
                hs[t + 1, c, n] = h
                acc += Cm[t, n] * h
            y[t, c] = acc + D[c] * xtc
    return y, hs, abar


def _scan_bwd_py(x, delta, B, Cm, A, D, hs, abar, gy, ghT):
    T, C = x.shape
    N = A.shape[1]
    gx = np.empty((T, C))
    gdelta = np.empty((T, C))
    gB = np.zeros((T, N))
    gC = np.zeros((T, N))
    gA = np.zeros((C, N))
    gD = np.zeros(C)
    dh = ghT.copy()
    for t in range(T - 1, -1, -1):
        for c in range(C):
            gyt = gy[t, c]
            dtc = delta[t, c]
            xtc = x[t, c]
            gD[c] += gyt * xtc
            gxa = gyt * D[c]
            gdt = 0.0
            for n in range(N):
                dh_tn = gyt * Cm[t, n] + dh[c, n]
                gC[t, n] += gyt * hs[t + 1, c, n]
                a_bar = abar[t, c, n]
                hprev = hs[t, c, n]
                gdt += dh_tn * (hprev * a_bar * A[c, n] + B[t, n] * xtc)
                gA[c, n] += dh_tn * hprev * a_bar * dtc
                gB[t, n] += dh_tn * dtc * xtc
                gxa += dh_tn * dtc * B[t, n]
                dh[c, n] = dh_tn * a_bar
            gx[t, c] = gxa
            gdelta[t, c] = gdt
    return gx, gdelta, gB, gC, gA, gD, dh


if _HAVE_NUMBA:
    _scan_fwd = njit(cache=True)(_scan_fwd_py)
    _scan_bwd = njit(cache=True)(_scan_bwd_py)
else:  # pragma: no cover
    _scan_fwd = _scan_fwd_py
    _scan_bwd = _scan_bwd_py


def scan_multiplies(t: int, c: int, n: int) -> int:
    """Multiply census of one _scan_fwd call.

    Per (t,c,n): dt*A, a_bar*h, dt*B, (dt B)*x, C*h -> 5.
    Per (t,c): D*x -> 1.
    """
    return t * c * (5 * n + 1)


class MultiplyCounter:
    """Instrumentation hook: counts scan multiplies while enabled.

    Usable as a context manager; entering resets the count.
    """

    def __init__(self):
        self.enabled = False
        self.total = 0

    def reset(self):
        self.total = 0

    def __enter__(self):
        self.reset()
        self.enabled = True
        return self

    def __exit__(self, *exc):
        self.enabled = False
        return False


multiply_counter = MultiplyCounter()


# -- the scan op ---------------------------------------------------------------------


def scan_projections(x: Tensor, params: SsmParams):
    """dt/B/C projections for a sequence in its original token order.

    These are row-wise maps, so they commute with any scan permutation;
    computing them once lets every direction of a block share the result.
    """
    delta = softplus(add(matmul(x, params.w_delta), params.b_delta))
    return delta, matmul(x, params.w_b), matmul(x, params.w_c)


def selective_scan(x: Tensor, params: SsmParams, direction: ScanDirection,
                   layout=None, h0: Tensor | None = None, projections=None):
    """Input-dependent scan of x [T,C] in the given direction.

    Returns (y [T,C] in the original token order, h_T [C,N] final state in
    scan order).  Both are differentiable through the fused kernel.
    ``projections`` takes a precomputed scan_projections(x, params) result.
    """
    if x.ndim != 2:
        raise ShapeError(f"selective_scan needs [T,C], got {x.shape}")
    t_len, c_dim = x.shape
    if c_dim != params.d_model:
        raise ShapeError(
            f"sequence width {c_dim} != scan width {params.d_model}")
    n_state = params.d_state
    if h0 is None:
        h0 = Tensor(np.zeros((c_dim, n_state)))
    elif h0.shape != (c_dim, n_state):
        raise ShapeError(f"h0 must be ({c_dim},{n_state}), got {h0.shape}")

    if projections is None:
        projections = scan_projections(x, params)
    delta_full, b_full, c_full = projections
    if direction is ScanDirection.FORWARD_1D:
        xp, delta, b_seq, c_seq = x, delta_full, b_full, c_full
    else:
        perm = direction_permutation(direction, t_len, layout)
        xp = gather_rows(x, perm)
        delta = gather_rows(delta_full, perm)
        b_seq = gather_rows(b_full, perm)
        c_seq = gather_rows(c_full, perm)

    if multiply_counter.enabled:
        multiply_counter.total += scan_multiplies(t_len, c_dim, n_state)

    a_log = params.a_log
    d_skip = params.d_skip
    a = -np.exp(a_log.data)
    y_data, hs, abar = _scan_fwd(xp.data, delta.data, b_seq.data, c_seq.data,
                                 a, d_skip.data, h0.data)
    flat = np.concatenate([y_data.reshape(-1), hs[t_len].reshape(-1)])
    saved = (xp.data, delta.data, b_seq.data, c_seq.data, a, d_skip.data,
             hs, abar)

    def bwd(g):
        gy = g[:t_len * c_dim].reshape(t_len, c_dim)
        ghT = g[t_len * c_dim:].reshape(c_dim, n_state)
        gx, gdelta, gb, gc, ga, gd, gh0 = _scan_bwd(
            saved[0], saved[1], saved[2], saved[3], saved[4], saved[5],
            saved[6], saved[7], np.ascontiguousarray(gy),
            np.ascontiguousarray(ghT))
        ga_log = ga * saved[4]  # chain through A = -exp(a_log)
        return [gx, gdelta, gb, gc, ga_log, gd, gh0]

    out = record_op("selective_scan",
                    (xp, delta, b_seq, c_seq, a_log, d_skip, h0), flat, bwd)
    y_perm = reshape(slice_rows(out, 0, t_len * c_dim), (t_len, c_dim))
    h_t = reshape(slice_rows(out, t_len * c_dim, out.size), (c_dim, n_state))
    if direction is ScanDirection.FORWARD_1D:
        return y_perm, h_t
    y = gather_rows(y_perm, np.argsort(perm))
    return y, h_t


def reference_scan(x: Tensor, params: SsmParams, direction: ScanDirection,
                   layout=None, h0: Tensor | None = None):
    """Same recurrence built from generic tape ops, one step per token.

    Slow path kept as the independent oracle for the fused kernel: its
    gradient comes from the generic tape, not the hand-written backward.
    """
    t_len, c_dim = x.shape
    n_state = params.d_state
    if h0 is None:
        h0 = Tensor(np.zeros((c_dim, n_state)))
    perm = direction_permutation(direction, t_len, layout)
    xp = gather_rows(x, perm)
    delta = softplus(add(matmul(xp, params.w_delta), params.b_delta))
    b_seq = matmul(xp, params.w_b)
    c_seq = matmul(xp, params.w_c)
    a_bar, b_scale = discretize(delta, params)

    h = h0
    rows = []
    for t in range(t_len):
        a_t = reshape(slice_rows(a_bar, t, t + 1), (c_dim, n_state))
        x_t = reshape(slice_rows(xp, t, t + 1), (c_dim,))
        dt_t = reshape(slice_rows(b_scale, t, t + 1), (c_dim,))
        b_t = reshape(slice_rows(b_seq, t, t + 1), (1, n_state))
        c_t = reshape(slice_rows(c_seq, t, t + 1), (n_state, 1))
        drive = matmul(reshape(mul(dt_t, x_t), (c_dim, 1)), b_t)
        h = add(mul(a_t, h), drive)
        y_t = add(reshape(matmul(h, c_t), (1, c_dim)),
                  reshape(mul(x_t, params.d_skip), (1, c_dim)))
        rows.append(y_t)
    y_perm = concat_rows(rows)
    y = gather_rows(y_perm, np.argsort(perm))
    return y, h


# -- VSSM block ------------------------------------------------------------------


@dataclass
class VssmBlockParams:
    """Pre-LN gated block: norm, expand, scan every direction, merge, gate,
    project back, residual."""

    ln_gain: Tensor
    ln_bias: Tensor
    w_in: Tensor    # [C,D]
    b_in: Tensor    # [D]
    w_gate: Tensor  # [C,D]
    b_gate: Tensor  # [D]
    ssm: SsmParams  # width D
    w_out: Tensor   # [D,C]
    b_out: Tensor   # [C]

    def named(self, prefix: str):
        yield prefix + ".ln_gain", self.ln_gain
        yield prefix + ".ln_bias", self.ln_bias
        yield prefix + ".w_in", self.w_in
        yield prefix + ".b_in", self.b_in
        yield prefix + ".w_gate", self.w_gate
        yield prefix + ".b_gate", self.b_gate
        yield from self.ssm.named(prefix + ".ssm")
        yield prefix + ".w_out", self.w_out
        yield prefix + ".b_out", self.b_out


def init_vssm_block(rng: np.random.Generator, width: int, expand: int,
                    d_state: int) -> VssmBlockParams:
    d = width * expand
    def lin(fan_in, shape):
        return Tensor(rng.normal(size=shape) / math.sqrt(fan_in),
                      requires_grad=True)
    return VssmBlockParams(
        ln_gain=Tensor(np.ones(width), requires_grad=True),
        ln_bias=Tensor(np.zeros(width), requires_grad=True),
        w_in=lin(width, (width, d)),
        b_in=Tensor(np.zeros(d), requires_grad=True),
        w_gate=lin(width, (width, d)),
        b_gate=Tensor(np.zeros(d), requires_grad=True),
        ssm=init_ssm(rng, d, d_state),
        w_out=lin(d, (d, width)),
        b_out=Tensor(np.zeros(width), requires_grad=True),
    )


def vssm_block(seq: Tensor, params: VssmBlockParams, layout=None) -> Tensor:
    """Bidirectional (1-d) or cross-scan (2-d) gated SSM block with residual.

    ``layout=None`` scans forward+backward; ``layout=(H,W)`` scans the four
    2-d orders.  Direction outputs are merged by arithmetic mean.
    """
    u = layer_norm(seq, params.ln_gain, params.ln_bias)
    main = add(matmul(u, params.w_in), params.b_in)
    gate = silu(add(matmul(u, params.w_gate), params.b_gate))
    dirs = DIRECTIONS_2D if layout is not None else DIRECTIONS_1D
    proj = scan_projections(main, params.ssm)
    total = None
    for d in dirs:
        y, _ = selective_scan(main, params.ssm, d, layout, projections=proj)
        total = y if total is None else add(total, y)
    merged = scale(total, 1.0 / len(dirs))
    out = add(matmul(mul(merged, gate), params.w_out), params.b_out)
    return add(seq, out)


# -- influence profile --------------------------------------------------------------


@dataclass
class FrozenScanParams:
    """Input-independent scan: fixed dt, B, C (the non-selective special case)."""

    a_log: np.ndarray  # [C,N]
    delta: np.ndarray  # [C] strictly positive
    b: np.ndarray      # [N]
    c: np.ndarray      # [N]
    d_skip: np.ndarray  # [C]


def influence_profile(frozen: FrozenScanParams, t_len: int,
                      d_max: int) -> np.ndarray:
    """|d y_T / d x_{T-d}| per lag d, via the tape, for a frozen scan.

    Returns the Frobenius norm over channels of each lag's Jacobian block,
    indexed d = 0..d_max.  The profile is input-independent because the
    frozen system is linear in x.  Lag 0 includes the direct d_skip term;
    pass d_skip = 0 to profile the recurrence memory alone.
    """
    if d_max >= t_len:
        raise ShapeError("d_max must be < sequence length")
    if np.any(frozen.delta <= 0.0):
        raise DomainError("frozen delta must be strictly positive")
    c_dim = frozen.a_log.shape[0]
    n_state = frozen.a_log.shape[1]

    params = SsmParams(
        a_log=Tensor(frozen.a_log),
        w_b=Tensor(np.zeros((c_dim, n_state))),
        w_c=Tensor(np.zeros((c_dim, n_state))),
        w_delta=Tensor(np.zeros((c_dim, c_dim))),
        b_delta=Tensor(np.log(np.expm1(frozen.delta))),
        d_skip=Tensor(frozen.d_skip),
    )
    # constant-B/C selective scan: zero projections give B_t = C_t = 0, so
    # feed the constants through the kernel by rebuilding its inputs directly
    x = Tensor(np.zeros((t_len, c_dim)), requires_grad=True)
    delta = Tensor(np.tile(frozen.delta, (t_len, 1)))
    b_seq = Tensor(np.tile(frozen.b, (t_len, 1)))
    c_seq = Tensor(np.tile(frozen.c, (t_len, 1)))
    a = -np.exp(frozen.a_log)
    h0 = Tensor(np.zeros((c_dim, n_state)))

    y_data, hs, abar = _scan_fwd(x.data, delta.data, b_seq.data, c_seq.data,
                                 a, frozen.d_skip, h0.data)
    flat = np.concatenate([y_data.reshape(-1), hs[t_len].reshape(-1)])
    saved = (x.data, delta.data, b_seq.data, c_seq.data, a, frozen.d_skip,
             hs, abar)

    def bwd(g):
        gy = g[:t_len * c_dim].reshape(t_len, c_dim)
        ghT = g[t_len * c_dim:].reshape(c_dim, n_state)
        gx, *_rest = _scan_bwd(saved[0], saved[1], saved[2], saved[3],
                               saved[4], saved[5], saved[6], saved[7],
                               np.ascontiguousarray(gy),
                               np.ascontiguousarray(ghT))
        return [gx] + [None] * 6

    out = record_op("selective_scan", (x, delta, b_seq, c_seq,
                                       params.a_log, params.d_skip, h0),
                    flat, bwd)
    y = reshape(slice_rows(out, 0, t_len * c_dim), (t_len, c_dim))

    sq = np.zeros(t_len)
    for ch in range(c_dim):
        x.zero_grad()
        y_last = slice_rows(y, t_len - 1, t_len)
        target = slice_rows(reshape(y_last, (c_dim,)), ch, ch + 1)
        backward(reshape(target, ()), retain_graph=True)
        sq += (x.grad ** 2).sum(axis=1)
        x.zero_grad()
    profile = np.sqrt(sq[::-1][:d_max + 1])
    return profile
