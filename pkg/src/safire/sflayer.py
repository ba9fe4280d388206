"""Saccade and fixation: the two passes that make up one layer.

Saccade is the cheap global step: pool the text into one vector, read three
per-channel vectors [alpha, beta, gamma] off a linear head, modulate the
feature map (alpha*F + beta), cross-scan it with a 2-d VSSM block, and add
gamma-scaled output back onto the untouched map.  The head initializes to
alpha=1, beta=0, gamma=0 (weights zero, bias carries the constants), so a
fresh saccade is exactly the identity and the modulation path fades in as
gamma learns away from zero.

Fixation is the local grouped pass: cut the map into non-overlapping w x w
windows (row-major), interleave the full text after every window to form
the hybrid sequence [W1, T, W2, T, ..., WP, T], run a 1-d bidirectional
VSSM over it, then recover: image tokens go back through the inverse
permutation, and the P processed text repeats average into one text
sequence under learnable per-repeat weights (initialized to 1).

Arrangement variants for the ablation keep the same block and recovery but
change the interleave: vanilla appends the text once after all image
tokens, repeat-k appends k copies, fixate-w is the windowed interleave.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, ShapeError, add, mul, scale, reshape, matmul, slice_rows,
    gather_rows, concat_rows, avg_pool_seq,
)
from .ssm import VssmBlockParams, init_vssm_block, vssm_block

ARRANGEMENTS = ("fixate", "vanilla", "repeat")


@dataclass
class SfLayerState:
    """What flows between layers: a feature map and a text sequence."""

    f_v: Tensor  # [H,W,C]
    f_t: Tensor  # [L,C]


# -- saccade -------------------------------------------------------------------


@dataclass
class SaccadeParams:
    w_pool: Tensor  # [C, 3C] pooled text -> [alpha, beta, gamma]
    b_pool: Tensor  # [3C]
    vssm: VssmBlockParams

    def named(self, prefix: str):
        yield prefix + ".w_pool", self.w_pool
        yield prefix + ".b_pool", self.b_pool
        yield from self.vssm.named(prefix + ".vssm")


def init_saccade(rng: np.random.Generator, width: int, expand: int,
                 d_state: int) -> SaccadeParams:
    # zero weights + constant bias make the whole pass an exact identity
    b = np.concatenate([np.ones(width), np.zeros(width), np.zeros(width)])
    return SaccadeParams(
        w_pool=Tensor(np.zeros((width, 3 * width)), requires_grad=True),
        b_pool=Tensor(b, requires_grad=True),
        vssm=init_vssm_block(rng, width, expand, d_state),
    )


def saccade(state: SfLayerState, params: SaccadeParams) -> SfLayerState:
    h, w, c = state.f_v.shape
    pooled = avg_pool_seq(state.f_t)
    head = add(matmul(reshape(pooled, (1, c)), params.w_pool), params.b_pool)
    head = reshape(head, (3 * c,))
    alpha = slice_rows(head, 0, c)
    beta = slice_rows(head, c, 2 * c)
    gamma = slice_rows(head, 2 * c, 3 * c)

    seq = reshape(state.f_v, (h * w, c))
    modulated = add(mul(seq, alpha), beta)
    scanned = vssm_block(modulated, params.vssm, layout=(h, w))
    out = add(mul(scanned, gamma), seq)
    return SfLayerState(f_v=reshape(out, (h, w, c)), f_t=state.f_t)


# -- grouping and the hybrid sequence ----------------------------------------------


@dataclass
class GroupLayout:
    grid_h: int
    grid_w: int
    window: int
    perm: np.ndarray  # window-major visit order over the flat row-major map

    @property
    def windows(self) -> int:
        return (self.grid_h // self.window) * (self.grid_w // self.window)


def group(f_v: Tensor, window: int):
    """Split [H,W,C] into non-overlapping window x window tiles, row-major.

    Returns (list of P [w*w, C] tensors, GroupLayout).  H and W must both
    be divisible by the window size.
    """
    h, w, c = f_v.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"window {window} does not tile a {h}x{w} map")
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    blocks = [idx[i:i + window, j:j + window].reshape(-1)
              for i in range(0, h, window)
              for j in range(0, w, window)]
    perm = np.concatenate(blocks)
    layout = GroupLayout(grid_h=h, grid_w=w, window=window, perm=perm)
    permuted = gather_rows(reshape(f_v, (h * w, c)), perm)
    ww = window * window
    windows = [slice_rows(permuted, k * ww, (k + 1) * ww)
               for k in range(layout.windows)]
    return windows, layout


def recover(rows: Tensor, layout: GroupLayout) -> Tensor:
    """Inverse of group for image tokens: window-major rows back to [H,W,C]."""
    n = layout.grid_h * layout.grid_w
    if rows.shape[0] != n:
        raise ShapeError(f"expected {n} rows, got {rows.shape[0]}")
    flat = gather_rows(rows, np.argsort(layout.perm))
    return reshape(flat, (layout.grid_h, layout.grid_w, rows.shape[1]))


@dataclass
class ArrangementLayout:
    """Where every token of a hybrid sequence came from."""

    length: int
    text_len: int
    repeats: int               # how many text copies are interleaved
    recover_image: np.ndarray  # hybrid row of each flat image token
    text_positions: np.ndarray  # [repeats, text_len] hybrid rows
    group_layout: GroupLayout | None


def build_hybrid(windows, f_t: Tensor, group_layout: GroupLayout):
    """Interleave the full text after every window: [W1,T,...,WP,T]."""
    if not windows:
        raise ShapeError("build_hybrid needs at least one window")
    l_len = f_t.shape[0]
    parts = []
    image_rows = []
    text_rows = []
    off = 0
    for win in windows:
        ww = win.shape[0]
        parts.append(win)
        image_rows.append(np.arange(off, off + ww, dtype=np.int64))
        off += ww
        parts.append(f_t)
        text_rows.append(np.arange(off, off + l_len, dtype=np.int64))
        off += l_len
    hybrid = concat_rows(parts)
    window_major = np.concatenate(image_rows)
    layout = ArrangementLayout(
        length=off,
        text_len=l_len,
        repeats=len(windows),
        recover_image=window_major[np.argsort(group_layout.perm)],
        text_positions=np.stack(text_rows),
        group_layout=group_layout,
    )
    return hybrid, layout


def arrange_variant(f_v: Tensor, f_t: Tensor, variant: str, window: int,
                    repeat_k: int = 1):
    """Build the scan sequence for one arrangement variant.

    vanilla:  [I..I, T]          repeats=1
    repeat:   [I..I, T..T]       repeats=repeat_k
    fixate:   [W1, T, ..., WP, T] repeats=P (window count)
    """
    if variant not in ARRANGEMENTS:
        raise ShapeError(f"unknown arrangement {variant!r}")
    if variant == "fixate":
        windows, glayout = group(f_v, window)
        return build_hybrid(windows, f_t, glayout)
    h, w, c = f_v.shape
    n = h * w
    l_len = f_t.shape[0]
    reps = 1 if variant == "vanilla" else int(repeat_k)
    if reps < 1:
        raise ShapeError("repeat arrangement needs repeat_k >= 1")
    parts = [reshape(f_v, (n, c))] + [f_t] * reps
    hybrid = concat_rows(parts)
    layout = ArrangementLayout(
        length=n + reps * l_len,
        text_len=l_len,
        repeats=reps,
        recover_image=np.arange(n, dtype=np.int64),
        text_positions=np.stack([np.arange(n + r * l_len, n + (r + 1) * l_len,
                                           dtype=np.int64)
                                 for r in range(reps)]),
        group_layout=None,
    )
    return hybrid, layout


# -- fixation ------------------------------------------------------------------


@dataclass
class FixationParams:
    window: int
    arrangement: str
    repeat_k: int
    vssm: VssmBlockParams
    recover_w: Tensor  # [repeats] per-copy mixing weights

    def named(self, prefix: str):
        yield from self.vssm.named(prefix + ".vssm")
        yield prefix + ".recover_w", self.recover_w


def arrangement_repeats(variant: str, grid_h: int, grid_w: int, window: int,
                        repeat_k: int) -> int:
    if variant == "vanilla":
        return 1
    if variant == "repeat":
        return int(repeat_k)
    if grid_h % window or grid_w % window:
        raise ShapeError(f"window {window} does not tile {grid_h}x{grid_w}")
    return (grid_h // window) * (grid_w // window)


def init_fixation(rng: np.random.Generator, width: int, expand: int,
                  d_state: int, window: int, repeats: int,
                  arrangement: str = "fixate",
                  repeat_k: int = 1) -> FixationParams:
    return FixationParams(
        window=window,
        arrangement=arrangement,
        repeat_k=repeat_k,
        vssm=init_vssm_block(rng, width, expand, d_state),
        recover_w=Tensor(np.ones(repeats), requires_grad=True),
    )


def fixation(state: SfLayerState, params: FixationParams) -> SfLayerState:
    h, w, c = state.f_v.shape
    hybrid, lay = arrange_variant(state.f_v, state.f_t, params.arrangement,
                                  params.window, params.repeat_k)
    if params.recover_w.shape != (lay.repeats,):
        raise ShapeError(
            f"recover weights {params.recover_w.shape} != ({lay.repeats},)")
    out = vssm_block(hybrid, params.vssm, layout=None)

    img = reshape(gather_rows(out, lay.recover_image), (h, w, c))
    stack = gather_rows(out, lay.text_positions.reshape(-1))
    per_copy = reshape(stack, (lay.repeats, lay.text_len * c))
    mixed = matmul(reshape(params.recover_w, (1, lay.repeats)), per_copy)
    f_t = reshape(scale(mixed, 1.0 / lay.repeats), (lay.text_len, c))
    return SfLayerState(f_v=img, f_t=f_t)


# -- one full layer ----------------------------------------------------------------


@dataclass
class SfLayerParams:
    saccade: SaccadeParams
    fixation: FixationParams

    def named(self, prefix: str):
        yield from self.saccade.named(prefix + ".saccade")
        yield from self.fixation.named(prefix + ".fixation")


def init_sf_layer(rng: np.random.Generator, width: int, expand: int,
                  d_state: int, window: int, repeats: int,
                  arrangement: str = "fixate",
                  repeat_k: int = 1) -> SfLayerParams:
    return SfLayerParams(
        saccade=init_saccade(rng, width, expand, d_state),
        fixation=init_fixation(rng, width, expand, d_state, window, repeats,
                               arrangement, repeat_k),
    )


def sf_layer(state: SfLayerState, params: SfLayerParams) -> SfLayerState:
    """Global pass first, local pass second."""
    return fixation(saccade(state, params.saccade), params.fixation)
