"""End-to-end referring-segmentation model and its loss/metric contracts.

Toy patch encoder (flattened p x p patches through one linear layer plus a
learned 2-d position table), token embedding + position for the text, four
saccade/fixation layers over a feature map padded to a window-divisible
grid, and a top-down head that projects the deepest map first and folds in
each shallower map by concat+project, ending in one logit per grid cell
that gets bilinearly upsampled back to image resolution and cropped.

Loss is alpha * Dice + (1 - alpha) * Focal on the sigmoid probabilities;
focal uses the softplus form of -log p_t so saturated logits stay exact,
and gamma = 0 with unit alpha collapses to plain BCE.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import (
    Tensor, ShapeError, add, mul, scale, neg, reshape, matmul, sigmoid,
    softplus, silu, sum_all, mean_all, pow_const, gather_rows, slice_rows,
    concat_last, pad_bottom_right, crop_top_left, upsample_bilinear,
)
from .sflayer import (
    SfLayerState, init_sf_layer, sf_layer,
    arrangement_repeats, ARRANGEMENTS,
)


@dataclass
class ModelConfig:
    vocab_size: int
    image_h: int = 32
    image_w: int = 32
    patch: int = 2
    channels: int = 32
    d_state: int = 4
    expand: int = 2
    window: int = 4
    layers: int = 4
    text_len_max: int = 16
    arrangement: str = "fixate"
    repeat_k: int = 4
    loss_alpha: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ShapeError("image size must be divisible by the patch size")
        if self.arrangement not in ARRANGEMENTS:
            raise ShapeError(f"unknown arrangement {self.arrangement!r}")
        if not 0.0 <= self.loss_alpha <= 1.0:
            raise ValueError("loss_alpha must lie in [0,1]")
        if self.focal_gamma < 0 or self.focal_alpha <= 0:
            raise ValueError("focal parameters out of range")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch

    @property
    def padded_h(self) -> int:
        return -(-self.grid_h // self.window) * self.window

    @property
    def padded_w(self) -> int:
        return -(-self.grid_w // self.window) * self.window

    @property
    def repeats(self) -> int:
        return arrangement_repeats(self.arrangement, self.padded_h,
                                   self.padded_w, self.window, self.repeat_k)


@dataclass
class MaskLogits:
    """Full-resolution logits for one image/expression pair."""

    logits: Tensor  # [image_h, image_w]

    def probabilities(self) -> np.ndarray:
        return sigmoid(self.logits).data

    def binary(self) -> np.ndarray:
        # prob > 0.5 is exactly logit > 0
        return self.logits.data > 0.0


@dataclass
class HeadParams:
    proj_top_w: Tensor
    proj_top_b: Tensor
    merge_w: list  # per level 3,2,1: [2C, C]
    merge_b: list
    out_w: Tensor  # [C, 1]
    out_b: Tensor  # [1]

    def named(self, prefix: str):
        yield prefix + ".proj_top_w", self.proj_top_w
        yield prefix + ".proj_top_b", self.proj_top_b
        for i, (w, b) in enumerate(zip(self.merge_w, self.merge_b)):
            yield f"{prefix}.merge{i}_w", w
            yield f"{prefix}.merge{i}_b", b
        yield prefix + ".out_w", self.out_w
        yield prefix + ".out_b", self.out_b


@dataclass
class ModelParams:
    patch_w: Tensor
    patch_b: Tensor
    pos_img: Tensor
    tok_emb: Tensor
    pos_txt: Tensor
    layers: list  # of SfLayerParams
    head: HeadParams

    def named(self):
        yield "encoder.patch_w", self.patch_w
        yield "encoder.patch_b", self.patch_b
        yield "encoder.pos_img", self.pos_img
        yield "encoder.tok_emb", self.tok_emb
        yield "encoder.pos_txt", self.pos_txt
        for i, lp in enumerate(self.layers):
            yield from lp.named(f"layers.{i}")
        yield from self.head.named("head")


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    c = config.channels
    pdim = config.patch * config.patch * 3

    def lin(fan_in, shape):
        return Tensor(rng.normal(size=shape) / np.sqrt(fan_in),
                      requires_grad=True)

    layers = [
        init_sf_layer(rng, c, config.expand, config.d_state, config.window,
                      config.repeats, config.arrangement, config.repeat_k)
        for _ in range(config.layers)
    ]
    n_merge = max(config.layers - 1, 0)
    head = HeadParams(
        proj_top_w=lin(c, (c, c)),
        proj_top_b=Tensor(np.zeros(c), requires_grad=True),
        merge_w=[lin(2 * c, (2 * c, c)) for _ in range(n_merge)],
        merge_b=[Tensor(np.zeros(c), requires_grad=True)
                 for _ in range(n_merge)],
        out_w=lin(c, (c, 1)),
        out_b=Tensor(np.zeros(1), requires_grad=True),
    )
    return ModelParams(
        patch_w=lin(pdim, (pdim, c)),
        patch_b=Tensor(np.zeros(c), requires_grad=True),
        pos_img=Tensor(rng.normal(size=(config.grid_h * config.grid_w, c))
                       * 0.02, requires_grad=True),
        tok_emb=Tensor(rng.normal(size=(config.vocab_size, c)) * 0.02,
                       requires_grad=True),
        pos_txt=Tensor(rng.normal(size=(config.text_len_max, c)) * 0.02,
                       requires_grad=True),
        layers=layers,
        head=head,
    )


def _patch_index(config: ModelConfig) -> np.ndarray:
    h, w, p = config.image_h, config.image_w, config.patch
    idx = np.arange(h * w * 3, dtype=np.int64).reshape(h, w, 3)
    rows = [idx[i:i + p, j:j + p, :].reshape(-1)
            for i in range(0, h, p) for j in range(0, w, p)]
    return np.concatenate(rows)


def encode_image(image, config: ModelConfig, params: ModelParams) -> Tensor:
    """[H,W,3] floats in [0,1] -> [grid_h, grid_w, C] feature map."""
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.shape != (config.image_h, config.image_w, 3):
        raise ShapeError(f"image must be {(config.image_h, config.image_w, 3)},"
                         f" got {img.shape}")
    if img.data.min() < -1e-9 or img.data.max() > 1.0 + 1e-9:
        raise ValueError("image values must lie in [0,1]")
    flat = reshape(img, (img.size,))
    patches = reshape(gather_rows(flat, _patch_index(config)),
                      (config.grid_h * config.grid_w,
                       config.patch * config.patch * 3))
    feat = add(add(matmul(patches, params.patch_w), params.patch_b),
               params.pos_img)
    return reshape(feat, (config.grid_h, config.grid_w, config.channels))


def encode_text(tokens, config: ModelConfig, params: ModelParams) -> Tensor:
    """Token ids -> [L, C] embeddings with learned positions."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise ShapeError("token sequence must be a non-empty 1-d list")
    if ids.size > config.text_len_max:
        raise ShapeError(f"expression longer than {config.text_len_max} tokens")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    emb = gather_rows(params.tok_emb, ids)
    pos = slice_rows(params.pos_txt, 0, ids.size)
    return add(emb, pos)


def forward(image, tokens, config: ModelConfig, params: ModelParams):
    """Run the full model; returns (MaskLogits, per-layer feature maps)."""
    f_v = encode_image(image, config, params)
    f_v = pad_bottom_right(f_v, config.padded_h - config.grid_h,
                           config.padded_w - config.grid_w)
    state = SfLayerState(f_v=f_v, f_t=encode_text(tokens, config, params))
    feats = []
    for lp in params.layers:
        state = sf_layer(state, lp)
        feats.append(state.f_v)
    grid_logits = seg_head(feats, params.head)
    up = upsample_bilinear(grid_logits, config.patch)
    full = crop_top_left(up, config.image_h, config.image_w)
    return MaskLogits(logits=reshape(full, (config.image_h, config.image_w))), feats


def seg_head(feats, head: HeadParams) -> Tensor:
    """Top-down decode: deepest map first, each shallower map folded in by
    concat + linear + silu; one logit per grid cell."""
    if len(feats) != len(head.merge_w) + 1:
        raise ShapeError(f"head built for {len(head.merge_w) + 1} levels, "
                         f"got {len(feats)}")
    ph, pw, c = feats[-1].shape
    seqs = [reshape(f, (ph * pw, c)) for f in feats]
    g = silu(add(matmul(seqs[-1], head.proj_top_w), head.proj_top_b))
    for i, level in enumerate(range(len(feats) - 2, -1, -1)):
        merged = concat_last([seqs[level], g])
        g = silu(add(matmul(merged, head.merge_w[i]), head.merge_b[i]))
    logits = add(matmul(g, head.out_w), head.out_b)
    return reshape(logits, (ph, pw, 1))


# -- losses ---------------------------------------------------------------------


def _gt_tensor(gt: np.ndarray, shape) -> Tensor:
    gt = np.asarray(gt)
    if gt.shape != tuple(shape):
        raise ShapeError(f"mask shape {gt.shape} != logits shape {shape}")
    vals = np.unique(gt)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("ground-truth mask must be binary (0/1)")
    return Tensor(gt.astype(np.float64))


def dice_loss(logits: Tensor, gt: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - (2|P intersect G| + s)/(|P| + |G| + s) on soft probabilities."""
    g = _gt_tensor(gt, logits.shape)
    p = sigmoid(logits)
    inter = sum_all(mul(p, g))
    num = add(scale(inter, 2.0), Tensor(smooth))
    den = add(add(sum_all(p), sum_all(g)), Tensor(smooth))
    return 1.0 - num / den


def focal_loss(logits: Tensor, gt: np.ndarray, gamma: float = 2.0,
               alpha: float = 0.25) -> Tensor:
    """Mean focal term, computed from softplus so saturation stays exact.

    -log p_t = g*softplus(-x) + (1-g)*softplus(x); the (1-p_t)^gamma factor
    is skipped entirely at gamma = 0, where alpha = 1 makes this plain BCE.
    alpha is a uniform scale (the BCE identity pins that convention).
    """
    g = _gt_tensor(gt, logits.shape)
    g_inv = Tensor(1.0 - g.data)
    ce = add(mul(g, softplus(neg(logits))), mul(g_inv, softplus(logits)))
    if gamma == 0.0:
        px = ce
    else:
        p = sigmoid(logits)
        one_minus_pt = add(mul(g, 1.0 - p), mul(g_inv, p))
        px = mul(pow_const(one_minus_pt, gamma), ce)
    return mean_all(scale(px, alpha))


def bce_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    g = _gt_tensor(gt, logits.shape)
    term = add(mul(g, softplus(neg(logits))),
               mul(Tensor(1.0 - g.data), softplus(logits)))
    return mean_all(term)


def composite_loss(logits: Tensor, gt: np.ndarray,
                   config: ModelConfig) -> Tensor:
    """alpha * Dice + (1 - alpha) * Focal."""
    d = dice_loss(logits, gt)
    f = focal_loss(logits, gt, config.focal_gamma, config.focal_alpha)
    return add(scale(d, config.loss_alpha), scale(f, 1.0 - config.loss_alpha))


# -- metrics ----------------------------------------------------------------------


def _validate_pairs(preds, gts):
    if len(preds) != len(gts):
        raise ShapeError("prediction/ground-truth count mismatch")
    if not preds:
        raise ShapeError("metrics need at least one pair")
    out = []
    for p, g in zip(preds, gts):
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        if p.shape != g.shape:
            raise ShapeError("mask shape mismatch inside a pair")
        out.append((p, g))
    return out


def iou_pair(pred, gt) -> float:
    """Intersection over union; both masks empty counts as a perfect 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def metric_oiou(preds, gts) -> float:
    """Overall IoU: summed intersections over summed unions."""
    pairs = _validate_pairs(preds, gts)
    inter = sum(np.logical_and(p, g).sum() for p, g in pairs)
    union = sum(np.logical_or(p, g).sum() for p, g in pairs)
    if union == 0:
        return 1.0
    return float(inter / union)


def metric_miou(preds, gts) -> float:
    pairs = _validate_pairs(preds, gts)
    return float(np.mean([iou_pair(p, g) for p, g in pairs]))


def metric_prec_at(preds, gts, threshold: float) -> float:
    """Fraction of pairs with IoU strictly above the threshold."""
    pairs = _validate_pairs(preds, gts)
    return float(np.mean([iou_pair(p, g) > threshold for p, g in pairs]))


# -- checkpoints ---------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SFRK"
CHECKPOINT_VERSION = 1


def config_json(config: ModelConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)


def save_checkpoint(path, config: ModelConfig, params: ModelParams):
    """Binary checkpoint: magic, version, config JSON, named f64 records.

    Everything is little-endian and parameter records are written in the
    model's canonical named order, so identical states produce identical
    bytes.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = config_json(config).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    named = list(params.named())
    buf.write(struct.pack("<I", len(named)))
    for name, tensor in named:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", tensor.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Read a checkpoint back into (config, params)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", view, 8)
    off = 12
    config = ModelConfig(**json.loads(bytes(view[off:off + clen]).decode()))
    off += clen
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    loaded = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + nlen]).decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=off)
        off += 8 * n
        loaded[name] = arr.reshape(shape).copy()
    if off != len(raw):
        raise CheckpointError("trailing bytes after the last parameter record")

    params = init_model(config, seed=0)
    names = {name for name, _ in params.named()}
    if names != set(loaded):
        missing = names - set(loaded)
        extra = set(loaded) - names
        raise CheckpointError(f"parameter names do not match the config "
                              f"(missing {sorted(missing)[:3]}, "
                              f"extra {sorted(extra)[:3]})")
    for name, tensor in params.named():
        if tensor.shape != loaded[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        tensor.data[...] = loaded[name]
    return config, params
