"""Training, evaluation, the arrangement ablation, and the cost benchmark.

The optimizer is decoupled-weight-decay Adam with a cosine-decayed learning
rate.  Training is deterministic given (config, dataset, seed): data order,
init streams, and the schedule are all pure functions of the seed, so two
runs produce byte-identical checkpoints and metric logs.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (ModelConfig, ModelParams, composite_loss, forward,
                    init_model, metric_miou, metric_oiou, metric_prec_at,
                    save_checkpoint)
from .sflayer import SfLayerState, arrangement_repeats, fixation, init_fixation
from .ssm import init_vssm_block, multiply_counter, vssm_block
from .tensor import Tensor, backward, first_nonfinite, no_grad


class TrainingError(RuntimeError):
    pass


# -- optimizer -----------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments plus the decoupled decay and cosine schedule knobs.

    ``horizon`` is the total number of update steps the cosine spans;
    None means a constant learning rate.
    """

    lr: float
    weight_decay: float
    horizon: int | None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optimizer(named: dict, lr: float, weight_decay: float,
                   horizon: int | None) -> OptimizerState:
    state = OptimizerState(lr=lr, weight_decay=weight_decay, horizon=horizon)
    for name, leaf in named.items():
        state.m[name] = np.zeros_like(leaf.data)
        state.v[name] = np.zeros_like(leaf.data)
    return state


def lr_at(state: OptimizerState, step: int) -> float:
    """Cosine decay: base at step 0, exactly 0 at the horizon."""
    if state.horizon is None:
        return state.lr
    t = min(max(step, 0), state.horizon)
    return state.lr * 0.5 * (1.0 + math.cos(math.pi * t / state.horizon))


def apply_update(state: OptimizerState, named: dict, grads: dict) -> None:
    """One optimizer step; parameters without a gradient are left alone.

    Weight decay is decoupled: it scales the parameter directly instead of
    being added to the gradient, so adaptive moments never see it.
    """
    lr = lr_at(state, state.step_count)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, leaf in named.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        leaf.data -= lr * (step + state.weight_decay * leaf.data)


# -- evaluation ----------------------------------------------------------------------

_PREC_LEVELS = (0.5, 0.7, 0.9)


def _predict(params: ModelParams, config: ModelConfig, sample):
    with no_grad():
        out, _ = forward(sample.image, sample.tokens, config, params)
    return out.binary()


def _metric_block(preds, gts) -> dict:
    block = {"oiou": metric_oiou(preds, gts), "miou": metric_miou(preds, gts)}
    for level in _PREC_LEVELS:
        block[f"p{int(level * 100)}"] = metric_prec_at(preds, gts, level)
    return block


def thread_count() -> int:
    env = os.environ.get("SAFIRE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def evaluate(params: ModelParams, config: ModelConfig, samples,
             threads: int | None = None) -> dict:
    """Overall and per-mode oIoU / mIoU / P@{50,70,90} on a sample list.

    The model is read-only here, so samples are scored in parallel; the
    aggregation order is fixed by sample order either way.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty sample list")
    for s in samples:
        if any(t >= config.vocab_size for t in s.tokens):
            raise ValueError(
                f"vocabulary mismatch: token id {max(s.tokens)} outside the "
                f"model's vocabulary of {config.vocab_size}")
    threads = threads or thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(
                lambda s: _predict(params, config, s), samples))
    else:
        preds = [_predict(params, config, s) for s in samples]
    gts = [s.mask for s in samples]

    report = _metric_block(preds, gts)
    report["n"] = len(samples)
    per_mode = {}
    for mode in sorted({s.mode for s in samples}):
        idx = [i for i, s in enumerate(samples) if s.mode == mode]
        block = _metric_block([preds[i] for i in idx], [gts[i] for i in idx])
        block["n"] = len(idx)
        per_mode[mode] = block
    report["per_mode"] = per_mode
    return report


# -- training ------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    log: list


def _batched(order, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def train(config: ModelConfig, train_set, val_set, epochs: int, seed: int,
          lr: float = 1e-3, weight_decay: float = 1e-4, batch_size: int = 8,
          log_path=None, checkpoint_path=None,
          threads: int | None = None) -> TrainResult:
    """Train from scratch; returns final parameters and the per-epoch log.

    Gradients are averaged over each batch of size ``batch_size``.  The
    cosine horizon is the full run, so the learning rate reaches 0 on the
    last step.  Each epoch appends one record with the validation metrics,
    the mean training loss, and the current learning rate.  A non-finite
    loss aborts with the earliest offending op named.
    """
    if not train_set:
        raise ValueError("empty training set")
    if epochs < 1:
        raise ValueError("epochs must be positive")
    params = init_model(config, seed)
    named = dict(params.named())
    steps_per_epoch = math.ceil(len(train_set) / batch_size)
    opt = init_optimizer(named, lr, weight_decay,
                         horizon=epochs * steps_per_epoch)

    log = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(epochs):
            order = np.random.default_rng([seed, epoch]).permutation(
                len(train_set))
            epoch_loss = 0.0
            for batch in _batched(order, batch_size):
                for leaf in named.values():
                    leaf.grad = None
                for i in batch:
                    sample = train_set[int(i)]
                    out, _ = forward(sample.image, sample.tokens, config,
                                     params)
                    loss = composite_loss(out.logits, sample.mask, config)
                    if not np.isfinite(loss.data):
                        bad = first_nonfinite(loss)
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}; first "
                            f"non-finite op: {bad}")
                    if loss.op is None:
                        raise TrainingError(
                            "training loss recorded no graph; gradients "
                            "cannot flow (was the forward pass run under "
                            "no_grad?)")
                    backward(loss)
                    epoch_loss += float(loss.data)
                grads = {name: leaf.grad / len(batch)
                         for name, leaf in named.items()
                         if leaf.grad is not None}
                apply_update(opt, named, grads)

            record = {"epoch": epoch, "split": "val",
                      "loss": epoch_loss / len(train_set),
                      "lr": lr_at(opt, opt.step_count)}
            metrics = evaluate(params, config, val_set, threads=threads)
            record.update(
                {k: metrics[k] for k in
                 ("oiou", "miou", "p50", "p70", "p90", "per_mode")})
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, config, params)
    return TrainResult(params=params, log=log)


# -- arrangement ablation ------------------------------------------------------------


def parse_variant(name: str) -> dict:
    """'vanilla', 'repeat-k', or 'fixate-w' -> ModelConfig overrides."""
    if name == "vanilla":
        return {"arrangement": "vanilla"}
    kind, _, num = name.partition("-")
    if kind in ("repeat", "fixate") and num.isdigit() and int(num) > 0:
        if kind == "repeat":
            return {"arrangement": "repeat", "repeat_k": int(num)}
        return {"arrangement": "fixate", "window": int(num)}
    raise ValueError(f"unknown arrangement variant {name!r}")


DEFAULT_VARIANTS = ("vanilla", "repeat-4", "fixate-2", "fixate-4", "fixate-8")


def ablate_arrangement(config: ModelConfig, train_set, test_set,
                       variants=DEFAULT_VARIANTS, seeds=(0, 1, 2),
                       epochs: int = 15, csv_path=None, lr: float = 1e-3,
                       threads: int | None = None) -> list:
    """Train every variant under identical data/seeds; score ambiguous modes.

    Returns one row per variant with per-seed and mean +- sd oIoU/mIoU on
    the non-simple test samples.  The sd is the sample standard deviation
    over seeds, which is why at least 3 seeds are required.
    """
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds")
    ambiguous = [s for s in test_set if s.mode != "simple"]
    if not ambiguous:
        raise ValueError("test set has no ambiguous-mode samples")
    val_probe = ambiguous[:min(len(ambiguous), 8)]

    rows = []
    for variant in variants:
        cfg = replace(config, **parse_variant(variant))
        oious, mious = [], []
        for seed in seeds:
            result = train(cfg, train_set, val_probe, epochs, seed,
                           lr=lr, threads=threads)
            metrics = evaluate(result.params, cfg, ambiguous,
                               threads=threads)
            oious.append(metrics["oiou"])
            mious.append(metrics["miou"])
        rows.append({
            "variant": variant,
            "seeds": len(seeds),
            "oiou_mean": float(np.mean(oious)),
            "oiou_sd": float(np.std(oious, ddof=1)),
            "miou_mean": float(np.mean(mious)),
            "miou_sd": float(np.std(mious, ddof=1)),
            "oiou_per_seed": [float(x) for x in oious],
        })
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["variant", "seeds", "oiou_mean", "oiou_sd",
                             "miou_mean", "miou_sd", "oiou_per_seed"])
            for r in rows:
                writer.writerow([r["variant"], r["seeds"],
                                 f"{r['oiou_mean']:.6f}",
                                 f"{r['oiou_sd']:.6f}",
                                 f"{r['miou_mean']:.6f}",
                                 f"{r['miou_sd']:.6f}",
                                 " ".join(f"{x:.6f}"
                                          for x in r["oiou_per_seed"])])
    return rows


# -- complexity benchmark ------------------------------------------------------------


@dataclass(frozen=True)
class BenchRecord:
    """Instrumented cost of one grouped-scan forward pass.

    ``scan_multiplies`` counts scalar multiplies inside the selective scans
    of the hybrid sequence; ``baseline_multiplies`` counts the same for a
    plain bidirectional scan over the image tokens alone, so the ratio
    isolates what interleaving the text costs.
    """

    grid_h: int
    grid_w: int
    text_len: int
    window: int
    hybrid_len: int
    scan_multiplies: int
    baseline_multiplies: int
    seconds: float


@dataclass(frozen=True)
class BenchSummary:
    window: int
    text_len: int
    analytic_overhead: float   # L / w^2
    measured_overhead: float   # mean of scan/baseline - 1 across sizes
    slope_ratio: float         # fitted d(multiplies)/d(HW), hybrid/baseline
    r2: float                  # linearity of hybrid multiplies in HW


def _fit_line(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * np.asarray(x) + intercept
    ss_res = float(np.sum((np.asarray(y) - pred) ** 2))
    ss_tot = float(np.sum((np.asarray(y) - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), r2


def bench_complexity(windows=(4,), sides=(16, 32, 48, 64), text_len: int = 15,
                     channels: int = 16, d_state: int = 4, expand: int = 2,
                     seed: int = 0):
    """Measure grouped-scan cost against image-only scans over grid sizes.

    Returns (records, summaries).  The hybrid length follows
    HW + (HW/w^2)*L exactly; multiply counts come from instrumentation of
    the actual scans, not from the formula.  Wall-clock time is recorded
    per hybrid pass but treated as secondary: counts are noise-free.
    """
    rng = np.random.default_rng(seed)
    records = []
    summaries = []
    for w in windows:
        per_size = []
        for side in sides:
            if side % w:
                raise ValueError(f"grid side {side} not divisible by "
                                 f"window {w}")
            repeats = arrangement_repeats("fixate", side, side, w, 1)
            fix = init_fixation(rng, channels, expand, d_state, w, repeats)
            blk = init_vssm_block(rng, channels, expand, d_state)
            f_v = Tensor(rng.standard_normal((side, side, channels)))
            f_t = Tensor(rng.standard_normal((text_len, channels)))

            with no_grad():
                with multiply_counter:
                    t0 = time.perf_counter()
                    fixation(SfLayerState(f_v=f_v, f_t=f_t), fix)
                    seconds = time.perf_counter() - t0
                scan_mults = multiply_counter.total
                with multiply_counter:
                    vssm_block(Tensor(f_v.data.reshape(side * side,
                                                       channels)), blk)
                base_mults = multiply_counter.total

            hybrid_len = side * side + (side * side // (w * w)) * text_len
            per_size.append((side * side, scan_mults, base_mults))
            records.append(BenchRecord(
                grid_h=side, grid_w=side, text_len=text_len, window=w,
                hybrid_len=hybrid_len, scan_multiplies=scan_mults,
                baseline_multiplies=base_mults, seconds=seconds))
        hw = [p[0] for p in per_size]
        scan = [p[1] for p in per_size]
        base = [p[2] for p in per_size]
        slope_scan, r2 = _fit_line(hw, scan)
        slope_base, _ = _fit_line(hw, base)
        overheads = [s / b - 1.0 for s, b in zip(scan, base)]
        summaries.append(BenchSummary(
            window=w, text_len=text_len,
            analytic_overhead=text_len / (w * w),
            measured_overhead=float(np.mean(overheads)),
            slope_ratio=slope_scan / slope_base, r2=r2))
    return records, summaries
