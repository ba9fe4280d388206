"""Command-line front end: gen / train / eval / ablate / bench / masks.

One flat `key = value` config file drives every command.  Outputs land in
a run directory named after the config hash and a timestamp, so reruns
never clobber each other; `--out` pins the directory instead.  Exit codes:
0 success, 1 bad input (config, arguments, missing files), 2 a failure
while the run itself was executing.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plots
from .harness import (DEFAULT_VARIANTS, ablate_arrangement, bench_complexity,
                      evaluate, train)
from .model import ModelConfig, load_checkpoint
from .pnm import write_pgm, write_ppm
from .shaperef import GenConfig, build_split, load_split, load_vocab, VOCAB
from .tensor import no_grad


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, one scalar or comma list per line.

    Model fields mirror ModelConfig; the rest drive data generation,
    training, and the reporting commands.
    """

    # model
    vocab_size: int = len(VOCAB)
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
    # dataset
    data_dir: str = "data"
    train_size: int = 2000
    val_size: int = 200
    test_size: int = 400
    gen_seed: int = 0
    distractor_mean: float = 3.1
    other_max: int = 2
    mix_simple: float = 0.4
    mix_distracting: float = 0.3
    mix_implicit: float = 0.3
    # training
    epochs: int = 15
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    train_seed: int = 0
    # ablation
    ablate_variants: tuple = DEFAULT_VARIANTS
    ablate_seeds: tuple = (0, 1, 2)
    ablate_epochs: int = 15
    # bench
    bench_windows: tuple = (4,)
    bench_sides: tuple = (16, 32, 48, 64)
    bench_text_len: int = 15
    bench_channels: int = 16
    # masks
    masks_count: int = 16

    def model_config(self) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        kv = {n: getattr(self, n) for n in names}
        return ModelConfig(**kv)

    def gen_config(self) -> GenConfig:
        return GenConfig(image_h=self.image_h, image_w=self.image_w,
                         distractor_mean=self.distractor_mean,
                         other_max=self.other_max)

    def mode_mix(self) -> tuple:
        return (self.mix_simple, self.mix_distracting, self.mix_implicit)


_DEFAULTS = {f.name: f.default for f in dataclasses.fields(RunConfig)}


def _convert(key: str, raw: str):
    default = _DEFAULTS[key]
    try:
        if isinstance(default, tuple):
            if not raw:
                return ()
            elem = type(default[0]) if default else str
            return tuple(elem(part.strip()) for part in raw.split(","))
        if isinstance(default, bool):  # pragma: no cover - no bool fields yet
            raise ConfigError(f"boolean keys are not supported: {key!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def parse_run_config(text: str) -> RunConfig:
    """Flat `key = value` lines; `#` comments; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, raw = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key not in _DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw.strip())
    return RunConfig(**values)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_run_config(config: RunConfig) -> str:
    """One sorted `key = value` line per field; parses back to `config`."""
    lines = [f"{name} = {_format_value(getattr(config, name))}"
             for name in sorted(_DEFAULTS)]
    return "\n".join(lines) + "\n"


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(path.read_text())


def config_hash(config: RunConfig) -> str:
    digest = hashlib.sha256(serialize_run_config(config).encode())
    return digest.hexdigest()[:8]


def make_run_dir(out, command: str, config: RunConfig) -> Path:
    """`--out` wins; otherwise runs/<command>-<hash>-<timestamp>."""
    if out:
        run_dir = Path(out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path("runs") / f"{command}-{config_hash(config)}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(serialize_run_config(config))
    return run_dir


# -- commands --------------------------------------------------------------------------


def _check_vocab(data_dir, expected: int) -> None:
    vocab = load_vocab(data_dir)
    if len(vocab) != expected:
        raise ConfigError(
            f"dataset vocabulary has {len(vocab)} entries but the config "
            f"says vocab_size = {expected}")


def _split_sizes(config: RunConfig):
    return (("train", config.train_size), ("val", config.val_size),
            ("test", config.test_size))


def cmd_gen(args, config: RunConfig) -> int:
    seed = args.seed if args.seed is not None else config.gen_seed
    data_dir = Path(config.data_dir)
    gcfg = config.gen_config()
    for name, size in _split_sizes(config):
        build_split(data_dir, name, size, seed, config.mode_mix(), gcfg)
        samples = load_split(data_dir, name)
        counts = {}
        for s in samples:
            counts[s.mode] = counts.get(s.mode, 0) + 1
        mean_dist = float(np.mean(
            [s.scene.same_category_count() for s in samples]))
        mean_len = float(np.mean([len(s.tokens) for s in samples]))
        print(f"split {name}: {len(samples)} samples -> {data_dir / name}")
        print("  modes: " + " ".join(f"{m}={counts[m]}"
                                     for m in sorted(counts)))
        print(f"  mean same-category distractors: {mean_dist:.2f}")
        print(f"  mean expression length: {mean_len:.2f} tokens")
    return 0


def cmd_train(args, config: RunConfig) -> int:
    model_config = config.model_config()  # validate shapes before any I/O
    data_dir = Path(config.data_dir)
    _check_vocab(data_dir, config.vocab_size)
    train_set = load_split(data_dir, "train")
    val_set = load_split(data_dir, "val")
    seed = args.seed if args.seed is not None else config.train_seed
    run_dir = make_run_dir(args.out, "train", config)

    result = train(model_config, train_set, val_set,
                   epochs=config.epochs, seed=seed, lr=config.lr,
                   weight_decay=config.weight_decay,
                   batch_size=config.batch_size,
                   log_path=run_dir / "metrics.jsonl",
                   checkpoint_path=run_dir / "model.ckpt")
    plots.training_curves(result.log, run_dir / "training.png")
    last = result.log[-1]
    print(f"run dir: {run_dir}")
    print(f"checkpoint: {run_dir / 'model.ckpt'}")
    print(f"final val: loss={last['loss']:.4f} oIoU={last['oiou']:.3f} "
          f"mIoU={last['miou']:.3f}")
    return 0


def _require_checkpoint(args):
    if not args.checkpoint:
        raise ConfigError("this command needs --checkpoint")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args, config: RunConfig) -> int:
    model_config, params = _require_checkpoint(args)
    split = args.split or "test"
    data_dir = Path(config.data_dir)
    _check_vocab(data_dir, model_config.vocab_size)
    samples = load_split(data_dir, split)
    run_dir = make_run_dir(args.out, "eval", config)

    report = evaluate(params, model_config, samples)
    lines = [{"split": split, "scope": "overall",
              **{k: v for k, v in report.items() if k != "per_mode"}}]
    for mode, block in sorted(report["per_mode"].items()):
        lines.append({"split": split, "scope": mode, **block})
    with open(run_dir / "metrics.jsonl", "w") as fh:
        for rec in lines:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    print(f"run dir: {run_dir}")
    for rec in lines:
        print(f"{rec['scope']:>20}: n={rec['n']} oIoU={rec['oiou']:.3f} "
              f"mIoU={rec['miou']:.3f} P@50={rec['p50']:.3f} "
              f"P@70={rec['p70']:.3f} P@90={rec['p90']:.3f}")
    return 0


def cmd_ablate(args, config: RunConfig) -> int:
    model_config = config.model_config()
    data_dir = Path(config.data_dir)
    _check_vocab(data_dir, config.vocab_size)
    train_set = load_split(data_dir, "train")
    test_set = load_split(data_dir, "test")
    run_dir = make_run_dir(args.out, "ablate", config)

    rows = ablate_arrangement(model_config, train_set, test_set,
                              variants=config.ablate_variants,
                              seeds=config.ablate_seeds,
                              epochs=config.ablate_epochs, lr=config.lr,
                              csv_path=run_dir / "ablation.csv")
    plots.ablation_bars(rows, run_dir / "ablation.png")
    print(f"run dir: {run_dir}")
    for row in rows:
        print(f"{row['variant']:>10}: oIoU {row['oiou_mean']:.3f} "
              f"+- {row['oiou_sd']:.3f}  mIoU {row['miou_mean']:.3f} "
              f"+- {row['miou_sd']:.3f}")
    return 0


def cmd_bench(args, config: RunConfig) -> int:
    run_dir = make_run_dir(args.out, "bench", config)
    # timings mean nothing across a thread pool; the bench stays serial
    records, summaries = bench_complexity(windows=config.bench_windows,
                                          sides=config.bench_sides,
                                          text_len=config.bench_text_len,
                                          channels=config.bench_channels)

    fields = [f.name for f in dataclasses.fields(records[0])]
    with open(run_dir / "bench.csv", "w") as fh:
        fh.write(",".join(fields) + "\n")
        for rec in records:
            fh.write(",".join(str(getattr(rec, f)) for f in fields) + "\n")

    # whitespace columns with a commented header: gnuplot reads it as-is
    with open(run_dir / "length_vs_hw.dat", "w") as fh:
        fh.write("# window image_tokens hybrid_len scan_multiplies "
                 "baseline_multiplies seconds\n")
        for rec in records:
            fh.write(f"{rec.window} {rec.grid_h * rec.grid_w} "
                     f"{rec.hybrid_len} {rec.scan_multiplies} "
                     f"{rec.baseline_multiplies} {rec.seconds:.6f}\n")

    plots.bench_curves(records, run_dir / "bench.png")
    print(f"run dir: {run_dir}")
    for s in summaries:
        print(f"window={s.window} text_len={s.text_len}: "
              f"overhead analytic={s.analytic_overhead:.4f} "
              f"measured={s.measured_overhead:.4f} "
              f"slope_ratio={s.slope_ratio:.4f} r2={s.r2:.6f}")
    return 0


def cmd_masks(args, config: RunConfig) -> int:
    from .model import forward  # local import keeps the cheap commands cheap

    if config.masks_count < 1:
        raise ConfigError("masks_count must be >= 1")
    model_config, params = _require_checkpoint(args)
    split = args.split or "test"
    data_dir = Path(config.data_dir)
    _check_vocab(data_dir, model_config.vocab_size)
    samples = load_split(data_dir, split)[:config.masks_count]
    if not samples:
        raise ConfigError(f"split {split!r} is empty")
    run_dir = make_run_dir(args.out, "masks", config)

    for i, sample in enumerate(samples):
        with no_grad():
            out, _ = forward(sample.image, sample.tokens, model_config,
                             params)
        pred = out.binary().astype(float)
        write_pgm(run_dir / f"pred_{i:05d}.pgm", pred)

        h, w = pred.shape
        # [image | truth | prediction] with one black separator column each
        panel = np.zeros((h, 3 * w + 2, 3))
        panel[:, :w] = sample.image
        panel[:, w + 1:2 * w + 1] = sample.mask[:, :, None]
        panel[:, 2 * w + 2:] = pred[:, :, None]
        write_ppm(run_dir / f"panel_{i:05d}.ppm", panel)

    print(f"run dir: {run_dir}")
    print(f"wrote {len(samples)} prediction masks and panels "
          f"from split {split!r}")
    return 0


# -- entry point -----------------------------------------------------------------------


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "masks": cmd_masks,
}

_HELP = {
    "gen": "write the train/val/test splits and print corpus statistics",
    "train": "train a model on an existing dataset",
    "eval": "score a checkpoint on one split",
    "ablate": "compare token arrangements across seeds",
    "bench": "measure grouped-scan cost against image-only scans",
    "masks": "render predicted masks and comparison panels",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safire",
        description="referring segmentation on synthetic shape scenes")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in _COMMANDS.items():
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", required=True,
                       help="flat key = value run config")
        p.add_argument("--out", help="run directory (default: hash+stamp)")
        p.add_argument("--seed", type=int,
                       help="override the config's seed for this command")
        p.add_argument("--checkpoint", help="model checkpoint to load")
        p.add_argument("--split",
                       help="dataset split for eval/masks (default test)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; bad arguments are input errors
        return 0 if exc.code == 0 else 1
    try:
        config = load_run_config(args.config)
        return args.func(args, config)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary turns failures into codes
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
