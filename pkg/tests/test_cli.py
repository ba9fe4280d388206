import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from safire.cli import (ConfigError, RunConfig, config_hash, main,
                        parse_run_config, serialize_run_config)
from safire.model import forward, load_checkpoint
from safire.pnm import read_pgm, read_ppm
from safire.shaperef import load_split
from safire.tensor import no_grad


# -- config document -------------------------------------------------------------------


def test_round_trip_default():
    assert parse_run_config(serialize_run_config(RunConfig())) == RunConfig()


def test_round_trip_non_default():
    cfg = RunConfig(image_h=12, lr=0.0375, data_dir="/tmp/x y",
                    ablate_variants=("vanilla", "fixate-8"),
                    bench_sides=(8, 24), mix_simple=1 / 3)
    assert parse_run_config(serialize_run_config(cfg)) == cfg


def test_comments_and_blank_lines():
    cfg = parse_run_config("\n# full-line comment\nepochs = 3  # trailing\n")
    assert cfg.epochs == 3


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown key 'epcohs'"):
        parse_run_config("epcohs = 3")


def test_bad_value_names_the_key():
    with pytest.raises(ConfigError, match="'epochs'"):
        parse_run_config("epochs = soon")


def test_duplicate_key_is_an_error():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_run_config("epochs = 3\nepochs = 4")


def test_missing_equals_is_an_error():
    with pytest.raises(ConfigError, match="line 1"):
        parse_run_config("epochs 3")


def test_tuple_fields_parse_types():
    cfg = parse_run_config("bench_sides = 8, 16\nablate_variants = a,b")
    assert cfg.bench_sides == (8, 16)
    assert cfg.ablate_variants == ("a", "b")


def test_hash_stable_and_sensitive():
    assert config_hash(RunConfig()) == config_hash(RunConfig())
    assert config_hash(RunConfig()) != config_hash(RunConfig(epochs=14))
    assert len(config_hash(RunConfig())) == 8


def test_every_field_survives_the_round_trip():
    # perturb each field one at a time so a formatting bug cannot hide
    base = RunConfig()
    for f in dataclasses.fields(RunConfig):
        old = getattr(base, f.name)
        if isinstance(old, tuple):
            new = old + (99 if isinstance(old[0], int) else "alt",)
        elif isinstance(old, float):
            new = old + 0.125
        elif isinstance(old, int):
            new = old + 1
        else:
            new = old + "_alt"
        cfg = dataclasses.replace(base, **{f.name: new})
        assert parse_run_config(serialize_run_config(cfg)) == cfg, f.name


# -- command pipeline ------------------------------------------------------------------


TINY = """
image_h = 12
image_w = 12
channels = 8
d_state = 2
window = 2
layers = 2
data_dir = {data}
train_size = 6
val_size = 3
test_size = 4
gen_seed = 1
distractor_mean = 1.0
other_max = 1
epochs = 2
lr = 0.003
batch_size = 4
masks_count = 2
bench_sides = 16,32
bench_channels = 4
ablate_variants = vanilla,fixate-2
ablate_epochs = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset + trained checkpoint shared by the smoke tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "run.cfg"
    cfg_path.write_text(TINY.format(data=root / "data"))
    assert main(["gen", "--config", str(cfg_path)]) == 0
    train_dir = root / "train_run"
    assert main(["train", "--config", str(cfg_path),
                 "--out", str(train_dir)]) == 0
    return {"root": root, "cfg": str(cfg_path), "data": root / "data",
            "ckpt": str(train_dir / "model.ckpt"), "train_dir": train_dir}


def _tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_writes_all_splits(workspace):
    data = workspace["data"]
    assert (data / "vocab.txt").is_file()
    for name, size in (("train", 6), ("val", 3), ("test", 4)):
        meta = (data / name / "meta.jsonl").read_text().splitlines()
        assert len(meta) == size


def test_gen_prints_stats_block(workspace, capsys):
    assert main(["gen", "--config", workspace["cfg"]]) == 0
    out = capsys.readouterr().out
    assert "mean same-category distractors" in out
    assert "mean expression length" in out
    assert "modes:" in out


def test_gen_rerun_is_byte_identical(workspace):
    before = _tree_digest(workspace["data"])
    assert main(["gen", "--config", workspace["cfg"]]) == 0
    assert _tree_digest(workspace["data"]) == before


def test_train_outputs(workspace):
    d = workspace["train_dir"]
    assert (d / "model.ckpt").is_file()
    assert (d / "training.png").is_file()
    assert (d / "config.txt").is_file()
    log = [json.loads(l) for l in (d / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1]
    assert all(r["split"] == "val" for r in log)


def test_train_rerun_reproduces_the_checkpoint(workspace, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--config", workspace["cfg"],
                 "--out", str(out)]) == 0
    first = Path(workspace["ckpt"]).read_bytes()
    assert (out / "model.ckpt").read_bytes() == first


def test_eval_emits_metric_lines(workspace, tmp_path):
    out = tmp_path / "eval"
    assert main(["eval", "--config", workspace["cfg"],
                 "--checkpoint", workspace["ckpt"], "--out", str(out)]) == 0
    recs = [json.loads(l)
            for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert recs[0]["scope"] == "overall" and recs[0]["n"] == 4
    scopes = {r["scope"] for r in recs[1:]}
    assert scopes <= {"simple", "object_distracting", "category_implicit"}
    for r in recs:
        assert {"oiou", "miou", "p50", "p70", "p90"} <= r.keys()


def test_eval_requires_checkpoint(workspace, capsys):
    assert main(["eval", "--config", workspace["cfg"]]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_masks_panel_layout_and_round_trip(workspace, tmp_path):
    out = tmp_path / "masks"
    assert main(["masks", "--config", workspace["cfg"],
                 "--checkpoint", workspace["ckpt"], "--out", str(out)]) == 0
    config, params = load_checkpoint(workspace["ckpt"])
    samples = load_split(workspace["data"], "test")[:2]
    for i, sample in enumerate(samples):
        with no_grad():
            logits, _ = forward(sample.image, sample.tokens, config, params)
        pred = logits.binary().astype(float)

        reread = read_pgm(out / f"pred_{i:05d}.pgm")
        npt.assert_array_equal(reread, pred)

        h, w = pred.shape
        panel = read_ppm(out / f"panel_{i:05d}.ppm")
        assert panel.shape == (h, 3 * w + 2, 3)
        # middle slab is the dataset mask, right slab the prediction
        gt_rgb = np.broadcast_to(sample.mask[:, :, None], (h, w, 3))
        npt.assert_array_equal(panel[:, w + 1:2 * w + 1], gt_rgb)
        npt.assert_array_equal(panel[:, 2 * w + 2:],
                               np.broadcast_to(pred[:, :, None], (h, w, 3)))
        # separator columns stay black
        assert not panel[:, w].any() and not panel[:, 2 * w + 1].any()


def test_bench_outputs(workspace, tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--config", workspace["cfg"],
                 "--out", str(out)]) == 0
    csv_lines = (out / "bench.csv").read_text().splitlines()
    assert csv_lines[0].startswith("grid_h,grid_w,text_len,window,hybrid_len")
    assert len(csv_lines) == 1 + 2  # two sides, one window

    dat = (out / "length_vs_hw.dat").read_text().splitlines()
    assert dat[0].startswith("#")
    for line in dat[1:]:
        w, hw, hybrid, scan, base, secs = line.split()
        assert int(hybrid) == int(hw) + int(hw) // int(w) ** 2 * 15
    assert (out / "bench.png").is_file()


def test_ablate_outputs(workspace, tmp_path):
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", workspace["cfg"],
                 "--out", str(out)]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == ("variant,seeds,oiou_mean,oiou_sd,"
                       "miou_mean,miou_sd,oiou_per_seed")
    assert [l.split(",")[0] for l in lines[1:]] == ["vanilla", "fixate-2"]
    assert (out / "ablation.png").is_file()


# -- exit codes ------------------------------------------------------------------------


def test_missing_config_file_is_validation_error(capsys):
    assert main(["gen", "--config", "/nonexistent/run.cfg"]) == 1
    assert "not found" in capsys.readouterr().err


def test_config_error_names_the_key(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("not_a_key = 1\n")
    assert main(["gen", "--config", str(bad)]) == 1
    assert "not_a_key" in capsys.readouterr().err


def test_unknown_command_is_usage_error(capsys):
    assert main(["frobnicate", "--config", "x"]) == 1
    capsys.readouterr()


def test_invalid_model_shape_is_validation_error(tmp_path, capsys):
    cfg = tmp_path / "odd.cfg"
    cfg.write_text("image_h = 13\ndata_dir = %s\n" % tmp_path)
    (tmp_path / "vocab.txt").write_text("\n".join(["w"] * 25) + "\n")
    assert main(["train", "--config", str(cfg)]) == 1
    capsys.readouterr()


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data_dir = {tmp_path / 'nowhere'}\n")
    assert main(["train", "--config", str(cfg)]) == 2
    capsys.readouterr()
