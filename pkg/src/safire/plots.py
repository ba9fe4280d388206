"""Figure emission for the report-producing commands.

matplotlib is imported lazily with the Agg backend so that library use
never requires a display and the import cost is only paid by commands
that actually render figures.
"""

from __future__ import annotations


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def training_curves(log, path) -> None:
    """Loss on the left axis, validation oIoU/mIoU on the right."""
    plt = _plt()
    epochs = [r["epoch"] for r in log]
    fig, ax_loss = plt.subplots(figsize=(7, 4))
    ax_loss.plot(epochs, [r["loss"] for r in log], color="tab:red",
                 marker="o", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss", color="tab:red")
    ax_loss.tick_params(axis="y", labelcolor="tab:red")

    ax_m = ax_loss.twinx()
    ax_m.plot(epochs, [r["miou"] for r in log], color="tab:blue",
              marker="s", label="val mIoU")
    ax_m.plot(epochs, [r["oiou"] for r in log], color="tab:cyan",
              marker="^", label="val oIoU")
    ax_m.set_ylabel("IoU", color="tab:blue")
    ax_m.set_ylim(0.0, 1.0)
    ax_m.tick_params(axis="y", labelcolor="tab:blue")
    ax_m.legend(loc="center right")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_bars(rows, path) -> None:
    """Mean oIoU per arrangement variant with sd whiskers."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r["variant"] for r in rows]
    means = [r["oiou_mean"] for r in rows]
    sds = [r["oiou_sd"] for r in rows]
    ax.bar(range(len(rows)), means, yerr=sds, capsize=4, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel("oIoU on ambiguous modes")
    ax.set_title("token arrangement ablation (mean +- sd over seeds)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bench_curves(records, path) -> None:
    """Scan multiplies against token count, grouped vs image-only."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4))
    windows = sorted({r.window for r in records})
    for w in windows:
        rs = [r for r in records if r.window == w]
        hw = [r.grid_h * r.grid_w for r in rs]
        ax.plot(hw, [r.scan_multiplies for r in rs], marker="o",
                label=f"grouped scan, w={w}")
    base = sorted({(r.grid_h * r.grid_w, r.baseline_multiplies)
                   for r in records})
    ax.plot([b[0] for b in base], [b[1] for b in base], marker="x",
            linestyle="--", color="gray", label="image-only scan")
    ax.set_xlabel("image tokens (H*W)")
    ax.set_ylabel("scan scalar multiplies")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
