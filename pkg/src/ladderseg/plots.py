"""Figure rendering for the report commands.

Every function takes already-computed reports or log rows, draws a single
figure, and writes it to the given path; no numbers are computed here.
The Agg backend is forced up front so rendering works headless.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analyzer import BLOCK_NAMES
from .membench import MB, fps


def cost_figure(report, path):
    """Per-block parameter bars, plus a MAC panel when the report has one."""
    with_macs = report.block_macs is not None
    fig, axes = plt.subplots(1, 2 if with_macs else 1,
                             figsize=(9 if with_macs else 5, 3.2))
    axes = axes if with_macs else [axes]
    x = range(len(BLOCK_NAMES))
    axes[0].bar(x, [p / 1e6 for p in report.block_params])
    axes[0].set_xticks(x, BLOCK_NAMES)
    axes[0].set_ylabel("parameters (M)")
    if with_macs:
        axes[1].bar(x, [m / 1e9 for m in report.block_macs])
        axes[1].set_xticks(x, BLOCK_NAMES)
        axes[1].set_ylabel("MACs (G)")
        fig.suptitle(f"{report.backbone} at {report.res[0]}x{report.res[1]}")
    else:
        fig.suptitle(report.backbone)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def memory_figure(reports, batch, path):
    """Peak memory per policy as horizontal bars, annotated with FPS."""
    if not reports:
        raise ValueError("no reports to plot")
    names = [r.policy for r in reports]
    peaks = [r.peak_total_bytes / MB for r in reports]
    y = range(len(reports))
    fig, ax = plt.subplots(figsize=(7, 0.6 * len(reports) + 1.4))
    ax.barh(y, peaks)
    ax.set_yticks(y, names)
    ax.invert_yaxis()  # mildest policy on top, matching the table
    ax.set_xlabel("peak memory (MB)")
    for i, rep in enumerate(reports):
        ax.annotate(f"{fps(rep, batch):.2f} fps",
                    (peaks[i], i), xytext=(4, 0),
                    textcoords="offset points", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def training_figure(rows, path):
    """Loss and validation mIoU against epoch on twin axes."""
    if not rows:
        raise ValueError("no training rows to plot")
    epochs = [r[0] for r in rows]
    loss = [r[2] for r in rows]
    miou = [r[3] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(epochs, loss, marker="o", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, miou, marker="s", color="tab:orange", label="val mIoU")
    ax2.set_ylabel("val mIoU")
    ax2.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
