"""Report rendering: figures and delimited files next to JSON outputs.

Every reporting CLI path writes machine-readable JSON/CSV plus a rendered
PNG figure of the same numbers. Figures are a convenience view; the JSON
and CSV files are the primary outputs.
"""

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import metrics as metrics_mod


def save_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_rows_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def render_metric_report(report: metrics_mod.MetricReport, out_dir, stem="report"):
    """report.json + report.csv + a mean/std bar figure per metric."""
    summary = report.summary()
    report.save_json(f"{out_dir}/{stem}.json")
    report.save_csv(f"{out_dir}/{stem}.csv")

    names = sorted(summary)
    finite_means = []
    finite_stds = []
    for name in names:
        values = [v for v in summary[name]["per_image"] if np.isfinite(v)]
        finite_means.append(np.mean(values) if values else 0.0)
        finite_stds.append(np.std(values) if values else 0.0)
    fig, axes = plt.subplots(1, len(names), figsize=(3 * len(names), 3.2))
    if len(names) == 1:
        axes = [axes]
    for ax, name, mean, std in zip(axes, names, finite_means, finite_stds):
        ax.bar([0], [mean], yerr=[std], color="#4878a8", capsize=4)
        ax.set_xticks([])
        ax.set_title(name)
        ax.set_ylabel(metrics_mod.format_mean_std(mean, std))
    fig.tight_layout()
    fig.savefig(f"{out_dir}/{stem}.png", dpi=110)
    plt.close(fig)


def render_loss_history(history, out_dir, stem="losses"):
    """Per-epoch loss table and curve figure for a training run."""
    if not history:
        return
    keys = [k for k in history[0] if k != "epoch"]
    save_rows_csv(
        f"{out_dir}/{stem}.csv",
        ["epoch"] + keys,
        [[entry["epoch"]] + [repr(entry[k]) for k in keys] for entry in history],
    )
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = [entry["epoch"] for entry in history]
    for key in keys:
        ax.plot(epochs, [entry[key] for entry in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(f"{out_dir}/{stem}.png", dpi=110)
    plt.close(fig)


def render_translation_samples(inputs, outputs, targets, out_dir, stem="samples", limit=4):
    """Grid figure: input, translated output, and real target when given."""
    n = min(limit, len(inputs))
    cols = 3 if targets else 2
    fig, axes = plt.subplots(n, cols, figsize=(2.4 * cols, 2.4 * n), squeeze=False)
    titles = ["input", "translated", "target"]
    for r in range(n):
        row_images = [inputs[r], outputs[r]] + ([targets[r]] if targets else [])
        for c, img in enumerate(row_images):
            axes[r][c].imshow(img, cmap="gray", vmin=0, vmax=255)
            axes[r][c].set_axis_off()
            if r == 0:
                axes[r][c].set_title(titles[c], fontsize=9)
    fig.tight_layout()
    fig.savefig(f"{out_dir}/{stem}.png", dpi=110)
    plt.close(fig)


def render_fcn_score(report, out_dir, stem="fcn_score"):
    """fcn_score.json + CSV + grouped per-class bars for real vs synthesized."""
    save_json(f"{out_dir}/{stem}.json", report)
    classes = sorted(report["real"]["accuracy_per_class"])
    rows = [["all", "accuracy", repr(report["real"]["accuracy_all"]),
             repr(report["fake"]["accuracy_all"]), repr(report["gap"]["accuracy_all"])]]
    for cls in classes:
        rows.append([cls, "accuracy", repr(report["real"]["accuracy_per_class"][cls]),
                     repr(report["fake"]["accuracy_per_class"][cls]),
                     repr(report["gap"]["accuracy_per_class"][cls])])
        rows.append([cls, "dice", repr(report["real"]["dice_per_class"][cls]),
                     repr(report["fake"]["dice_per_class"][cls]),
                     repr(report["gap"]["dice_per_class"][cls])])
    save_rows_csv(f"{out_dir}/{stem}.csv", ["class", "measure", "real", "fake", "gap"], rows)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    x = np.arange(len(classes))
    for ax, measure in ((ax1, "accuracy_per_class"), (ax2, "dice_per_class")):
        ax.bar(x - 0.18, [report["real"][measure][c] for c in classes], 0.36, label="real")
        ax.bar(x + 0.18, [report["fake"][measure][c] for c in classes], 0.36, label="synthesized")
        ax.set_xticks(x, classes)
        ax.set_ylim(0, 1.05)
        ax.set_title(measure.replace("_per_class", ""))
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(f"{out_dir}/{stem}.png", dpi=110)
    plt.close(fig)


def render_seg_scores(scores, out_dir, stem="seg_scores"):
    save_json(f"{out_dir}/{stem}.json", scores)
    classes = sorted(scores["dice_per_class"])
    rows = [["all", "accuracy", repr(scores["accuracy_all"])]]
    for cls in classes:
        rows.append([cls, "accuracy", repr(scores["accuracy_per_class"][cls])])
        rows.append([cls, "dice", repr(scores["dice_per_class"][cls])])
    save_rows_csv(f"{out_dir}/{stem}.csv", ["class", "measure", "value"], rows)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(classes, [scores["dice_per_class"][c] for c in classes], color="#4878a8")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Dice")
    ax.set_xlabel("class")
    fig.tight_layout()
    fig.savefig(f"{out_dir}/{stem}.png", dpi=110)
    plt.close(fig)


def render_harness_report(report, out_dir, stem="harness"):
    """harness.json + CSV + Dice/Dist versus fusion weight."""
    save_json(f"{out_dir}/{stem}.json", report)
    rows = []
    for w, entry in sorted(report["weights"].items()):
        for cls, val in sorted(entry["dice"].items()):
            rows.append([w, f"dice_{cls}", repr(val)])
        rows.append([w, "dice_mean", repr(entry["dice_mean"])])
        rows.append([w, "dist", repr(entry["dist"])])
    save_rows_csv(f"{out_dir}/{stem}.csv", ["weight", "measure", "value"], rows)

    weights = sorted(report["weights"])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(weights, [report["weights"][w]["dice_mean"] for w in weights], "o-")
    ax1.set_xlabel("fusion weight w")
    ax1.set_ylabel("mean Dice")
    ax2.plot(weights, [report["weights"][w]["dist"] for w in weights], "o-", color="#a85448")
    ax2.set_xlabel("fusion weight w")
    ax2.set_ylabel("landmark distance (voxels)")
    for ax in (ax1, ax2):
        ax.axvline(
            weights.index(f"{report['w_star']:.2f}") if f"{report['w_star']:.2f}" in weights else 0,
            color="gray",
            linestyle=":",
            linewidth=1,
        )
    fig.suptitle(f"known rotation {report['angle_degrees']:.0f} deg, w*={report['w_star']:.2f}")
    fig.tight_layout()
    fig.savefig(f"{out_dir}/{stem}.png", dpi=110)
    plt.close(fig)
