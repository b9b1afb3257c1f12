"""Figure rendering for training logs and sweep curves.

Every report path that writes delimited output also renders a PNG next
to it: run() emits training curves, sweep() one panel per metric. All
rendering uses the Agg backend so it works headless; figures are a
byproduct and never feed back into results.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

METRIC_LABELS = {
    "ndcg_at_10": "NDCG@10",
    "recall_at_10": "Recall@10",
    "auc": "AUC",
    "acc": "ACC",
}


def plot_training(logs: dict, path, val_metric: str = "auc") -> None:
    """Loss and validation curves for a set of labeled training logs.

    logs maps a label ("method seed 0") to a list of epoch-log rows as
    produced by the trainer.
    """
    fig, (ax_loss, ax_val) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for label, rows in sorted(logs.items()):
        epochs = [r["epoch"] for r in rows]
        losses = [r["train_loss"] for r in rows if r["train_loss"] != ""]
        if losses:
            ax_loss.plot(epochs[: len(losses)], losses, label=label)
        vals = [r[f"val_{val_metric}"] for r in rows]
        ax_val.plot(epochs, vals, label=label)
    ax_loss.set_ylabel("training loss")
    ax_loss.legend(fontsize=7)
    ax_val.set_ylabel(f"validation {METRIC_LABELS.get(val_metric, val_metric)}")
    ax_val.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows: list, parameter: str, path_prefix) -> list:
    """One errorbar panel per metric from sorted curves rows.

    rows are (param_value, method, metric, mean, stderr) tuples; returns
    the list of written file paths.
    """
    written = []
    metrics = sorted({r[2] for r in rows})
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(6, 4))
        methods = sorted({r[1] for r in rows if r[2] == metric})
        for method in methods:
            pts = sorted((r[0], r[3], r[4]) for r in rows
                         if r[1] == method and r[2] == metric)
            xs = [p[0] for p in pts]
            ys = [p[1] for p in pts]
            es = [p[2] for p in pts]
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=method)
        ax.set_xlabel(parameter)
        ax.set_ylabel(METRIC_LABELS.get(metric, metric))
        ax.legend(fontsize=8)
        fig.tight_layout()
        out = f"{path_prefix}_{metric}.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    return written
