"""Report rendering: delimited tables, aligned text tables, JSON, and
matplotlib figures written to files next to the tabular output."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n",
                          encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def save_table(rows: list[dict], path) -> None:
    """Tab-separated table with a header row (column order of first row)."""
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    cols = list(rows[0].keys())
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(_fmt(row.get(c, "")) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_table(rows: list[dict]) -> str:
    """Space-aligned text table for terminals and report files."""
    if not rows:
        return "(empty table)\n"
    cols = list(rows[0].keys())
    cells = [[_fmt(row.get(c, "")) for c in cols] for row in rows]
    widths = [max(len(c), *(len(r[j]) for r in cells)) for j, c in enumerate(cols)]
    out = ["  ".join(c.ljust(widths[j]) for j, c in enumerate(cols))]
    out.append("  ".join("-" * widths[j] for j in range(len(cols))))
    for r in cells:
        out.append("  ".join(r[j].ljust(widths[j]) for j in range(len(cols))))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def fig_training_curves(logs: dict[int, object], path) -> None:
    """Loss-vs-step curves, one panel per trained level."""
    fig, axes = plt.subplots(1, len(logs), figsize=(4.2 * len(logs), 3.2),
                             squeeze=False)
    for ax, (level, log) in zip(axes[0], sorted(logs.items())):
        steps = [e["step"] for e in log.steps]
        ax.plot(steps, [e["loss"] for e in log.steps], label="train loss", lw=1.0)
        if log.evals:
            ax.plot([e["step"] for e in log.evals],
                    [e["val_loss"] for e in log.evals],
                    "o-", ms=3, label="val loss")
        ax.set_title(f"level {level} ({log.stop_reason})")
        ax.set_xlabel("optimizer step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_rank_ablation(rows: list[dict], path) -> None:
    fig, ax1 = plt.subplots(figsize=(5.0, 3.4))
    ranks = [r["rank"] for r in rows]
    ax1.plot(ranks, [r["dev_macro_f1"] for r in rows], "o-", color="tab:blue")
    ax1.set_xlabel("adapter rank")
    ax1.set_ylabel("dev macro F1", color="tab:blue")
    ax1.set_xscale("log", base=2)
    ax2 = ax1.twinx()
    ax2.plot(ranks, [r["lora_params"] for r in rows], "s--", color="tab:orange")
    ax2.set_ylabel("adapter parameters", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_joint_vs_separate(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    idx = range(len(rows))
    width = 0.2
    for off, (key, color) in enumerate([
            ("separate_en", "#9ecae1"), ("joint_en", "#3182bd"),
            ("separate_es", "#fdae6b"), ("joint_es", "#e6550d")]):
        ax.bar([i + (off - 1.5) * width for i in idx],
               [r[key] for r in rows], width=width, label=key, color=color)
    ax.set_xticks(list(idx))
    ax.set_xticklabels([f"level {r['level']}" for r in rows])
    ax.set_ylabel("test macro F1")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_lambda_ablation(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    xs = [str(r["lam"]) for r in rows]
    ax.bar(xs, [r["invalid_rate_mean"] for r in rows],
           yerr=[r["invalid_rate_std"] for r in rows],
           color="#756bb1", capsize=4)
    ax.set_xlabel("hierarchy weight")
    ax.set_ylabel("invalid-transition rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_metric_report(rows: list[dict], path) -> None:
    """Grouped bars of per-subtask scores from a MetricReport row dump."""
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    idx = range(len(rows))
    metric_cols = [c for c in rows[0] if c.endswith("_macro_f1")]
    width = 0.8 / max(1, len(metric_cols))
    for off, col in enumerate(metric_cols):
        ax.bar([i + off * width for i in idx], [r[col] for r in rows],
               width=width, label=col.replace("_macro_f1", ""))
    ax.set_xticks([i + 0.4 - width / 2 for i in idx])
    ax.set_xticklabels([f"task {r['subtask']}" for r in rows])
    ax.set_ylabel("macro F1")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
