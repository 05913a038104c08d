"""Matplotlib renderers for the CLI's delimited outputs (PNG next to CSV)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def loss_curve(loss_csv, out_png) -> None:
    rows = _read_csv(loss_csv)
    if not rows:
        return
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [float(r["loss"]) for r in rows], label="total", lw=1.5)
    ax.plot(steps, [float(r["mlm_loss"]) for r in rows], label="mlm", lw=1.0, alpha=0.8)
    if any(float(r["nsp_loss"]) != 0.0 for r in rows):
        ax.plot(steps, [float(r["nsp_loss"]) for r in rows], label="nsp", lw=1.0, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def grid_report_figure(report_csv, out_png) -> None:
    rows = _read_csv(report_csv)
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(8, 4))
    xs = range(len(rows))
    metrics = [float(r["dev_metric"]) for r in rows]
    colors = ["tab:blue" if r["status"] == "ok" else "tab:red" for r in rows]
    ax.bar(xs, metrics, color=colors)
    ax.set_xlabel("trial (grid order x seeds)")
    ax.set_ylabel("dev metric")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def bench_figure(bench_csv, out_png) -> None:
    rows = _read_csv(bench_csv)
    if not rows:
        return
    names = [r["preset"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    xs = range(len(rows))
    width = 0.27
    for off, key, label in ((-width, "train_speed_bs1", "train bs=1"),
                            (0.0, "train_speed_max", "train bs=max"),
                            (width, "infer_speed_bs1", "infer bs=1")):
        ax1.bar([x + off for x in xs], [float(r[key]) for r in rows], width=width, label=label)
    ax1.axhline(1.0, color="gray", lw=0.8, ls="--")
    ax1.set_xticks(list(xs), names, rotation=30, ha="right")
    ax1.set_ylabel("speed ratio vs reference")
    ax1.legend(fontsize=8)
    ax2.bar(xs, [int(r["max_bs"]) for r in rows], color="tab:green")
    ax2.set_xticks(list(xs), names, rotation=30, ha="right")
    ax2.set_ylabel("max batch size under budget")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def bars_figure(items: list[tuple[str, float]], ylabel: str, out_png) -> None:
    if not items:
        return
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(items)), 4))
    xs = range(len(items))
    ax.bar(xs, [v for _, v in items], color="tab:purple")
    ax.set_xticks(list(xs), [k for k, _ in items], rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
