"""Figure rendering for training logs and evaluation reports.

Everything draws through the Agg backend and writes PNG files; nothing
here opens a window. Figure paths are returned so callers can list them
next to the delimited reports they accompany.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import read_loss_log  # noqa: E402


def _smooth(y: np.ndarray, span: int) -> np.ndarray:
    if len(y) < 3:
        return y
    span = max(min(span, len(y) // 2), 1)
    kernel = np.ones(span) / span
    return np.convolve(y, kernel, mode="valid")


def plot_loss_log(log_path, out_path, title: str | None = None) -> Path:
    """Loss-vs-step curve from a training CSV; adds a moving-average trace
    and, when the localization term was active, a second panel for it."""
    log = read_loss_log(log_path)
    steps, l_theta = log["step"], log["l_theta"]
    has_loc = bool(np.any(log["lambda_loc"] > 0))
    fig, axes = plt.subplots(1, 2 if has_loc else 1,
                             figsize=(9 if has_loc else 5.5, 3.4))
    axes = np.atleast_1d(axes)
    span = max(len(steps) // 20, 1)
    axes[0].plot(steps, l_theta, alpha=0.35, label="denoising loss")
    if len(steps) >= 3:
        sm = _smooth(l_theta, span)
        axes[0].plot(steps[span - 1:], sm, label=f"moving avg ({span})")
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)
    if has_loc:
        axes[1].plot(steps, log["l_loc"], color="tab:orange", alpha=0.5,
                     label="localization loss")
        axes[1].axhline(np.log(2), color="gray", ls="--", lw=0.8,
                        label="chance (ln 2)")
        axes[1].set_xlabel("step")
        axes[1].legend(fontsize=8)
    fig.suptitle(title or Path(log_path).stem)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def _rows_from_report(report) -> list[dict]:
    if isinstance(report, (str, Path)):
        with open(report, encoding="utf-8") as f:
            return json.load(f)["rows"]
    return report.rows


def plot_eval_report(report, out_dir, manifest_rows: list[dict] | None = None
                     ) -> list[Path]:
    """Render evaluation figures next to the report: signal distances and
    side accuracy against the Mono-Mono baseline, plus a prompted-distance
    vs loudness-estimate scatter when manifest rows are supplied."""
    rows = _rows_from_report(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for ax, key, label in ((axes[0], "stft_distance", "STFT distance"),
                           (axes[1], "env_distance", "envelope distance")):
        pred = [r[key] for r in rows if r.get(key) is not None]
        base = [r[f"{key}_monomono"] for r in rows
                if r.get(f"{key}_monomono") is not None]
        ax.boxplot([pred, base], tick_labels=["model", "mono-mono"])
        ax.set_title(label)
    fig.tight_layout()
    p = out_dir / "eval_distances.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    rates = []
    for key in ("doa_side_correct", "doa_side_correct_monomono"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        rates.append(float(np.mean(vals)) if vals else 0.0)
    ax.bar(["model", "mono-mono"], rates, color=["tab:blue", "tab:gray"])
    ax.axhline(0.5, color="black", ls="--", lw=0.8, label="chance")
    ax.set_ylim(0, 1)
    ax.set_ylabel("side accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "eval_side_accuracy.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    if manifest_rows:
        from . import prompts

        prompted = {}
        for m in manifest_rows:
            spec = prompts.spec_from_json(m["spec"])
            if spec.kind == "absolute" and len(spec.sources) == 1:
                prompted[m["id"]] = spec.sources[0].distance
        xs, ys = [], []
        for r in rows:
            d = prompted.get(r["id"])
            if d is not None and r.get("distance_estimate_m") is not None:
                xs.append(d)
                ys.append(r["distance_estimate_m"])
        if xs:
            fig, ax = plt.subplots(figsize=(4.6, 3.6))
            ax.scatter(xs, ys, s=12, alpha=0.6)
            ax.set_xlabel("prompted distance (m)")
            ax.set_ylabel("loudness-implied distance (m)")
            ax.set_xscale("log")
            ax.set_yscale("log")
            fig.tight_layout()
            p = out_dir / "eval_distance_cue.png"
            fig.savefig(p, dpi=120)
            plt.close(fig)
            paths.append(p)
    return paths
