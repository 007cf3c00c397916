"""Report rendering: delimited tables plus static matplotlib figures.

Every report path writes machine-readable output (JSON + CSV) and, where
it makes sense, a PNG chart next to it. No interactive UI.
"""

from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

BUCKET_ORDER = ["train2_6", "train7_11", "train12_16", "test12_16"]


def write_eval_report(report, blueprints, test_flags, out_dir: str):
    """EvalReport -> report.json, report.csv, buckets.png in out_dir."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w") as f:
        json.dump(report.to_dict(), f, indent=1)

    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["blueprint_id", "n_blocks", "split", "success_rate"])
        for bp, is_test in zip(blueprints, test_flags):
            writer.writerow([
                bp.id, bp.n_blocks_used, "test" if is_test else "train",
                report.per_blueprint[bp.id],
            ])

    fig, ax = plt.subplots(figsize=(6, 4))
    names = [b for b in BUCKET_ORDER if report.buckets.get(b) is not None]
    values = [report.buckets[b] for b in names]
    ax.bar(names, values, color="#4878b0")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("success rate")
    ax.set_title(f"success over {report.n_episodes} episodes per blueprint")
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.2f}", ha="center")
    fig.tight_layout()
    png_path = os.path.join(out_dir, "buckets.png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return json_path, csv_path, png_path


def write_training_curves(metrics_jsonl: str, out_png: str):
    """Reward / success / loss curves from a metrics log."""
    steps, rewards, success, value_loss = [], [], [], []
    eval_steps, eval_rates = [], []
    with open(metrics_jsonl) as f:
        for line in f:
            rec = json.loads(line)
            steps.append(rec["env_steps"])
            rewards.append(rec.get("mean_episode_reward"))
            success.append(rec.get("recent_success_rate"))
            value_loss.append(rec.get("value_loss"))
            if "eval_train_rate" in rec:
                eval_steps.append(rec["env_steps"])
                eval_rates.append(rec["eval_train_rate"])

    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].plot(steps, rewards, lw=0.8)
    axes[0].set_title("mean episode reward")
    axes[1].plot(steps, success, lw=0.8, label="rollout")
    if eval_steps:
        axes[1].plot(eval_steps, eval_rates, "o-", ms=3, label="eval")
        axes[1].legend()
    axes[1].set_ylim(-0.02, 1.02)
    axes[1].set_title("success rate")
    axes[2].plot(steps, value_loss, lw=0.8)
    axes[2].set_yscale("log")
    axes[2].set_title("value loss")
    for ax in axes:
        ax.set_xlabel("env steps")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def write_reset_free_report(result: dict, out_dir: str):
    """Reset-free outcome -> JSON + CSV + per-episode heat strip."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "reset_free.json")
    with open(json_path, "w") as f:
        json.dump(result, f, indent=1)

    csv_path = os.path.join(out_dir, "reset_free.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode"] + [f"target_{i}" for i in range(len(result["per_episode"][0]))])
        for i, row in enumerate(result["per_episode"]):
            writer.writerow([i] + [int(v) for v in row])

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.imshow(result["per_episode"], aspect="auto", cmap="RdYlGn", vmin=0, vmax=1)
    ax.set_xlabel("consecutive target")
    ax.set_ylabel("reset-free episode")
    ax.set_title(f"mean {result['mean']:.3f} +/- {result['std']:.3f}")
    fig.tight_layout()
    png_path = os.path.join(out_dir, "reset_free.png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return json_path, csv_path, png_path
