"""Matplotlib figures rendered next to each command's delimited output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_curve(records, path):
    """Training loss components against step."""
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r["total"] for r in records], label="total", lw=1.2)
    ax.plot(steps, [r["rounding"] for r in records], label="rounding",
            lw=0.8, alpha=0.7)
    ax.plot(steps, [r["mse"] for r in records], label="mse", lw=0.8,
            alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_history(history, path):
    """Validation metric against wall-clock seconds."""
    if not history:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([h["wall_clock"] for h in history],
            [h["metric"] for h in history], marker="o")
    ax.set_xlabel("wall clock (s)")
    ax.set_ylabel("validation BLEU")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_schedule(sched, path):
    """alpha_bar, sigma and lambda across the schedule."""
    ts = list(range(sched.T + 1))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.plot(ts, [sched.alpha_bar[t] for t in ts], label="alpha_bar")
    ax1.plot(ts, [sched.sigma(t) for t in ts], label="sigma")
    ax1.set_xlabel("t")
    ax1.legend(frameon=False)
    ax2.plot(ts, [sched.lambda_of(t) for t in ts], color="tab:red")
    ax2.set_xlabel("t")
    ax2.set_ylabel("lambda (half log-SNR)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_score_histogram(per_example, path):
    """Distribution of per-example BLEU scores."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist([r["bleu"] for r in per_example], bins=20, range=(0, 1),
            color="tab:blue", alpha=0.8)
    ax.set_xlabel("sentence BLEU")
    ax.set_ylabel("examples")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_throughput(results, path):
    """Sequences/second per benchmarked configuration."""
    labels = [r["label"] for r in results]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, [r["seqs_per_sec"] for r in results],
           color="tab:green", alpha=0.85)
    ax.set_ylabel("sequences / second")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
