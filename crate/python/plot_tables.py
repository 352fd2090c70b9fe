"""Plot the CSV tables written by the discwsod commands.

    python python/plot_tables.py RUN_DIR [RUN_DIR ...] --out plots/

For each directory, draws whatever it finds: per-round training curves
from metrics.csv, the variant bar chart from ablation_summary.csv, and the
lambda / score-threshold sweeps.
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def plot_metrics(path, out):
    df = pd.read_csv(path)
    if df.empty:
        return None
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(df["round"], df["cross"], marker="o", label="cross")
    axes[0].plot(df["round"], df["self_pred"], marker="o", label="self (pred)")
    axes[0].plot(df["round"], df["self_cond"], marker="o", label="self (cond)")
    axes[0].set_title("diversity terms")
    axes[0].legend()
    axes[1].plot(df["round"], df["disc"], marker="o")
    axes[1].set_title("objective")
    axes[2].plot(df["round"], df["corloc"], marker="o")
    axes[2].set_title("training CorLoc")
    axes[2].set_ylim(0, 1)
    for ax in axes:
        ax.set_xlabel("round")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_ablation(path, out):
    df = pd.read_csv(path)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, col in zip(axes, ["map", "corloc"]):
        ax.bar(df["variant"], df[f"{col}_mean"], yerr=df[f"{col}_sd"], capsize=4)
        ax.set_title(f"{col} (mean over {df['runs'].iloc[0]} seeds)")
        ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_sweep(path, out):
    df = pd.read_csv(path)
    key = df.columns[0]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for col in ["map", "corloc"]:
        ax.errorbar(df[key], df[f"{col}_mean"], yerr=df[f"{col}_sd"], marker="o", capsize=3, label=col)
    ax.set_xlabel(key)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


PLOTTERS = {
    "metrics.csv": plot_metrics,
    "ablation_summary.csv": plot_ablation,
    "lambda_sweep.csv": plot_sweep,
    "threshold_sweep.csv": plot_sweep,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("runs", nargs="+", type=Path)
    ap.add_argument("--out", type=Path, default=Path("plots"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for run in args.runs:
        for name, plot in PLOTTERS.items():
            src = run / name
            if src.exists():
                dst = args.out / f"{run.name}_{src.stem}.png"
                if plot(src, dst):
                    print(f"wrote {dst}")


if __name__ == "__main__":
    main()
