import argparse
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


def plot_energy(df, ax):
    ax.plot(df["t"], df["kinetic"], label="kinetic")
    ax.plot(df["t"], df["potential"], label="potential")
    ax.plot(df["t"], df["total"], label="total", color="black")
    ax.set_xlabel("t")
    ax.set_title("Energy")
    ax.legend()


def plot_energy_drift(df, ax):
    total = df["total"].to_numpy()
    scale = max(abs(total[0]), 1e-300)
    ax.semilogy(df["t"], np.abs(total - total[0]) / scale + 1e-18)
    ax.set_xlabel("t")
    ax.set_title("Relative energy drift")


def plot_distance(df, ax):
    ax.semilogy(df["t"], df["min_shield_distance"])
    ax.set_xlabel("t")
    ax.set_title("Min shield distance")


def plot_identities(df, ax):
    ax.semilogy(df["t"], df["speed_work_residual"] + 1e-18, label="speed-work")
    ax.semilogy(df["t"], df["shield_balance_residual"] + 1e-18, label="shield balance")
    ax.set_xlabel("t")
    ax.set_title("Identity residuals")
    ax.legend()


def plot_q(df, ax):
    cols = [c for c in df.columns if c.startswith("Q_R")]
    for c in cols:
        if df[c].notna().any():
            ax.semilogy(df["t"], df[c], label=c)
    ax.set_xlabel("t")
    ax.set_title("Q(R, t)")
    if cols:
        ax.legend()


def plot_speed(df, ax):
    ax.plot(df["t"], df["max_speed"], label="max |v|")
    ax.plot(df["t"], df["running_max_speed"], label="running max", linestyle="--")
    ax.set_xlabel("t")
    ax.set_title("Speeds")
    ax.legend()


def plot_run(csv_path, out_dir):
    """Six-panel summary of a diagnostics CSV, saved as <out_dir>/<run>.png."""
    df = pd.read_csv(csv_path)
    fig, axes = plt.subplots(2, 3, figsize=(15, 8))
    plot_energy(df, axes[0, 0])
    plot_energy_drift(df, axes[0, 1])
    plot_distance(df, axes[0, 2])
    plot_identities(df, axes[1, 0])
    plot_q(df, axes[1, 1])
    plot_speed(df, axes[1, 2])
    fig.tight_layout()

    run = os.path.basename(os.path.dirname(os.path.abspath(csv_path)))
    os.makedirs(out_dir, exist_ok=True)
    out = os.path.join(out_dir, f"{run}.png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"[PLOT] saved {out}")
    return out


if __name__ == "__main__":

    parser = argparse.ArgumentParser(description="Plot diagnostics of finished runs")

    parser.add_argument(
        "csv",
        type=str,
        nargs="+",
        help="diagnostics.csv files written by main.py simulate",
    )
    parser.add_argument(
        "--out",
        "-O",
        type=str,
        default="images",
    )
    args = parser.parse_args()

    for path in args.csv:
        plot_run(path, args.out)
