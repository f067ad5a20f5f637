"""Plot a ``lidarunc sim`` CSV: fast vs rigorous covariances and step timings.

    lidarunc sim --out sim.csv
    python3 docs/plot_comparison.py sim.csv comparison.png

Needs matplotlib, which the package itself does not depend on.
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from lidarunc.sim import read_csv  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("csv")
    parser.add_argument("png")
    args = parser.parse_args()

    rows = read_csv(args.csv)
    k = [int(r["k"]) for r in rows]
    series = [("trace_n_rig", "trace_n_lufa", "trace(A_n)")]
    series += [(f"a_lambda_rig_{j}", f"a_lambda_lufa_{j}", f"A_lambda{j}") for j in (1, 2, 3)]
    fig, axes = plt.subplots(1, len(series) + 1, figsize=(4 * (len(series) + 1), 3.5))
    for ax, (rig, fast, title) in zip(axes, series):
        ax.semilogy(k, [float(r[rig]) for r in rows], label="rigorous")
        ax.semilogy(k, [float(r[fast]) for r in rows], "--", label="fast")
        ax.set_title(title)
        ax.set_xlabel("points")
    axes[0].legend()
    ax = axes[-1]
    ax.plot(k, [int(r["t_rig_ns"]) / 1e3 for r in rows], label="rigorous")
    ax.plot(k, [int(r["t_lufa_ns"]) / 1e3 for r in rows], label="scheduled")
    ax.set_title("propagation time")
    ax.set_xlabel("points")
    ax.set_ylabel("us")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.png, dpi=120)


if __name__ == "__main__":
    main()
