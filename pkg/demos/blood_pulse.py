"""Pressure waves in the three-vessel bifurcation over a few cardiac cycles.

    python demos/blood_pulse.py [--cycles 3] [--out blood_pulse.png]
"""
import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dlrenkf.harness import _bifurcation3
from dlrenkf.models.bloodflow import DT, P_EXT, BloodFlowModel, step_network


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cycles", type=int, default=3)
    ap.add_argument("--period", type=float, default=0.8)
    ap.add_argument("--out", default="blood_pulse.png")
    args = ap.parse_args()

    model = BloodFlowModel(_bifurcation3())
    mids = {v.id: model.midpoint_index(v.id) for v in model.network.vessels}
    n = int(round(args.cycles * args.period / DT))
    X, t = model.rest_state(), 0.0
    times, traces = np.empty(n), np.empty((n, len(mids)))
    for k in range(n):
        X = step_network(model, X, t)
        t += DT
        times[k] = t
        traces[k] = model.pressure(X)[list(mids.values()), 0]

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for j, vid in enumerate(mids):
        ax.plot(times, (traces[:, j] - P_EXT) / 133.322, label=f"vessel {vid}")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("p - p_ext [mmHg]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"saved {args.out}")


if __name__ == "__main__":
    main()
