"""Compare the DEIM/CUR drift surrogate with the truncated SVD.

Builds a Fisher-KPP drift matrix for a spread ensemble of parameters and
prints, for each rank, the relative error of both approximations and the
fraction of drift entries the CUR surrogate needs.

    python demos/cur_vs_svd.py [--particles 60]
"""
import argparse

import numpy as np

from dlrenkf.hyper import cur_approximate, select_cur_indices
from dlrenkf.lowrank import truncated_svd
from dlrenkf.models.fisher_kpp import FisherKPP, initial_condition


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    model = FisherKPP()
    P = args.particles
    b = model.field.hypercube_bound
    theta = rng.uniform(-b, b, (model.n_params, P)) * 0.5
    u0 = initial_condition(model.grid)
    X = u0[:, None] + 0.05 * rng.standard_normal((model.dim, 1)) * rng.standard_normal((1, P))
    F = model.drift(X, theta)
    Fc = F - F.mean(axis=1, keepdims=True)
    Y = np.linalg.svd(X - X.mean(axis=1, keepdims=True), full_matrices=False)[2].T

    print(" rank   svd error   cur error   entries")
    for r in (1, 2, 4, 8, 12):
        svd = np.linalg.norm(Fc - truncated_svd(Fc, r).reconstruct()) / np.linalg.norm(Fc)
        sel = select_cur_indices(Y[:, :r], lambda c: Fc[:, c], lambda rows: Fc[rows])
        cur = cur_approximate(sel.columns, sel.cross, sel.rows).dense()
        err = np.linalg.norm(Fc - cur) / np.linalg.norm(Fc)
        frac = (model.dim * 2 * r + r * P) / (model.dim * P)
        print(f"{r:5d}   {svd:9.2e}   {err:9.2e}   {frac:7.1%}")


if __name__ == "__main__":
    main()
