"""Tabulate every loss kind and its gradient norms on one random instance.

Usage: python scripts/loss_sweep.py [--seed N] [--states S] [--gamma G] > losses.csv
"""

import argparse
import sys

import numpy as np

from tdjepa_lab import closed_form as cf
from tdjepa_lab import losses as L
from tdjepa_lab.envs import sample_random_mdp
from tdjepa_lab.representations import PredictorFamily, Representation, random_orthonormal


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--states", type=int, default=8)
    p.add_argument("--latents", type=int, default=2)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--optimal", action="store_true", help="evaluate at the closed-form predictors instead of perturbed ones")
    args = p.parse_args()
    rng = np.random.default_rng(args.seed)
    mdp = sample_random_mdp(rng, args.states, args.latents, args.gamma, symmetric=True)
    kernels = L.KernelSet.build(list(mdp.P), mdp)
    rep = Representation(random_orthonormal(rng, args.states, args.dim), random_orthonormal(rng, args.states, args.dim))
    rows = []
    for kind in L.all_kinds():
        preds = cf.optimal_predictor(kind, rep, kernels, mdp)
        if not args.optimal:
            noisy = [m + 0.1 * rng.standard_normal(m.shape) for m in preds.mats]
            preds = PredictorFamily(noisy, preds.orientation, preds.weights)
        rows.append((kind, L.eval_grads(kind, rep, preds, kernels, mdp)))
    sys.stdout.write(L.loss_sweep_csv(rows))


if __name__ == "__main__":
    main()
