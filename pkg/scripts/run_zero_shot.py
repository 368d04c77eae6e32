"""Train and evaluate the sampled agent over several seeds on the default gridworld.

Usage: python scripts/run_zero_shot.py [--seeds 0 1 2 3 4] [--steps N] [--out DIR]
"""

import argparse
from pathlib import Path

from tdjepa_lab import experiments as E
from tdjepa_lab.config import RunConfig, config_from_dict
from tdjepa_lab.io import atomic_write_text, write_json


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--steps", type=int, help="override the number of training steps")
    p.add_argument("--out", default="zero_shot_out")
    args = p.parse_args()
    d = RunConfig().to_dict()
    if args.steps is not None:
        d["train"]["steps"] = args.steps
    cfg = config_from_dict(d)
    out = Path(args.out)
    per_seed = []
    for seed in args.seeds:
        res = E.zero_shot_seed(seed, cfg)
        atomic_write_text(out / f"curve_seed{seed}.csv", res["curve_csv"])
        write_json(out / f"eval_seed{seed}.json", E.public_seed_result(res))
        ratios = [t["exact_value_ratio"] for t in res["tasks"]]
        print(f"seed {seed}: mean exact_value_ratio {sum(ratios) / len(ratios):.3f} ({res['train_seconds']:.0f}s training)")
        per_seed.append(res)
    summary = E.zero_shot_summary(per_seed, cfg.eval)
    write_json(out / "summary.json", summary)
    print(
        f"mean {summary['mean_exact_value_ratio']:.3f} +- {summary['stderr_over_seeds']:.3f}, "
        f"{summary['multiple_of_uniform']:.1f}x uniform, min eig psi {summary['min_eig_psi']:.3f}"
    )


if __name__ == "__main__":
    main()
