"""Run every exact-oracle and dynamics suite once and print a one-line summary each.

Usage: python scripts/run_verification.py [--seed N] [--out report.json]
"""

import argparse

from tdjepa_lab import experiments as E
from tdjepa_lab.config import RunConfig
from tdjepa_lab.io import write_json


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional JSON report path")
    args = p.parse_args()
    cfg = RunConfig(seed=args.seed)
    suites = {
        "closed_forms_mc": lambda: E.theorem1_suite(args.seed, cfg.theory),
        "closed_forms_td": lambda: E.theorem3_suite(args.seed, cfg.theory),
        "evaluation_bound": lambda: E.theorem4_suite(args.seed, cfg.theory),
        "gradient_matching": lambda: E.gradient_matching_suite(args.seed, cfg.theory),
        "gradient_oracle": lambda: E.fd_oracle_suite(args.seed, cfg.theory),
        "successor_oracles": lambda: E.successor_oracle_suite(args.seed),
        "lyapunov": lambda: E.lyapunov_check(args.seed, cfg.dynamics),
        "covariance_drift": lambda: E.drift_check(args.seed, cfg.dynamics),
    }
    results = {}
    for name, fn in suites.items():
        res = fn()
        res.pop("csv", None)
        results[name] = res
        worst = res.get("max_residual", res.get("max_rel_error", res.get("drift_step")))
        extra = f" worst={worst:.2e}" if isinstance(worst, float) else ""
        print(f"{name:20s} {'PASS' if res['pass'] else 'FAIL'}{extra} ({res.get('runtime_s', 0.0):.1f}s)")
    if args.out:
        write_json(args.out, results)


if __name__ == "__main__":
    main()
