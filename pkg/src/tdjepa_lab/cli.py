"""Command line: verify, gen, train, eval, sweep.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import agent as ag
from . import experiments as E
from . import io
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .dynamics import DynamicsError
from .envs import SinkhornError, generate_dataset, make_goal_task, render_ascii_map
from .mdp import RewardTask
from .numerics import NonFiniteError, SingularMatrixError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _set_path(d: dict, dotted: str, raw: str):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    try:
        d[keys[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        d[keys[-1]] = raw


def resolve_config(args, base: dict | None = None) -> RunConfig:
    """Config file (or ``base``), then --set overrides, then --seed / --tolerance-scale."""
    if base is None or args.config:
        base = load_config(args.config).to_dict()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(base, key.strip(), raw)
    if args.seed is not None:
        base["seed"] = args.seed
    if args.tolerance_scale is not None:
        base["tolerance_scale"] = args.tolerance_scale
    return config_from_dict(base)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    out = _out(args)
    seed, ts = cfg.seed, cfg.tolerance_scale
    sections = {
        "theorem1": E.theorem1_suite(seed, cfg.theory, ts),
        "theorem3": E.theorem3_suite(seed, cfg.theory, ts),
        "theorem4": E.theorem4_suite(seed, cfg.theory, ts),
        "gradient_matching": E.gradient_matching_suite(seed, cfg.theory, ts),
        "gradient_oracle": E.fd_oracle_suite(seed, cfg.theory, 1e-5 * ts),
        "successor_oracles": E.successor_oracle_suite(seed),
        "lyapunov": E.lyapunov_check(seed, cfg.dynamics),
        "covariance_drift": E.drift_check(seed, cfg.dynamics),
    }
    io.atomic_write_text(out / "dynamics_diagnostics.csv", sections["covariance_drift"].pop("csv"))
    for sec in sections.values():
        sec.pop("runtime_s", None)
    report = {"seed": seed, "tolerance_scale": ts, "pass": all(s["pass"] for s in sections.values()), "sections": sections}
    io.write_json(out / "verify_report.json", report)
    for name, sec in sections.items():
        skipped = sec.get("n_skipped")
        note = f" ({skipped} assumption-skip)" if skipped else ""
        print(f"{name}: {'PASS' if sec['pass'] else 'FAIL'}{note}")
    return EXIT_OK if report["pass"] else EXIT_FAIL


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    out = _out(args)
    mdp, goals = E.make_env(cfg.env)
    io.write_mdp(out / "mdp.json", mdp)
    ds = generate_dataset(mdp, np.random.default_rng([cfg.seed, 10]), cfg.env.n_transitions, cfg.env.dataset_mode, cfg.env.rollout_len, cfg.seed)
    io.write_dataset(out / "dataset.csv", ds)
    if mdp.shape is not None:
        from .envs import grid_cells

        w, h = mdp.shape
        cells = grid_cells(w, h, mdp.walls)
        io.atomic_write_text(out / "map.txt", render_ascii_map(w, h, mdp.walls, [cells[g] for g in goals]))
    print(f"wrote {out / 'mdp.json'} ({mdp.n_states} states) and {len(ds)} transitions")
    return EXIT_OK


def _load_env_and_data(args, cfg: RunConfig):
    if args.mdp:
        mdp = io.read_mdp(args.mdp)
        goals = []
    else:
        mdp, goals = E.make_env(cfg.env)
    if getattr(args, "dataset", None):
        ds = io.read_dataset(args.dataset, mdp)
    else:
        ds = generate_dataset(mdp, np.random.default_rng([cfg.seed, 10]), cfg.env.n_transitions, cfg.env.dataset_mode, cfg.env.rollout_len, cfg.seed)
    return mdp, goals, ds


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out(args)
    mdp, _, ds = _load_env_and_data(args, cfg)
    agent, curve = ag.train(mdp, ds, cfg.train, np.random.default_rng([cfg.seed, 11]))
    meta = {"seed": cfg.seed, "config": cfg.to_dict(), "predictor": agent.predictor, "n_states": mdp.n_states, "n_actions": mdp.n_actions}
    io.save_checkpoint(out / "checkpoint", agent.flat_arrays(), meta)
    io.atomic_write_text(out / "curve.csv", curve.to_csv())
    print(f"trained {cfg.train.steps} steps; checkpoint in {out / 'checkpoint'}")
    return EXIT_OK


def _parse_goals(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--goals must be comma-separated state indices, got {text!r}") from exc


def cmd_eval(args) -> int:
    arrays, meta = io.load_checkpoint(args.checkpoint)
    cfg = resolve_config(args, meta.get("config", {}))
    out = _out(args)
    agent = ag.AgentParams.from_flat_arrays(arrays, meta.get("predictor", ag.BILINEAR))
    if args.mdp:
        mdp, map_goals = io.read_mdp(args.mdp), []
    else:
        mdp, map_goals = E.make_env(cfg.env)
    if agent.n_states != mdp.n_states:
        raise UsageError(f"checkpoint has {agent.n_states} states but the MDP has {mdp.n_states}")
    ds = io.read_dataset(args.dataset, mdp) if args.dataset else None
    if args.reward:
        r = io.read_matrix_csv(args.reward).reshape(-1)
        if r.size != mdp.n_states:
            raise UsageError(f"reward has {r.size} entries for {mdp.n_states} states")
        tasks = [RewardTask(r, Path(args.reward).stem)]
    else:
        goals = _parse_goals(args.goals) if args.goals else E.default_goals(mdp, map_goals, cfg.eval)
        tasks = [make_goal_task(mdp, g) for g in goals]
    rng = np.random.default_rng([cfg.seed, 12])
    results = []
    for task in tasks:
        res = ag.evaluate_zero_shot(agent, mdp, task, cfg.train, cfg.eval.episodes, cfg.eval.horizon, rng, ds)
        samples = ds.s_next if ds is not None else np.arange(mdp.n_states)
        res["z"] = ag.infer_task(agent, list(zip(samples.tolist(), task.reward[samples].tolist())), cfg.train).z.tolist()
        res["uniform_value_ratio"] = ag.uniform_value_ratio(mdp, task)
        results.append(res)
        io.write_json(out / f"eval_{task.name}.json", res)
    io.write_json(out / "eval.json", {"seed": cfg.seed, "tasks": results})
    for res in results:
        print(f"{res['task']}: exact_value_ratio={res['exact_value_ratio']:.4f}")
    return EXIT_OK


def _sweep_job(payload):
    cfg_dict, seed = payload
    cfg = config_from_dict(cfg_dict)
    res = E.zero_shot_seed(seed, cfg)
    return seed, cfg.train.reg, cfg.train.tau, E.public_seed_result(res), res["curve_csv"]


SWEEP_HEADER = ["reg", "tau", "seed", "task", "exact_value_ratio", "return_ratio", "uniform_value_ratio", "min_eig_psi"]


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    out = _out(args)
    jobs = []
    for reg in cfg.sweep.reg:
        for tau in cfg.sweep.tau:
            d = cfg.to_dict()
            d["train"]["reg"] = float(reg)
            d["train"]["tau"] = float(tau)
            jobs.extend((d, int(seed)) for seed in cfg.sweep.seeds)
    n_jobs = max(1, args.jobs or 1)
    if n_jobs == 1:
        results = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    results.sort(key=lambda r: (r[1], r[2], r[0]))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for seed, reg, tau, res, curve_csv in results:
        io.atomic_write_text(out / f"curve_reg{reg!r}_tau{tau!r}_seed{seed}.csv", curve_csv)
        for t in res["tasks"]:
            w.writerow([repr(reg), repr(tau), seed, t["task"], repr(t["exact_value_ratio"]), repr(t["return_ratio"]), repr(t["uniform_value_ratio"]), repr(res["min_eig_psi"])])
    io.atomic_write_text(out / "sweep.csv", buf.getvalue())
    print(f"{len(results)} runs; merged table in {out / 'sweep.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: theory, dynamics, env, train, eval, sweep)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for sweeps")
    common.add_argument("--tolerance-scale", type=float, dest="tolerance_scale", help="multiply verification tolerances")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.steps=0")

    parser = argparse.ArgumentParser(prog="tdjepa-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="run every theory and dynamics check")
    sub.add_parser("gen", parents=[common], help="write the MDP, dataset and map")
    p = sub.add_parser("train", parents=[common], help="train the sampled agent")
    p.add_argument("--mdp", help="MDP JSON (default: build from config)")
    p.add_argument("--dataset", help="dataset CSV (default: generate from config)")
    p = sub.add_parser("eval", parents=[common], help="zero-shot evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mdp")
    p.add_argument("--dataset", help="relabel rewards on these next states")
    p.add_argument("--goals", help="comma-separated goal states")
    p.add_argument("--reward", help="reward vector file (matrix CSV)")
    sub.add_parser("sweep", parents=[common], help="seed x reg x tau grid with a merged CSV")
    return parser


COMMANDS = {"verify": cmd_verify, "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularMatrixError, NonFiniteError, DynamicsError, SinkhornError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
