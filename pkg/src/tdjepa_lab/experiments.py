"""Experiment drivers shared by the command line, scripts and acceptance tests.

Each driver returns plain dicts (JSON-ready, deterministic ordering) with a
top-level ``pass`` flag, plus any CSV text it produces.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import agent as ag
from . import closed_form as cf
from . import dynamics as dyn
from . import losses as L
from .config import DynamicsConfig, EnvConfig, EvalConfig, RunConfig, TheoryConfig
from .envs import (
    build_gridworld,
    generate_dataset,
    gridworld_from_ascii,
    make_goal_task,
    random_state_dist,
    sample_random_mdp,
)
from .mdp import (
    LITERAL,
    UNNORMALIZED,
    deterministic_policy,
    policy_kernel,
    rollout_values,
    successor_measure,
    value_of,
)
from .numerics import finite_diff_grad, grad_rel_error
from .representations import FORWARD, PredictorFamily, Representation, random_orthonormal


@dataclass(eq=False)
class Instance:
    mdp: object
    kernels: list
    rep: Representation
    weights: np.ndarray
    label: str


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def theory_instance(seed: int, index: int, cfg: TheoryConfig, gamma: float, symmetric: bool = True, general: bool = False) -> Instance:
    """Random MDP whose latent z follows the policy "always take action z".

    ``general`` gives a non-uniform rho, asymmetric kernels, unnormalized
    embeddings and alternates the D_rho mode.
    """
    rng = _rng(seed, index)
    S = int(rng.integers(cfg.min_states, cfg.max_states + 1))
    d_phi, d_psi = (int(rng.choice(cfg.dims)) for _ in range(2))
    n_z = int(rng.integers(1, cfg.max_latents + 1))
    if general:
        rho = random_state_dist(rng, S)
        mode = LITERAL if index % 2 else UNNORMALIZED
        mdp = sample_random_mdp(rng, S, n_z, gamma, symmetric=False, rho=rho, d_rho_mode=mode)
        rep = Representation(rng.standard_normal((S, d_phi)), rng.standard_normal((S, d_psi)))
    else:
        mdp = sample_random_mdp(rng, S, n_z, gamma, symmetric=symmetric)
        rep = Representation(random_orthonormal(rng, S, d_phi), random_orthonormal(rng, S, d_psi))
    kernels = [policy_kernel(mdp, deterministic_policy(np.full(S, z), n_z)) for z in range(n_z)]
    weights = rng.dirichlet(np.full(n_z, 2.0)) if n_z > 1 else np.ones(1)
    weights = weights / weights.sum()
    label = f"seed={seed},i={index},S={S},d_phi={d_phi},d_psi={d_psi},Z={n_z},gamma={gamma}"
    return Instance(mdp, kernels, rep, weights, label)


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    out["runtime_s"] = time.perf_counter() - t0
    return out


def _summarize(reports) -> dict:
    rows = [r.to_dict() for r in reports]
    worst = max((c.residual - c.tol for r in reports for c in r.checks), default=-np.inf)
    return {
        "pass": all(r.passed for r in reports),
        "n_reports": len(rows),
        "n_checks": sum(len(r.checks) for r in reports),
        "n_skipped": sum(r.skipped for r in reports),
        "max_residual": max((r.max_residual() for r in reports), default=0.0),
        "worst_margin": float(worst),
        "reports": rows,
    }


# --------------------------------------------------------------------------
# closed forms and bounds


def theorem1_suite(seed: int, cfg: TheoryConfig, tol_scale: float = 1.0) -> dict:
    def run():
        reports = []
        for i in range(cfg.n_instances):
            for gamma in cfg.gammas:
                inst = theory_instance(seed, i, cfg, gamma, cfg.symmetric)
                rep = cf.verify_theorem1(inst.rep, inst.kernels, inst.mdp, _rng(seed, i, 1), cfg.n_random, inst.weights, cf.DEFAULT_TOL * tol_scale)
                rep.info["instance"] = inst.label
                reports.append(rep)
        return _summarize(reports)

    return _timed(run)


def theorem3_suite(seed: int, cfg: TheoryConfig, tol_scale: float = 1.0) -> dict:
    def run():
        reports = []
        for i in range(cfg.n_instances):
            for gamma in cfg.gammas:
                inst = theory_instance(seed, i, cfg, gamma, cfg.symmetric)
                tol = cf.default_tol(gamma) * tol_scale
                rep = cf.verify_theorem3(inst.rep, inst.kernels, inst.mdp, _rng(seed, i, 3), cfg.n_random, inst.weights, tol)
                rep.info["instance"] = inst.label
                reports.append(rep)
        return _summarize(reports)

    return _timed(run)


def theorem4_suite(seed: int, cfg: TheoryConfig, tol_scale: float = 1.0) -> dict:
    """Bounds at the SM-optimal predictors and at random predictors."""

    def run():
        reports = []
        for i in range(cfg.n_instances):
            for gamma in cfg.gammas:
                inst = theory_instance(seed, i, cfg, gamma, cfg.symmetric)
                rng = _rng(seed, i, 4)
                opt = cf.optimal_predictor(L.LossKind(L.SM), inst.rep, inst.kernels, inst.mdp, inst.weights)
                rand = PredictorFamily(
                    [rng.standard_normal(m.shape) for m in opt.mats], FORWARD, inst.weights
                )
                for tag, fam in (("optimal", opt), ("random", rand)):
                    rep = cf.verify_theorem4(inst.rep, fam, inst.kernels, inst.mdp, cfg.n_rewards, rng, 1e-9 * tol_scale)
                    rep.info["instance"] = f"{inst.label},preds={tag}"
                    reports.append(rep)
        return _summarize(reports)

    return _timed(run)


def gradient_matching_suite(seed: int, cfg: TheoryConfig, tol_scale: float = 1.0) -> dict:
    """Generalized losses versus density losses, with no structural assumption."""

    def run():
        reports = []
        for i in range(cfg.n_instances):
            for gamma in cfg.gammas:
                inst = theory_instance(seed, i, cfg, gamma, general=True)
                for kernel in L.KERNELS:
                    rep = cf.verify_gradient_matching(
                        inst.rep, inst.kernels, inst.mdp, kernel, _rng(seed, i, 5), cfg.n_random, inst.weights, 1e-9 * tol_scale
                    )
                    rep.info["instance"] = inst.label
                    reports.append(rep)
        return _summarize(reports)

    return _timed(run)


def fd_oracle_suite(seed: int, cfg: TheoryConfig, tol: float = 1e-5) -> dict:
    """Analytic gradients of every loss kind against central differences.

    Stop-gradient terms stay frozen at the unperturbed parameters.
    """

    def run():
        rows = []
        for i in range(cfg.n_fd_instances):
            inst = theory_instance(seed, 1000 + i, cfg, 0.8, general=True)
            rng = _rng(seed, 1000 + i, 6)
            rep = inst.rep
            kinds = L.all_kinds() + [L.LossKind(t, k) for t in (L.DENSITY, L.GEN_FWD, L.GEN_BWD) for k in (L.ONE_STEP,)]
            kinds += [L.LossKind(L.GEN_FWD, L.BOOTSTRAP), L.LossKind(L.GEN_BWD, L.BOOTSTRAP)]
            for kind in kinds:
                shape = (rep.d_phi, rep.d_psi) if kind.orientation == FORWARD else (rep.d_psi, rep.d_phi)
                fam = PredictorFamily([rng.standard_normal(shape) for _ in inst.kernels], kind.orientation, inst.weights)
                bundle = L.eval_grads(kind, rep, fam, inst.kernels, inst.mdp)
                frozen = (rep.phi, rep.psi, fam.mats)
                w = fam.weights

                def f_phi(x):
                    return L.surrogate_loss(kind, (x, rep.psi, fam.mats), frozen, w, inst.kernels, inst.mdp)

                def f_psi(x):
                    return L.surrogate_loss(kind, (rep.phi, x, fam.mats), frozen, w, inst.kernels, inst.mdp)

                errs = {
                    "phi": grad_rel_error(finite_diff_grad(f_phi, rep.phi), bundle.grad_phi),
                    "psi": grad_rel_error(finite_diff_grad(f_psi, rep.psi), bundle.grad_psi),
                }
                t_errs = []
                for z in range(len(fam)):

                    def f_T(x, z=z):
                        mats = list(fam.mats)
                        mats[z] = x
                        return L.surrogate_loss(kind, (rep.phi, rep.psi, mats), frozen, w, inst.kernels, inst.mdp)

                    t_errs.append(grad_rel_error(finite_diff_grad(f_T, fam.mats[z]), bundle.grad_T[z]))
                errs["T"] = max(t_errs)
                for param, e in errs.items():
                    rows.append({"instance": inst.label, "kind": str(kind), "param": param, "rel_error": float(e), "pass": bool(e < tol)})
        return {"pass": all(r["pass"] for r in rows), "max_rel_error": max(r["rel_error"] for r in rows), "tol": tol, "rows": rows}

    return _timed(run)


# --------------------------------------------------------------------------
# successor-measure oracles


def truncated_series(p, gamma: float, n_terms: int = 100) -> np.ndarray:
    """sum_{t < n_terms} gamma^t P^{t+1}."""
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    power = p.copy()
    for t in range(n_terms):
        out += gamma**t * power
        power = power @ p
    return out


def successor_oracle_suite(seed: int, n_rollouts: int = 100_000, horizon: int = 200) -> dict:
    def run():
        checks = []

        def add(name, residual, tol):
            checks.append({"name": name, "residual": float(residual), "tol": tol, "pass": bool(residual <= tol)})

        swap = np.array([[0.0, 1.0], [1.0, 0.0]])
        m = successor_measure(swap, 0.5)
        add("swap_chain_closed_form", np.max(np.abs(m - np.array([[2 / 3, 4 / 3], [4 / 3, 2 / 3]]))), 1e-12)
        add("swap_chain_series", np.max(np.abs(m - truncated_series(swap, 0.5, 100))), 1e-9)
        add("swap_chain_value", np.max(np.abs(value_of(m, [0.0, 1.0]) - np.array([4 / 3, 2 / 3]))), 1e-12)
        add("identity_kernel", np.max(np.abs(successor_measure(np.eye(4), 0.9) - 10 * np.eye(4))), 1e-12)
        rng = _rng(seed, 7)
        for i, gamma in enumerate((0.5, 0.8, 0.9)):
            mdp = sample_random_mdp(rng, 5 + i, 2, gamma)
            pi = rng.dirichlet(np.ones(2), size=mdp.n_states)
            p = policy_kernel(mdp, pi)
            m = successor_measure(p, gamma)
            n_terms = int(np.ceil(np.log(1e-14) / np.log(gamma)))
            add(f"series[gamma={gamma}]", np.max(np.abs(m - truncated_series(p, gamma, n_terms))), 1e-9)
            add(f"forward_bellman[gamma={gamma}]", np.linalg.norm(m - p - gamma * p @ m), 1e-9)
            add(f"backward_bellman[gamma={gamma}]", np.linalg.norm(m - p - gamma * m @ p), 1e-9)
            add(f"row_sums[gamma={gamma}]", np.max(np.abs(m.sum(axis=1) - 1 / (1 - gamma))), 1e-9)
            if gamma != 0.9:
                continue
            r = rng.standard_normal(mdp.n_states)
            v = value_of(m, r)
            rets = rollout_values(mdp, pi, r, rng, n_rollouts, horizon)
            se = rets.std(ddof=1) / np.sqrt(n_rollouts)
            # residual in standard errors; pass at 3
            add(f"monte_carlo_value[gamma={gamma}]", abs(rets.mean() - float(mdp.rho @ v)) / se, 3.0)
        return {"pass": all(c["pass"] for c in checks), "checks": checks}

    return _timed(run)


# --------------------------------------------------------------------------
# dynamics


def _dyn_problem(seed: int, cfg: DynamicsConfig, general: bool = False):
    rng = _rng(seed, 8)
    S = cfg.n_states
    rho = random_state_dist(rng, S) if general else None
    mdp = sample_random_mdp(rng, S, cfg.n_latents, cfg.gamma, rho=rho)
    kernels = [mdp.P[a] for a in range(cfg.n_latents)]
    x0 = dyn.default_init(rng, S, cfg.dim, cfg.dim)
    if general:
        x0 = dyn.OdeState(rng.standard_normal((S, cfg.dim)), rng.standard_normal((S, cfg.dim)))
    return mdp, kernels, x0


def drift_check(seed: int, cfg: DynamicsConfig) -> dict:
    """Covariance conservation of the TD-JEPA pair and its step-halving ratio."""

    def run():
        mdp, kernels, x0 = _dyn_problem(seed, cfg)
        coarse = dyn.simulate(dyn.TD_JEPA, x0, cfg.step, cfg.horizon, kernels, mdp, record_every=cfg.record_every)
        fine = dyn.simulate(
            dyn.TD_JEPA, x0, cfg.fine_step, cfg.horizon, kernels, mdp, record_every=2 * cfg.record_every, diagnostics=False
        )
        d_coarse = dyn.covariance_drift(coarse)
        d_fine = dyn.covariance_drift(fine)
        ratio = d_coarse / d_fine if d_fine > 0 else float("inf")
        sv = dyn.min_singular_values(coarse)
        lo, hi = cfg.ratio_range
        out = {
            "drift_step": float(d_coarse),
            "drift_fine_step": float(d_fine),
            "ratio": float(ratio),
            "min_singular_value_ratio": float(sv.min() / sv[0]),
            "drift_ok": bool(d_coarse < cfg.drift_tol),
            "ratio_ok": bool(lo <= ratio <= hi),
            "non_collapse_ok": bool(sv.min() > 0.5 * sv[0]),
        }
        out["pass"] = out["drift_ok"] and out["ratio_ok"] and out["non_collapse_ok"]
        out["csv"] = coarse.to_csv()
        return out

    return _timed(run)


def lyapunov_check(seed: int, cfg: DynamicsConfig) -> dict:
    """Density loss along generalized-loss dynamics (non-uniform rho, asymmetric kernels)."""

    def run():
        mdp, kernels, x0 = _dyn_problem(seed, cfg, general=True)
        per = {}
        for kernel in cfg.lyapunov_kernels:
            traj = dyn.simulate(dyn.KindPair(dyn.GEN, kernel), x0, cfg.lyapunov_step, cfg.horizon, kernels, mdp, record_every=1, diagnostics=False)
            trace = dyn.lyapunov_trace(traj, kernels, mdp)
            inc = dyn.max_increase(trace)
            per[kernel] = {
                "start": float(trace[0]),
                "end": float(trace[-1]),
                "max_increase": inc,
                "pass": bool(inc <= cfg.lyapunov_tol),
                "trace": [float(v) for v in trace],
            }
        return {"pass": all(v["pass"] for v in per.values()), "kernels": per}

    return _timed(run)


# --------------------------------------------------------------------------
# sampled agent


def make_env(cfg: EnvConfig):
    """(mdp, goal states) from an ASCII map or an open width x height grid."""
    if cfg.ascii_map:
        mdp, goals = gridworld_from_ascii(cfg.ascii_map, cfg.slip, cfg.gamma)
    else:
        mdp, goals = build_gridworld(cfg.width, cfg.height, slip=cfg.slip, gamma=cfg.gamma), []
    return mdp, goals


def default_goals(mdp, map_goals, cfg: EvalConfig) -> list:
    if cfg.goals is not None:
        return [int(g) for g in cfg.goals]
    if map_goals:
        return list(map_goals)
    S = mdp.n_states
    if mdp.shape is not None and not mdp.walls:
        w, h = mdp.shape
        return sorted({0, w - 1, (h // 2) * w + w // 2, (h - 1) * w, S - 1})
    return sorted({0, S // 2, S - 1})


def zero_shot_seed(seed: int, cfg: RunConfig) -> dict:
    """Generate data, train, evaluate every goal task for one seed."""
    mdp, map_goals = make_env(cfg.env)
    goals = default_goals(mdp, map_goals, cfg.eval)
    data_rng = _rng(seed, 10)
    ds = generate_dataset(mdp, data_rng, cfg.env.n_transitions, cfg.env.dataset_mode, cfg.env.rollout_len, seed)
    t0 = time.perf_counter()
    agent, curve = ag.train(mdp, ds, cfg.train, _rng(seed, 11))
    train_s = time.perf_counter() - t0
    eval_rng = _rng(seed, 12)
    tasks = []
    for g in goals:
        task = make_goal_task(mdp, g)
        res = ag.evaluate_zero_shot(agent, mdp, task, cfg.train, cfg.eval.episodes, cfg.eval.horizon, eval_rng, ds)
        res["uniform_value_ratio"] = ag.uniform_value_ratio(mdp, task)
        tasks.append(res)
    return {
        "seed": seed,
        "tasks": tasks,
        "min_eig_phi": float(np.nanmin(curve.column("min_eig_phi"))),
        "min_eig_psi": float(np.nanmin(curve.column("min_eig_psi"))),
        "curve_csv": curve.to_csv(),
        "train_seconds": train_s,
        "agent": agent,
    }


def zero_shot_summary(per_seed: list, cfg: EvalConfig) -> dict:
    ratios = np.array([[t["exact_value_ratio"] for t in r["tasks"]] for r in per_seed])
    unif = np.array([[t["uniform_value_ratio"] for t in r["tasks"]] for r in per_seed])
    seed_means = ratios.mean(axis=1)
    mean = float(ratios.mean())
    u = float(unif.mean())
    min_eig_psi = min(r["min_eig_psi"] for r in per_seed)
    out = {
        "mean_exact_value_ratio": mean,
        "stderr_over_seeds": float(seed_means.std(ddof=1) / np.sqrt(len(seed_means))) if len(seed_means) > 1 else 0.0,
        "per_task_mean": ratios.mean(axis=0).tolist(),
        "uniform_value_ratio": u,
        "multiple_of_uniform": mean / u,
        "min_eig_psi": min_eig_psi,
        "min_eig_phi": min(r["min_eig_phi"] for r in per_seed),
        "ratio_ok": bool(mean >= cfg.min_value_ratio),
        "uniform_ok": bool(mean >= cfg.min_uniform_multiple * u),
        "cov_ok": bool(min_eig_psi > cfg.min_cov_eig),
    }
    out["pass"] = out["ratio_ok"] and out["uniform_ok"] and out["cov_ok"]
    return out


def public_seed_result(res: dict) -> dict:
    """Seed result without the agent object or CSV text."""
    return {k: v for k, v in res.items() if k not in ("agent", "curve_csv", "train_seconds")}
