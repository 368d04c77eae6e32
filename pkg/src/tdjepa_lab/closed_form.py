"""Closed-form optimal predictors and theorem verifiers.

The closed forms below are the stationary points of each loss in T_z (the
stop-gradient gradient for bootstrapped kinds) for arbitrary D_rho and
covariances. Under identity covariances and D_rho = I they reduce to the
familiar projections, e.g. T = phi^T M psi for SM.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .losses import KernelSet, LossKind
from .mdp import UNNORMALIZED, TabularMDP
from .numerics import sample_unit_sphere, solve
from .representations import (
    BACKWARD,
    FORWARD,
    PredictorFamily,
    Representation,
    covariance,
    is_orthonormal,
    oblique_projection,
    orthogonal_projection,
)

DEFAULT_TOL = 1e-9
LOOSE_TOL = 1e-8


def default_tol(gamma: float) -> float:
    return LOOSE_TOL if gamma >= 0.9 else DEFAULT_TOL


def _predictor(kind: LossKind, phi, psi, ks: KernelSet, z: int) -> np.ndarray:
    d, g = ks.d, ks.gamma
    S = phi.shape[0]
    tag = kind.tag
    P = ks.P[z]
    if tag == L.SM:
        left = solve(phi.T @ phi, phi.T @ ks.M[z] @ psi)
        return solve(psi.T @ psi, left.T).T
    fwd = kind.orientation == FORWARD
    x, y = (phi, psi) if fwd else (psi, phi)
    Dx = d[:, None] * x
    cov_x = x.T @ Dx
    cov_y = y.T @ (d[:, None] * y)
    if tag in (L.MC_JEPA_FWD, L.MC_JEPA_BWD):
        return solve(cov_x, Dx.T @ ks.M[z] @ y)
    if tag in (L.TD_JEPA_FWD, L.TD_JEPA_BWD):
        A = Dx.T @ (np.eye(S) - g * P) @ x
        return solve(A, Dx.T @ P @ y)
    bootstrapped = tag in (L.TD_FW, L.TD_BW) or kind.kernel == L.BOOTSTRAP
    if bootstrapped:
        K = P if fwd else ks.adjoint(L.ONE_STEP)[z]
        A = Dx.T @ (np.eye(S) - g * K) @ x
        left = solve(A, Dx.T @ K @ y)
    else:
        K = ks.xi(kind.kernel)[z] if fwd else ks.adjoint(kind.kernel)[z]
        left = solve(cov_x, Dx.T @ K @ y)
    return solve(cov_y, left.T).T


def optimal_predictor(kind: LossKind, rep: Representation, kernels, mdp: TabularMDP, weights=None) -> PredictorFamily:
    """Predictor family at which the T-gradient of ``kind`` vanishes."""
    ks = KernelSet.build(kernels, mdp)
    mats = [_predictor(kind, rep.phi, rep.psi, ks, z) for z in range(len(ks))]
    return PredictorFamily(mats, kind.orientation, weights)


def numeric_predictor(kind: LossKind, rep: Representation, kernels, mdp: TabularMDP, weights=None) -> PredictorFamily:
    """Normal-equation oracle: probe the (affine) T-gradient and solve by least squares.

    Independent of the closed forms: it only uses ``eval_grads``.
    """
    ks = KernelSet.build(kernels, mdp)
    shape = (rep.d_phi, rep.d_psi) if kind.orientation == FORWARD else (rep.d_psi, rep.d_phi)
    n = len(ks)
    k = shape[0] * shape[1]

    def grads(mat):
        fam = PredictorFamily([mat] * n, kind.orientation, weights)
        return [g.reshape(-1) for g in L.eval_grads(kind, rep, fam, ks, mdp).grad_T]

    base = grads(np.zeros(shape))
    cols = []
    for j in range(k):
        e = np.zeros(k)
        e[j] = 1.0
        cols.append(grads(e.reshape(shape)))
    mats = []
    for z in range(n):
        A = np.stack([cols[j][z] - base[z] for j in range(k)], axis=1)
        sol, *_ = np.linalg.lstsq(A, -base[z], rcond=None)
        mats.append(sol.reshape(shape))
    return PredictorFamily(mats, kind.orientation, weights)


# --------------------------------------------------------------------------
# reports


@dataclass
class Check:
    name: str
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tol)

    def to_dict(self) -> dict:
        return {"name": self.name, "residual": self.residual, "tol": self.tol, "pass": self.passed}


@dataclass
class Report:
    theorem: str
    assumptions: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def skipped(self) -> bool:
        return not all(self.assumptions.values())

    @property
    def status(self) -> str:
        if self.skipped:
            return "assumption-skip"
        return "pass" if all(c.passed for c in self.checks) else "fail"

    @property
    def passed(self) -> bool:
        return self.status != "fail"

    def add(self, name: str, residual: float, tol: float):
        self.checks.append(Check(name, float(residual), float(tol)))

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def max_residual(self, prefix: str = "") -> float:
        vals = [c.residual for c in self.checks if c.name.startswith(prefix)]
        return max(vals) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "status": self.status,
            "assumptions_checked": dict(self.assumptions),
            "per_check": [c.to_dict() for c in self.checks],
            "info": dict(self.info),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _maxabs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def check_assumptions(rep: Representation, kernels, mdp: TabularMDP, sym_tol: float = 1e-9) -> dict:
    kernels = kernels.P if isinstance(kernels, KernelSet) else kernels
    return {
        "A1_orthonormal": is_orthonormal(rep.phi) and is_orthonormal(rep.psi),
        "A2_uniform_rho": bool(np.allclose(mdp.rho, 1.0 / mdp.n_states, rtol=0, atol=1e-12)),
        "A3_symmetric_kernels": all(np.linalg.norm(k - k.T) <= sym_tol for k in kernels),
    }


def _random_family(rng, shape, n, orientation, weights):
    return PredictorFamily([rng.standard_normal(shape) for _ in range(n)], orientation, weights)


def _theory_mdp(mdp: TabularMDP) -> TabularMDP:
    # identity D_rho for a uniform rho
    return mdp if mdp.d_rho_mode == UNNORMALIZED else mdp.with_mode(UNNORMALIZED)


def verify_theorem1(rep, kernels, mdp, rng=None, n_random: int = 5, weights=None, tol: float | None = None) -> Report:
    """Monte-Carlo losses: optimal predictors and representation gradients."""
    kernels = kernels.P if isinstance(kernels, KernelSet) else list(kernels)
    report = Report("theorem1", check_assumptions(rep, kernels, mdp))
    if report.skipped:
        return report
    mdp = _theory_mdp(mdp)
    tol = DEFAULT_TOL if tol is None else tol
    ks = KernelSet.build(kernels, mdp)
    rng = np.random.default_rng(0) if rng is None else rng
    phi, psi = rep.phi, rep.psi
    pi_phi, pi_psi = orthogonal_projection(phi), orthogonal_projection(psi)

    sm, mcf, mcb = LossKind(L.SM), LossKind(L.MC_JEPA_FWD), LossKind(L.MC_JEPA_BWD)
    t_sm = optimal_predictor(sm, rep, ks, mdp, weights)
    t_f = optimal_predictor(mcf, rep, ks, mdp, weights)
    t_b = optimal_predictor(mcb, rep, ks, mdp, weights)
    n_sm = numeric_predictor(sm, rep, ks, mdp, weights)
    n_f = numeric_predictor(mcf, rep, ks, mdp, weights)
    n_b = numeric_predictor(mcb, rep, ks, mdp, weights)
    for z in range(len(ks)):
        M = ks.M[z]
        report.add(f"phiT_sm_vs_phiT_mc[{z}]", _maxabs(phi @ t_sm.mats[z], phi @ t_f.mats[z]), tol)
        report.add(f"phiT_mc_vs_projection[{z}]", _maxabs(phi @ t_f.mats[z], pi_phi @ M @ psi), tol)
        report.add(f"psiT_mc_vs_psiTsm_T[{z}]", _maxabs(psi @ t_b.mats[z], psi @ t_sm.mats[z].T), tol)
        report.add(f"psiT_mc_vs_projection[{z}]", _maxabs(psi @ t_b.mats[z], pi_psi @ M @ phi), tol)
        report.add(f"sm_vs_numeric[{z}]", _maxabs(t_sm.mats[z], n_sm.mats[z]), tol)
        report.add(f"mc_fwd_vs_numeric[{z}]", _maxabs(t_f.mats[z], n_f.mats[z]), tol)
        report.add(f"mc_bwd_vs_numeric[{z}]", _maxabs(t_b.mats[z], n_b.mats[z]), tol)
    for kind, fam in ((sm, t_sm), (mcf, t_f), (mcb, t_b)):
        g = L.eval_grads(kind, rep, fam, ks, mdp).grad_T
        report.add(f"stationary_{kind}", max(float(np.linalg.norm(x)) for x in g), tol)

    n = len(ks)
    for i in range(n_random):
        fam = _random_family(rng, (rep.d_phi, rep.d_psi), n, FORWARD, weights)
        g_sm = L.eval_grads(sm, rep, fam, ks, mdp)
        g_f = L.eval_grads(mcf, rep, fam, ks, mdp)
        g_b = L.eval_grads(mcb, rep, fam.transposed(), ks, mdp)
        report.add(f"grad_phi_mc_vs_sm[{i}]", _maxabs(g_f.grad_phi, g_sm.grad_phi), tol)
        report.add(f"grad_psi_mc_vs_sm[{i}]", _maxabs(g_b.grad_psi, g_sm.grad_psi), tol)
    return report


def verify_theorem3(rep, kernels, mdp, rng=None, n_random: int = 5, weights=None, tol: float | None = None) -> Report:
    """TD losses: oblique-projection predictors and representation gradients."""
    kernels = kernels.P if isinstance(kernels, KernelSet) else list(kernels)
    report = Report("theorem3", check_assumptions(rep, kernels, mdp))
    if report.skipped:
        return report
    mdp = _theory_mdp(mdp)
    tol = default_tol(mdp.gamma) if tol is None else tol
    ks = KernelSet.build(kernels, mdp)
    rng = np.random.default_rng(0) if rng is None else rng
    phi, psi = rep.phi, rep.psi

    jf, jb = LossKind(L.TD_JEPA_FWD), LossKind(L.TD_JEPA_BWD)
    fw, bw = LossKind(L.TD_FW), LossKind(L.TD_BW)
    fams = {k: optimal_predictor(k, rep, ks, mdp, weights) for k in (jf, jb, fw, bw)}
    nums = {k: numeric_predictor(k, rep, ks, mdp, weights) for k in (jf, jb, fw, bw)}
    for z in range(len(ks)):
        M, P = ks.M[z], ks.P[z]
        ob_phi = oblique_projection(phi, P, mdp.gamma)
        ob_psi = oblique_projection(psi, P, mdp.gamma)
        report.add(f"phiT_jepa_vs_phiT_fw[{z}]", _maxabs(phi @ fams[jf].mats[z], phi @ fams[fw].mats[z]), tol)
        report.add(f"phiT_jepa_vs_oblique[{z}]", _maxabs(phi @ fams[jf].mats[z], ob_phi @ M @ psi), tol)
        report.add(f"psiT_jepa_vs_psiT_bw[{z}]", _maxabs(psi @ fams[jb].mats[z], psi @ fams[bw].mats[z]), tol)
        report.add(f"psiT_jepa_vs_oblique[{z}]", _maxabs(psi @ fams[jb].mats[z], ob_psi @ M @ phi), tol)
        report.add(f"oblique_idempotent_phi[{z}]", _maxabs(ob_phi @ ob_phi, ob_phi), tol)
        report.add(f"oblique_idempotent_psi[{z}]", _maxabs(ob_psi @ ob_psi, ob_psi), tol)
        for k in (jf, jb, fw, bw):
            report.add(f"{k}_vs_numeric[{z}]", _maxabs(fams[k].mats[z], nums[k].mats[z]), tol)
    for k, fam in fams.items():
        g = L.eval_grads(k, rep, fam, ks, mdp).grad_T
        report.add(f"stationary_{k}", max(float(np.linalg.norm(x)) for x in g), tol)

    n = len(ks)
    for i in range(n_random):
        fam = _random_family(rng, (rep.d_phi, rep.d_psi), n, FORWARD, weights)
        bfam = _random_family(rng, (rep.d_psi, rep.d_phi), n, BACKWARD, weights)
        report.add(
            f"grad_phi_jepa_vs_fw[{i}]",
            _maxabs(L.eval_grads(jf, rep, fam, ks, mdp).grad_phi, L.eval_grads(fw, rep, fam, ks, mdp).grad_phi),
            tol,
        )
        report.add(
            f"grad_psi_jepa_vs_bw[{i}]",
            _maxabs(L.eval_grads(jb, rep, bfam, ks, mdp).grad_psi, L.eval_grads(bw, rep, bfam, ks, mdp).grad_psi),
            tol,
        )
    return report


def verify_theorem4(rep, preds: PredictorFamily, kernels, mdp, n_rewards: int = 200, rng=None, slack: float = 1e-9) -> Report:
    """Policy-evaluation error bound and the TD-error bound on the SM loss."""
    kernels = kernels.P if isinstance(kernels, KernelSet) else list(kernels)
    a = check_assumptions(rep, kernels, mdp)
    report = Report("theorem4", {"A1_orthonormal": a["A1_orthonormal"], "A2_uniform_rho": a["A2_uniform_rho"]})
    if report.skipped:
        return report
    mdp = _theory_mdp(mdp)
    ks = KernelSet.build(kernels, mdp)
    rng = np.random.default_rng(0) if rng is None else rng
    phi, psi = rep.phi, rep.psi
    S = rep.n_states
    w = preds.weights
    l_sm = L.eval_loss(LossKind(L.SM), rep, preds, ks, mdp)
    errs = [phi @ T @ psi.T - M for T, M in zip(preds.mats, ks.M)]
    reg = np.linalg.solve(psi.T @ psi, psi.T)  # omega_r = reg @ r

    worst = 0.0
    for _ in range(n_rewards):
        r = sample_unit_sphere(rng, S, 1.0)
        omega = reg @ r
        lhs = sum(wz * float(np.sum((M @ r - phi @ T @ omega) ** 2)) for wz, T, M in zip(w, preds.mats, ks.M))
        worst = max(worst, lhs)
    report.add("policy_eval_error_minus_2L_sm", worst - 2 * l_sm, slack)
    # the supremum over unit rewards is the top eigenvalue of sum_z w_z E_z^T E_z
    gram = sum(wz * E.T @ E for wz, E in zip(w, errs))
    sup = float(np.linalg.eigvalsh(0.5 * (gram + gram.T))[-1])
    report.add("worst_reward_error_minus_2L_sm", sup - 2 * l_sm, slack)

    c = S / (1.0 - mdp.gamma) ** 2
    l_fw = L.eval_loss(LossKind(L.TD_FW), rep, preds, ks, mdp)
    l_bw = L.eval_loss(LossKind(L.TD_BW), rep, preds.transposed(), ks, mdp)
    report.add("L_sm_minus_c_L_fw", l_sm - c * l_fw, slack)
    report.add("L_sm_minus_c_L_bw", l_sm - c * l_bw, slack)
    report.info.update(
        {
            "L_sm": l_sm,
            "L_fw": l_fw,
            "L_bw": l_bw,
            "c": c,
            "n_rewards": n_rewards,
            "max_sampled_error": float(worst),
            "sup_error": sup,
            "slack_eval_bound": float(2 * l_sm - worst),
            "slack_td_bound": c * min(l_fw, l_bw) - l_sm,
        }
    )
    return report


def verify_gradient_matching(rep, kernels, mdp, kernel: str = L.SUCCESSOR, rng=None, n_random: int = 5, weights=None, tol: float = DEFAULT_TOL) -> Report:
    """Generalized (covariance-weighted, adjoint) losses versus density losses.

    No assumption on rho, covariances or kernel symmetry. For ``kernel="td"``
    the density counterparts are TD_FW and TD_BW.
    """
    kernels = kernels.P if isinstance(kernels, KernelSet) else list(kernels)
    ks = KernelSet.build(kernels, mdp)
    rng = np.random.default_rng(0) if rng is None else rng
    report = Report(f"gradient_matching[{kernel}]", {"rho_positive": bool(np.all(mdp.rho > 0))})
    if report.skipped:
        return report
    gf, gb = LossKind(L.GEN_FWD, kernel), LossKind(L.GEN_BWD, kernel)
    if kernel == L.BOOTSTRAP:
        dens_f, dens_b = LossKind(L.TD_FW), LossKind(L.TD_BW)
    else:
        dens_f = dens_b = LossKind(L.DENSITY, kernel)
    n = len(ks)
    for i in range(n_random):
        fam = _random_family(rng, (rep.d_phi, rep.d_psi), n, FORWARD, weights)
        bfam = _random_family(rng, (rep.d_psi, rep.d_phi), n, BACKWARD, weights)
        a = L.eval_grads(dens_f, rep, fam, ks, mdp)
        b = L.eval_grads(gf, rep, fam, ks, mdp)
        report.add(f"grad_T_fwd[{i}]", max(_maxabs(x, y) for x, y in zip(a.grad_T, b.grad_T)), tol)
        report.add(f"grad_phi_fwd[{i}]", _maxabs(a.grad_phi, b.grad_phi), tol)
        if kernel == L.BOOTSTRAP:
            c = L.eval_grads(dens_b, rep, bfam, ks, mdp)
            c_T = c.grad_T
        else:
            c = L.eval_grads(dens_b, rep, bfam.transposed(), ks, mdp)
            c_T = [x.T for x in c.grad_T]
        e = L.eval_grads(gb, rep, bfam, ks, mdp)
        report.add(f"grad_T_bwd[{i}]", max(_maxabs(x, y) for x, y in zip(c_T, e.grad_T)), tol)
        report.add(f"grad_psi_bwd[{i}]", _maxabs(c.grad_psi, e.grad_psi), tol)
    return report


def covariance_of(rep: Representation, mdp: TabularMDP):
    d = mdp.d_rho()
    return covariance(rep.phi, d), covariance(rep.psi, d)
