"""Exact matrix-form losses with analytic gradients.

Every loss is evaluated on *live* parameters (phi, psi, T_z) plus a *frozen*
copy that feeds the stop-gradient terms. Gradients are taken with respect to
the live arguments only, so a finite-difference check that perturbs the live
copy while holding the frozen one fixed validates the stop-gradient placement
of each kind. In ordinary use the frozen copy is the live one.

Notation: D = diag(d) is ``mdp.d_rho()``, w_z the latent weights, P_z the
policy kernels and M_z = (I - gamma P_z)^{-1} P_z.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMDP, adjoint_kernel, successor_measure
from .numerics import ShapeError, solve
from .representations import BACKWARD, FORWARD, PredictorFamily, Representation

SM = "SM"
MC_JEPA_FWD = "MC_JEPA_FWD"
MC_JEPA_BWD = "MC_JEPA_BWD"
TD_JEPA_FWD = "TD_JEPA_FWD"
TD_JEPA_BWD = "TD_JEPA_BWD"
TD_FW = "TD_FW"
TD_BW = "TD_BW"
DENSITY = "DENSITY"
GEN_FWD = "GEN_FWD"
GEN_BWD = "GEN_BWD"
TAGS = (SM, MC_JEPA_FWD, MC_JEPA_BWD, TD_JEPA_FWD, TD_JEPA_BWD, TD_FW, TD_BW, DENSITY, GEN_FWD, GEN_BWD)

SUCCESSOR = "successor-measure"
ONE_STEP = "one-step"
BOOTSTRAP = "td"
KERNELS = (SUCCESSOR, ONE_STEP, BOOTSTRAP)

_BACKWARD_TAGS = {MC_JEPA_BWD, TD_JEPA_BWD, TD_BW, GEN_BWD}


@dataclass(frozen=True)
class LossKind:
    """Loss tag plus the kernel Xi used by DENSITY / GEN kinds.

    ``kernel="td"`` turns GEN_FWD / GEN_BWD into their bootstrapped
    (one-step kernel plus self-prediction) variants; the matching density
    losses are TD_FW and TD_BW evaluated with the same D_rho.
    """

    tag: str
    kernel: str = SUCCESSOR

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown loss tag {self.tag!r}")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel choice {self.kernel!r}")
        if self.tag == DENSITY and self.kernel == BOOTSTRAP:
            raise ValueError("bootstrapped density losses are TD_FW / TD_BW")

    @property
    def orientation(self) -> str:
        return BACKWARD if self.tag in _BACKWARD_TAGS else FORWARD

    def __str__(self) -> str:
        if self.tag in (DENSITY, GEN_FWD, GEN_BWD):
            return f"{self.tag}[{self.kernel}]"
        return self.tag


def all_kinds() -> list[LossKind]:
    """Every tag once; DENSITY/GEN with the successor-measure kernel."""
    return [LossKind(t) for t in TAGS]


@dataclass(eq=False)
class KernelSet:
    """Per-latent kernels with everything the losses need precomputed."""

    P: list
    gamma: float
    d: np.ndarray
    rho: np.ndarray
    M: list = field(default=None)

    def __post_init__(self):
        self.P = [np.asarray(p, dtype=float) for p in self.P]
        if self.M is None:
            self.M = [successor_measure(p, self.gamma) for p in self.P]
        self._adj = {}

    @classmethod
    def build(cls, kernels, mdp: TabularMDP) -> "KernelSet":
        if isinstance(kernels, KernelSet):
            return kernels
        return cls(list(kernels), mdp.gamma, mdp.d_rho(), np.asarray(mdp.rho))

    def __len__(self) -> int:
        return len(self.P)

    def xi(self, kernel: str) -> list:
        return self.M if kernel == SUCCESSOR else self.P

    def adjoint(self, kernel: str) -> list:
        key = SUCCESSOR if kernel == SUCCESSOR else ONE_STEP
        if key not in self._adj:
            self._adj[key] = [adjoint_kernel(k, self.rho) for k in self.xi(key)]
        return self._adj[key]


@dataclass
class LossBundle:
    value: float
    grad_T: list
    grad_phi: np.ndarray
    grad_psi: np.ndarray
    per_z: list = field(default_factory=list)


def _check(kind: LossKind, rep: Representation, preds: PredictorFamily, ks: KernelSet):
    if preds.orientation != kind.orientation:
        raise ValueError(f"{kind} needs a {kind.orientation} predictor family")
    if len(preds) != len(ks):
        raise ShapeError(f"{len(preds)} predictors but {len(ks)} kernels")
    want = (rep.d_phi, rep.d_psi) if kind.orientation == FORWARD else (rep.d_psi, rep.d_phi)
    for m in preds.mats:
        if m.shape != want:
            raise ShapeError(f"{kind} predictor must be {want}, got {m.shape}")
    if ks.P[0].shape[0] != rep.n_states:
        raise ShapeError("kernels and representations disagree on the number of states")


def _row_weighted(kind_cov, d, R):
    """d[:, None] * R @ cov, the gradient of 1/2 ||D^{1/2} R||^2_cov w.r.t. R."""
    G = d[:, None] * R
    return G if kind_cov is None else G @ kind_cov


def _evaluate(kind: LossKind, live, frozen, preds_w, ks: KernelSet, need_grads: bool = True):
    """Core evaluator.

    ``live`` and ``frozen`` are (phi, psi, mats) triples. Returns
    (value, per_z, grad_T, grad_phi, grad_psi).
    """
    phi, psi, mats = live
    phi0, psi0, mats0 = frozen
    d, g = ks.d, ks.gamma
    tag = kind.tag
    per_z, gT = [], []
    gphi = np.zeros_like(phi)
    gpsi = np.zeros_like(psi)

    # latent-predictive kinds: residual R (S x d_out), row weights d, optional covariance
    if tag in (MC_JEPA_FWD, MC_JEPA_BWD, TD_JEPA_FWD, TD_JEPA_BWD, GEN_FWD, GEN_BWD):
        fwd = kind.orientation == FORWARD
        x, x0, y0 = (phi, phi0, psi0) if fwd else (psi, psi0, phi0)
        cov = None
        if tag in (GEN_FWD, GEN_BWD):
            cov = y0.T @ (d[:, None] * y0)
        for z, (T, T0, w) in enumerate(zip(mats, mats0, preds_w)):
            P = ks.P[z]
            if tag in (MC_JEPA_FWD, MC_JEPA_BWD):
                target = ks.M[z] @ y0
            elif tag in (TD_JEPA_FWD, TD_JEPA_BWD):
                target = P @ y0 + g * (P @ (x0 @ T0))
            elif kind.kernel == BOOTSTRAP:
                K = P if fwd else ks.adjoint(ONE_STEP)[z]
                target = solve(cov.T, (K @ y0).T).T + g * (K @ (x0 @ T0))
            else:
                K = ks.xi(kind.kernel)[z] if fwd else ks.adjoint(kind.kernel)[z]
                target = solve(cov.T, (K @ y0).T).T
            R = x @ T - target
            G = _row_weighted(cov, d, R)
            per_z.append(0.5 * float(np.sum(G * R)))
            if need_grads:
                gT.append(w * (x.T @ G))
                gx = w * (G @ T.T)
                if fwd:
                    gphi += gx
                else:
                    gpsi += gx
        value = float(np.dot(preds_w, per_z))
        return value, per_z, gT, gphi, gpsi

    # bilinear kinds: residual R (S x S) of a product a T b^T
    dd = d[:, None] * d[None, :]
    for z, (T, T0, w) in enumerate(zip(mats, mats0, preds_w)):
        P = ks.P[z]
        if tag == SM:
            a, b = phi, psi
            R = a @ T @ b.T - ks.M[z]
            E = R
        elif tag == DENSITY:
            a, b = phi, psi
            R = a @ T @ b.T - ks.xi(kind.kernel)[z] / d[None, :]
            E = dd * R
        elif tag == TD_FW:
            a, b = phi, psi
            R = a @ T @ b.T - P / d[None, :] - g * (P @ (phi0 @ T0 @ psi0.T))
            E = dd * R
        elif tag == TD_BW:
            a, b = psi, phi
            Pa = ks.adjoint(ONE_STEP)[z]
            R = a @ T @ b.T - Pa / d[None, :] - g * (Pa @ (psi0 @ T0 @ phi0.T))
            E = dd * R
        else:  # pragma: no cover - guarded by LossKind
            raise ValueError(tag)
        per_z.append(0.5 * float(np.sum(E * R)))
        if need_grads:
            gT.append(w * (a.T @ E @ b))
            ga = w * (E @ b @ T.T)
            gb = w * (E.T @ a @ T)
            if a is phi:
                gphi += ga
                gpsi += gb
            else:
                gpsi += ga
                gphi += gb
    value = float(np.dot(preds_w, per_z))
    return value, per_z, gT, gphi, gpsi


def eval_grads(kind: LossKind, rep: Representation, preds: PredictorFamily, kernels, mdp: TabularMDP) -> LossBundle:
    """Value and analytic gradients; stop-gradient targets are held fixed."""
    ks = KernelSet.build(kernels, mdp)
    _check(kind, rep, preds, ks)
    params = (rep.phi, rep.psi, preds.mats)
    value, per_z, gT, gphi, gpsi = _evaluate(kind, params, params, preds.weights, ks)
    return LossBundle(value, gT, gphi, gpsi, per_z)


def eval_loss(kind: LossKind, rep: Representation, preds: PredictorFamily, kernels, mdp: TabularMDP) -> float:
    ks = KernelSet.build(kernels, mdp)
    _check(kind, rep, preds, ks)
    params = (rep.phi, rep.psi, preds.mats)
    return _evaluate(kind, params, params, preds.weights, ks, need_grads=False)[0]


def surrogate_loss(kind: LossKind, live, frozen, weights, kernels, mdp: TabularMDP) -> float:
    """Loss with stop-gradient terms evaluated at ``frozen`` = (phi, psi, mats)."""
    ks = KernelSet.build(kernels, mdp)
    return _evaluate(kind, live, frozen, np.asarray(weights), ks, need_grads=False)[0]


# --------------------------------------------------------------------------
# sampled estimators (action-free, one latent per sample)


def sample_on_policy(mdp: TabularMDP, kernels, weights, rng, n: int, future: bool = False):
    """Draw (s, z, s_next) with s ~ rho, z ~ weights, s_next ~ P_z(s, .).

    With ``future=True`` the successor is a discounted future state: a
    geometric horizon t >= 1 with P(t) = (1 - gamma) gamma^(t-1), then t
    kernel steps, so s_next ~ (1 - gamma) M_z(s, .).
    """
    kernels = [np.asarray(k, dtype=float) for k in kernels]
    S = kernels[0].shape[0]
    cdfs = np.stack([np.cumsum(k, axis=1) for k in kernels])
    s = rng.choice(S, size=n, p=mdp.rho)
    z = rng.choice(len(kernels), size=n, p=np.asarray(weights))
    steps = rng.geometric(1.0 - mdp.gamma, size=n) if future else np.ones(n, dtype=int)
    cur = s.copy()
    for t in range(1, int(steps.max()) + 1):
        active = steps >= t
        u = rng.random(int(active.sum()))
        rows = cdfs[z[active], cur[active]]
        cur[active] = np.minimum((u[:, None] > rows).sum(axis=1), S - 1)
    return s, z, cur


def _sample_rows(tag, rep, preds, s, z, s_next, gamma):
    mats = np.stack(preds.mats)
    if tag == TD_JEPA_FWD:
        x, y = rep.phi, rep.psi
        Tz = mats[z]
        return np.einsum("bi,bij->bj", x[s], Tz) - y[s_next] - gamma * np.einsum("bi,bij->bj", x[s_next], Tz)
    if tag == TD_JEPA_BWD:
        x, y = rep.psi, rep.phi
        Tz = mats[z]
        return np.einsum("bi,bij->bj", x[s], Tz) - y[s_next] - gamma * np.einsum("bi,bij->bj", x[s_next], Tz)
    if tag == MC_JEPA_FWD:
        # target scaled by 1/(1 - gamma) so its mean is M psi (unnormalized measure)
        return np.einsum("bi,bij->bj", rep.phi[s], mats[z]) - rep.psi[s_next] / (1.0 - gamma)
    raise ValueError(f"no sampled estimator for {tag}")


def sampled_loss(kind: LossKind, rep: Representation, preds: PredictorFamily, s, z, s_next, gamma: float) -> float:
    """Mean of 1/2 ||prediction - target||^2 over a batch of (s, z, s_next).

    For MC_JEPA_FWD, ``s_next`` must be a discounted future state (see
    ``sample_on_policy(..., future=True)``).
    """
    s, z, s_next = (np.asarray(v, dtype=int) for v in (s, z, s_next))
    if s.size == 0:
        raise ValueError("empty batch")
    res = _sample_rows(kind.tag, rep, preds, s, z, s_next, gamma)
    return float(0.5 * np.mean(np.sum(res * res, axis=1)))


def sampled_losses_per_row(kind, rep, preds, s, z, s_next, gamma) -> np.ndarray:
    res = _sample_rows(kind.tag, rep, preds, np.asarray(s), np.asarray(z), np.asarray(s_next), gamma)
    return 0.5 * np.sum(res * res, axis=1)


def expected_sampled_loss(kind: LossKind, rep: Representation, preds: PredictorFamily, kernels, mdp: TabularMDP) -> float:
    """Exact expectation of ``sampled_loss`` by enumerating every (z, s, s_next)."""
    ks = KernelSet.build(kernels, mdp)
    S = rep.n_states
    total = 0.0
    for zi, w in enumerate(preds.weights):
        if kind.tag == MC_JEPA_FWD:
            K = (1.0 - mdp.gamma) * ks.M[zi]
        else:
            K = ks.P[zi]
        for s in range(S):
            nxt = np.arange(S)
            rows = _sample_rows(kind.tag, rep, preds, np.full(S, s), np.full(S, zi), nxt, mdp.gamma)
            total += w * mdp.rho[s] * float(np.dot(K[s], 0.5 * np.sum(rows * rows, axis=1)))
    return total


# --------------------------------------------------------------------------
# reporting


def loss_sweep_csv(rows) -> str:
    """CSV with header kind,z,value,grad_T_norm,grad_phi_norm,grad_psi_norm.

    ``rows`` is an iterable of (kind, LossBundle).
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "z", "value", "grad_T_norm", "grad_phi_norm", "grad_psi_norm"])
    for kind, bundle in rows:
        for z, (v, gT) in enumerate(zip(bundle.per_z, bundle.grad_T)):
            writer.writerow(
                [
                    str(kind),
                    z,
                    repr(v),
                    repr(float(np.linalg.norm(gT))),
                    repr(float(np.linalg.norm(bundle.grad_phi))),
                    repr(float(np.linalg.norm(bundle.grad_psi))),
                ]
            )
    return buf.getvalue()
