"""Two-timescale representation dynamics.

Predictors are re-solved to optimality at every right-hand-side evaluation
(every RK4 stage), and the encoders follow the negative loss gradients at
those predictors.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .closed_form import optimal_predictor
from .losses import KernelSet, LossKind
from .numerics import SingularMatrixError, check_finite, rk4_integrate, stack_params, unstack_params
from .representations import Representation, orthonormalize

TD_JEPA = "td-jepa"
GEN = "gen"
RECORD_EVERY = 10


class DynamicsError(ArithmeticError):
    def __init__(self, msg: str, time: float | None = None):
        super().__init__(msg)
        self.time = time


@dataclass(frozen=True, eq=False)
class OdeState:
    phi: np.ndarray
    psi: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "phi", check_finite(np.array(self.phi, dtype=float), "phi"))
        object.__setattr__(self, "psi", check_finite(np.array(self.psi, dtype=float), "psi"))

    @property
    def rep(self) -> Representation:
        return Representation(self.phi, self.psi)


@dataclass(frozen=True)
class KindPair:
    """Forward and backward loss driving phi and psi respectively."""

    name: str
    kernel: str = L.SUCCESSOR

    def __post_init__(self):
        if self.name not in (TD_JEPA, GEN):
            raise ValueError(f"unknown kind pair {self.name!r}")
        if self.name == TD_JEPA and self.kernel != L.SUCCESSOR:
            raise ValueError("the TD-JEPA pair has no kernel choice")

    @property
    def kinds(self) -> tuple[LossKind, LossKind]:
        if self.name == TD_JEPA:
            return LossKind(L.TD_JEPA_FWD), LossKind(L.TD_JEPA_BWD)
        return LossKind(L.GEN_FWD, self.kernel), LossKind(L.GEN_BWD, self.kernel)

    def density_kind(self) -> LossKind:
        if self.name != GEN or self.kernel == L.BOOTSTRAP:
            raise ValueError("a density Lyapunov function needs a GEN pair with a fixed kernel")
        return LossKind(L.DENSITY, self.kernel)


def _pair(kind_pair) -> KindPair:
    return kind_pair if isinstance(kind_pair, KindPair) else KindPair(kind_pair)


def two_timescale_rhs(kind_pair, state: OdeState, kernels, mdp, weights=None):
    """(phi_dot, psi_dot) = (-grad_phi, -grad_psi) at the optimal predictors."""
    pair = _pair(kind_pair)
    ks = KernelSet.build(kernels, mdp)
    rep = state.rep
    fwd, bwd = pair.kinds
    try:
        t_f = optimal_predictor(fwd, rep, ks, mdp, weights)
        t_b = optimal_predictor(bwd, rep, ks, mdp, weights)
    except SingularMatrixError as exc:
        raise DynamicsError(f"predictor solve failed at t={state.time!r}: {exc}", state.time) from exc
    g_phi = L.eval_grads(fwd, rep, t_f, ks, mdp).grad_phi
    g_psi = L.eval_grads(bwd, rep, t_b, ks, mdp).grad_psi
    return -g_phi, -g_psi


def pair_loss(kind_pair, rep: Representation, kernels, mdp, weights=None) -> float:
    """Diagnostic loss: the density loss for GEN pairs, else the sum of both losses at their optima."""
    pair = _pair(kind_pair)
    ks = KernelSet.build(kernels, mdp)
    if pair.name == GEN and pair.kernel != L.BOOTSTRAP:
        kind = pair.density_kind()
        return L.eval_loss(kind, rep, optimal_predictor(kind, rep, ks, mdp, weights), ks, mdp)
    return sum(L.eval_loss(k, rep, optimal_predictor(k, rep, ks, mdp, weights), ks, mdp) for k in pair.kinds)


@dataclass
class Trajectory:
    states: list
    kind_pair: KindPair
    step: float
    diagnostics: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "loss", "cov_drift_phi", "cov_drift_psi", "min_singular_value"])
        for row in self.diagnostics:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def default_init(rng: np.random.Generator, n_states: int, d_phi: int, d_psi: int) -> OdeState:
    """Gaussian columns, orthonormalized (unit covariance)."""
    return OdeState(
        orthonormalize(rng.standard_normal((n_states, d_phi))),
        orthonormalize(rng.standard_normal((n_states, d_psi))),
    )


def simulate(
    kind_pair,
    x0: OdeState,
    step: float,
    horizon: float,
    kernels,
    mdp,
    weights=None,
    record_every: int = RECORD_EVERY,
    diagnostics: bool = True,
) -> Trajectory:
    pair = _pair(kind_pair)
    ks = KernelSet.build(kernels, mdp)
    shapes = [x0.phi.shape, x0.psi.shape]
    calls = [0]

    def rhs(flat):
        phi, psi = unstack_params(flat, shapes)
        t = x0.time + (calls[0] // 4) * step
        calls[0] += 1
        d_phi, d_psi = two_timescale_rhs(pair, OdeState(phi, psi, t), ks, mdp, weights)
        return stack_params([d_phi, d_psi])

    flats = rk4_integrate(rhs, stack_params([x0.phi, x0.psi]), step, horizon, record_every)
    n_steps = int(round(horizon / step))
    idx = list(range(0, n_steps + 1, record_every))
    if idx[-1] != n_steps:
        idx.append(n_steps)
    states = [OdeState(*unstack_params(f, shapes), x0.time + i * step) for f, i in zip(flats, idx)]
    traj = Trajectory(states, pair, step)
    if diagnostics:
        c_phi0 = x0.phi.T @ x0.phi
        c_psi0 = x0.psi.T @ x0.psi
        for st in states:
            traj.diagnostics.append(
                (
                    st.time,
                    pair_loss(pair, st.rep, ks, mdp, weights),
                    np.linalg.norm(st.phi.T @ st.phi - c_phi0),
                    np.linalg.norm(st.psi.T @ st.psi - c_psi0),
                    min(np.linalg.svd(st.phi, compute_uv=False)[-1], np.linalg.svd(st.psi, compute_uv=False)[-1]),
                )
            )
    return traj


def covariance_drift(traj) -> float:
    states = traj.states if isinstance(traj, Trajectory) else list(traj)
    if not states:
        raise ValueError("empty trajectory")
    c_phi0 = states[0].phi.T @ states[0].phi
    c_psi0 = states[0].psi.T @ states[0].psi
    return max(
        max(np.linalg.norm(s.phi.T @ s.phi - c_phi0), np.linalg.norm(s.psi.T @ s.psi - c_psi0)) for s in states
    )


def min_singular_values(traj) -> np.ndarray:
    return np.array([np.linalg.svd(s.phi, compute_uv=False)[-1] for s in traj.states])


def lyapunov_trace(traj: Trajectory, kernels, mdp, weights=None) -> np.ndarray:
    """Density loss at its optimal predictor along a GEN trajectory."""
    kind = traj.kind_pair.density_kind()
    ks = KernelSet.build(kernels, mdp)
    out = []
    for st in traj.states:
        rep = st.rep
        out.append(L.eval_loss(kind, rep, optimal_predictor(kind, rep, ks, mdp, weights), ks, mdp))
    return np.array(out)


def max_increase(trace) -> float:
    """Largest step-to-step increase (<= 0 for a nonincreasing sequence)."""
    trace = np.asarray(trace, dtype=float)
    return float(np.max(np.diff(trace))) if trace.size > 1 else 0.0
