"""Finite MDPs, policy kernels, successor measures and value iteration.

Rewards are earned on the *next* state: V(s) = sum_t gamma^t E[r(s_{t+1})],
so V = M r with M = (I - gamma P)^{-1} P.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, check_finite, solve

UNNORMALIZED = "unnormalized"
LITERAL = "literal"
STOCH_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Per-action kernels ``P`` of shape (A, S, S), discount and state distribution.

    ``d_rho_mode`` picks the diagonal weighting used by the theory losses:
    ``"unnormalized"`` uses D = diag(S * rho), which is the identity for a
    uniform rho; ``"literal"`` uses D = diag(rho).
    """

    P: np.ndarray
    gamma: float
    rho: np.ndarray = None
    d_rho_mode: str = UNNORMALIZED
    walls: frozenset = field(default=frozenset())
    shape: tuple | None = None  # (width, height) for gridworlds

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim == 2:
            P = P[None]
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ShapeError(f"kernels must have shape (A, S, S), got {P.shape}")
        check_finite(P, "kernel")
        if P.min() < 0 or not np.allclose(P.sum(axis=2), 1.0, rtol=0, atol=STOCH_TOL):
            raise ValueError("every kernel row must be a probability distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")
        S = P.shape[1]
        rho = np.full(S, 1.0 / S) if self.rho is None else np.array(self.rho, dtype=float)
        if rho.shape != (S,) or rho.min() < 0:
            raise ValueError("state distribution must be a nonnegative length-S vector")
        if abs(rho.sum() - 1.0) > STOCH_TOL:
            raise ValueError("state distribution must sum to 1")
        if self.d_rho_mode not in (UNNORMALIZED, LITERAL):
            raise ValueError(f"unknown d_rho_mode {self.d_rho_mode!r}")
        P.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "rho", rho)

    @property
    def n_states(self) -> int:
        return self.P.shape[1]

    @property
    def n_actions(self) -> int:
        return self.P.shape[0]

    def d_rho(self) -> np.ndarray:
        """Diagonal of D_rho as a vector."""
        if self.d_rho_mode == UNNORMALIZED:
            return self.n_states * self.rho
        return self.rho.copy()

    def with_mode(self, mode: str) -> "TabularMDP":
        return TabularMDP(self.P, self.gamma, self.rho, mode, self.walls, self.shape)

    def with_gamma(self, gamma: float) -> "TabularMDP":
        return TabularMDP(self.P, gamma, self.rho, self.d_rho_mode, self.walls, self.shape)


@dataclass(frozen=True)
class RewardTask:
    reward: np.ndarray
    name: str = "task"

    def __post_init__(self):
        r = np.array(self.reward, dtype=float)
        check_finite(r, "reward")
        object.__setattr__(self, "reward", r)


def check_policy(pi, n_states: int | None = None, n_actions: int | None = None) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2:
        raise ShapeError(f"policy must be an S x A matrix, got {pi.shape}")
    if (n_states, n_actions) != (None, None) and pi.shape != (n_states, n_actions):
        raise ShapeError(f"policy shape {pi.shape} does not match MDP ({n_states}, {n_actions})")
    if pi.min() < 0 or not np.allclose(pi.sum(axis=1), 1.0, rtol=0, atol=STOCH_TOL):
        raise ValueError("policy rows must be probability distributions")
    return pi


def deterministic_policy(actions, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    pi = np.zeros((actions.size, n_actions))
    pi[np.arange(actions.size), actions] = 1.0
    return pi


def uniform_policy(mdp: TabularMDP) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def policy_kernel(mdp: TabularMDP, pi) -> np.ndarray:
    """P^pi(s, s') = sum_a pi(a|s) P[a](s, s')."""
    pi = check_policy(pi, mdp.n_states, mdp.n_actions)
    return np.einsum("sa,ast->st", pi, mdp.P)


def successor_measure(p_pi, gamma: float) -> np.ndarray:
    """M = (I - gamma P)^{-1} P; rows sum to 1 / (1 - gamma)."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")
    p_pi = np.asarray(p_pi, dtype=float)
    S = p_pi.shape[0]
    return solve(np.eye(S) - gamma * p_pi, p_pi)


def value_of(m, r) -> np.ndarray:
    m, r = np.asarray(m, dtype=float), np.asarray(r, dtype=float)
    if m.shape[1] != r.shape[0]:
        raise ShapeError(f"successor measure {m.shape} does not match reward {r.shape}")
    return m @ r


def successor_features(m, psi) -> np.ndarray:
    m, psi = np.asarray(m, dtype=float), np.asarray(psi, dtype=float)
    if m.shape[1] != psi.shape[0]:
        raise ShapeError(f"successor measure {m.shape} does not match features {psi.shape}")
    return m @ psi


def adjoint_kernel(k, rho) -> np.ndarray:
    """rho-adjoint D^{-1} k^T D."""
    k, rho = np.asarray(k, dtype=float), np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("adjoint requires a strictly positive state distribution")
    return (k.T * rho[None, :]) / rho[:, None]


def rho_inner(f, g, rho) -> float:
    return float(np.sum(np.asarray(rho) * np.asarray(f) * np.asarray(g)))


def q_values(mdp: TabularMDP, r, v) -> np.ndarray:
    """Q(s, a) = (P[a] (r + gamma V))(s), returned as S x A."""
    target = np.asarray(r, dtype=float) + mdp.gamma * np.asarray(v, dtype=float)
    return (mdp.P @ target).T


def greedy(q) -> np.ndarray:
    """Greedy deterministic policy; ties go to the lowest action index."""
    q = np.asarray(q)
    return deterministic_policy(np.argmax(q, axis=1), q.shape[1])


def value_iteration(mdp: TabularMDP, r, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Optimal values and a greedy optimal policy.

    Stops once the Bellman residual ||V - max_a Q(., a)||_inf is at most tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    r = np.asarray(r, dtype=float)
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = q_values(mdp, r, v)
        if np.max(np.abs(v - q.max(axis=1))) <= tol:
            break
        v = q.max(axis=1)
    return v, greedy(q_values(mdp, r, v))


def policy_value(mdp: TabularMDP, pi, r) -> np.ndarray:
    return value_of(successor_measure(policy_kernel(mdp, pi), mdp.gamma), r)


def rollout_values(mdp: TabularMDP, pi, r, rng, n_rollouts: int, horizon: int, start=None):
    """Monte-Carlo discounted returns, vectorized over rollouts.

    Returns an (n_rollouts,) array of returns from ``start`` states (or states
    drawn from rho when ``start`` is None).
    """
    pi = check_policy(pi, mdp.n_states, mdp.n_actions)
    r = np.asarray(r, dtype=float)
    if start is None:
        s = rng.choice(mdp.n_states, size=n_rollouts, p=mdp.rho)
    else:
        s = np.broadcast_to(np.asarray(start, dtype=int), (n_rollouts,)).copy()
    pi_cdf = np.cumsum(pi, axis=1)
    p_cdf = np.cumsum(mdp.P, axis=2)
    ret = np.zeros(n_rollouts)
    disc = 1.0
    for _ in range(horizon):
        u = rng.random(n_rollouts)
        a = np.minimum((u[:, None] > pi_cdf[s]).sum(axis=1), mdp.n_actions - 1)
        u = rng.random(n_rollouts)
        s = np.minimum((u[:, None] > p_cdf[a, s]).sum(axis=1), mdp.n_states - 1)
        ret += disc * r[s]
        disc *= mdp.gamma
    return ret
