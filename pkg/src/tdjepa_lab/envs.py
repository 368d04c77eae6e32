"""Gridworlds, random (optionally symmetric) MDPs, offline datasets and tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import RewardTask, TabularMDP
from .numerics import sample_unit_sphere, solve

# N, E, S, W as (dx, dy) with y growing downwards
MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
ACTION_NAMES = ("N", "E", "S", "W")
SINKHORN_MAX_SWEEPS = 10_000
SINKHORN_TOL = 1e-10


class SinkhornError(RuntimeError):
    pass


def grid_cells(width: int, height: int, walls) -> list[tuple[int, int]]:
    """Free cells in row-major order; their position is the state index."""
    walls = set(walls)
    return [(x, y) for y in range(height) for x in range(width) if (x, y) not in walls]


def build_gridworld(width: int, height: int, walls=(), slip: float = 0.0, gamma: float = 0.95):
    """Four-action gridworld over the free cells.

    The intended move happens with probability 1 - slip; otherwise one of the
    two lateral moves is taken uniformly. Moving into a wall or the border
    leaves the agent in place.
    """
    if not 0.0 <= slip < 1.0:
        raise ValueError("slip must lie in [0, 1)")
    walls = frozenset((int(x), int(y)) for x, y in walls)
    cells = grid_cells(width, height, walls)
    if not cells:
        raise ValueError("gridworld has no free cell")
    index = {c: i for i, c in enumerate(cells)}
    S = len(cells)

    def dest(cell, move):
        nxt = (cell[0] + move[0], cell[1] + move[1])
        return index.get(nxt, index[cell])

    P = np.zeros((4, S, S))
    for a, move in enumerate(MOVES):
        lateral = (MOVES[(a + 1) % 4], MOVES[(a + 3) % 4])
        for cell, s in index.items():
            P[a, s, dest(cell, move)] += 1.0 - slip
            for lat in lateral:
                P[a, s, dest(cell, lat)] += slip / 2
    return TabularMDP(P, gamma, None, walls=walls, shape=(width, height))


def parse_ascii_map(text: str):
    """Parse '#' (wall), '.' (free) and 'G' (goal, free) rows.

    Returns (width, height, walls, goal_cells).
    """
    rows = [line.rstrip("\n") for line in text.strip("\n").splitlines() if line.strip()]
    if not rows:
        raise ValueError("empty map")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("map rows must have equal length")
    walls, goals = set(), []
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                walls.add((x, y))
            elif ch == "G":
                goals.append((x, y))
            elif ch != ".":
                raise ValueError(f"unknown map symbol {ch!r} at ({x}, {y})")
    return width, len(rows), walls, goals


def render_ascii_map(width: int, height: int, walls, goals=()) -> str:
    walls, goals = set(walls), set(goals)
    lines = []
    for y in range(height):
        lines.append(
            "".join("#" if (x, y) in walls else "G" if (x, y) in goals else "." for x in range(width))
        )
    return "\n".join(lines) + "\n"


def gridworld_from_ascii(text: str, slip: float = 0.0, gamma: float = 0.95):
    width, height, walls, goals = parse_ascii_map(text)
    mdp = build_gridworld(width, height, walls, slip, gamma)
    index = {c: i for i, c in enumerate(grid_cells(width, height, walls))}
    return mdp, [index[g] for g in goals]


def symmetric_sinkhorn(a: np.ndarray, tol: float = SINKHORN_TOL, max_sweeps: int = SINKHORN_MAX_SWEEPS):
    """Symmetric doubly-stochastic scaling of a symmetric positive matrix.

    Alternates row and column normalization and re-symmetrizes after every
    sweep, until the largest row-sum deviation drops below ``tol``.
    """
    x = 0.5 * (a + a.T)
    for _ in range(max_sweeps):
        x = x / x.sum(axis=1, keepdims=True)
        x = x / x.sum(axis=0, keepdims=True)
        x = 0.5 * (x + x.T)
        if np.max(np.abs(x.sum(axis=1) - 1.0)) < tol:
            return x
    raise SinkhornError(f"symmetric Sinkhorn did not converge in {max_sweeps} sweeps")


def sample_random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    gamma: float,
    symmetric: bool = False,
    sparsity: float = 0.0,
    rho=None,
    d_rho_mode: str = "unnormalized",
) -> TabularMDP:
    """Random kernels: Dirichlet rows, or symmetric doubly-stochastic ones.

    ``sparsity`` is the fraction of off-diagonal entries zeroed before
    normalization (the diagonal is kept to preserve positivity of rows).
    """
    if n_states < 2:
        raise ValueError("need at least two states")
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    P = np.empty((n_actions, n_states, n_states))
    for a in range(n_actions):
        if symmetric:
            x = rng.random((n_states, n_states)) + 0.05
            mask = rng.random((n_states, n_states)) >= sparsity
            mask = np.triu(mask) | np.triu(mask).T
            np.fill_diagonal(mask, True)
            k = symmetric_sinkhorn(np.where(mask, x, 0.0))
            # exact rows; the asymmetry this introduces is of order the Sinkhorn tol
            P[a] = k / k.sum(axis=1, keepdims=True)
        else:
            rows = rng.dirichlet(np.ones(n_states), size=n_states)
            if sparsity > 0:
                mask = rng.random((n_states, n_states)) >= sparsity
                np.fill_diagonal(mask, True)
                rows = rows * mask
                rows = rows / rows.sum(axis=1, keepdims=True)
            P[a] = rows
    return TabularMDP(P, gamma, rho, d_rho_mode)


def random_state_dist(rng: np.random.Generator, n_states: int, floor: float = 0.2) -> np.ndarray:
    """Strictly positive, non-uniform distribution."""
    w = rng.random(n_states) + floor
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class Dataset:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    source_seed: int = 0
    behavior: str = "iid-uniform"

    def __len__(self) -> int:
        return int(self.s.size)

    def transitions(self):
        return list(zip(self.s.tolist(), self.a.tolist(), self.s_next.tolist()))

    def empirical_kernel(self, n_states: int, n_actions: int):
        counts = np.zeros((n_actions, n_states, n_states))
        np.add.at(counts, (self.a, self.s, self.s_next), 1.0)
        return counts


def _step(mdp: TabularMDP, rng: np.random.Generator, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(mdp.P[a, s], axis=1)
    u = rng.random(s.size)
    return np.minimum((u[:, None] > cdf).sum(axis=1), mdp.n_states - 1)


def generate_dataset(
    mdp: TabularMDP,
    rng: np.random.Generator,
    n: int,
    mode: str = "iid-uniform",
    rollout_len: int = 100,
    seed: int = 0,
) -> Dataset:
    """Reward-free transitions.

    ``iid-uniform`` draws (s, a) uniformly and s' ~ P[a](s, .); ``rollout``
    runs a uniform-random behavior policy in episodes of ``rollout_len``
    steps restarting from rho.
    """
    if n < 1:
        raise ValueError("need at least one transition")
    S, A = mdp.n_states, mdp.n_actions
    if mode == "iid-uniform":
        s = rng.integers(0, S, size=n)
        a = rng.integers(0, A, size=n)
        s_next = _step(mdp, rng, s, a)
        return Dataset(s, a, s_next, seed, mode)
    if mode == "rollout":
        if rollout_len < 1:
            raise ValueError("rollout length must be positive")
        n_ep = -(-n // rollout_len)
        cur = rng.choice(S, size=n_ep, p=mdp.rho)
        ss, aa, nn = [], [], []
        for _ in range(rollout_len):
            act = rng.integers(0, A, size=n_ep)
            nxt = _step(mdp, rng, cur, act)
            ss.append(cur)
            aa.append(act)
            nn.append(nxt)
            cur = nxt
        # episode-major order
        s = np.stack(ss, axis=1).reshape(-1)[:n]
        a = np.stack(aa, axis=1).reshape(-1)[:n]
        s_next = np.stack(nn, axis=1).reshape(-1)[:n]
        return Dataset(s, a, s_next, seed, f"rollout({rollout_len})")
    raise ValueError(f"unknown dataset mode {mode!r}")


def make_goal_task(mdp: TabularMDP, goal: int) -> RewardTask:
    if not 0 <= goal < mdp.n_states:
        raise ValueError(f"goal {goal} out of range")
    r = np.zeros(mdp.n_states)
    r[goal] = 1.0
    return RewardTask(r, f"goal-{goal}")


def make_random_linear_task(rng: np.random.Generator, psi) -> tuple[RewardTask, np.ndarray]:
    """r = psi z with z on the sphere of radius sqrt(d_psi); returns (task, z)."""
    psi = np.asarray(psi, dtype=float)
    d = psi.shape[1]
    z = sample_unit_sphere(rng, d, np.sqrt(d))
    return RewardTask(psi @ z, "linear"), z


def regress_task(psi, r) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    return solve(psi.T @ psi, psi.T @ np.asarray(r, dtype=float))
