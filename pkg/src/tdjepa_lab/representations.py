"""Embedding matrices, predictor families, covariances and projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, SingularMatrixError, check_finite, solve

FORWARD = "forward"
BACKWARD = "backward"


@dataclass(frozen=True, eq=False)
class Representation:
    """State encoder ``phi`` (S x d_phi) and task encoder ``psi`` (S x d_psi)."""

    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        phi = check_finite(np.array(self.phi, dtype=float), "phi")
        psi = check_finite(np.array(self.psi, dtype=float), "psi")
        if phi.ndim != 2 or psi.ndim != 2 or phi.shape[0] != psi.shape[0]:
            raise ShapeError(f"incompatible representations {phi.shape} and {psi.shape}")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "psi", psi)

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]

    @property
    def d_phi(self) -> int:
        return self.phi.shape[1]

    @property
    def d_psi(self) -> int:
        return self.psi.shape[1]

    def swapped(self) -> "Representation":
        return Representation(self.psi, self.phi)


@dataclass(eq=False)
class PredictorFamily:
    """One matrix per latent z in a finite latent set, with sampling weights.

    Forward families hold d_phi x d_psi matrices, backward ones d_psi x d_phi.
    """

    mats: list
    orientation: str = FORWARD
    weights: np.ndarray = None
    ids: list = field(default=None)

    def __post_init__(self):
        self.mats = [np.array(m, dtype=float) for m in self.mats]
        n = len(self.mats)
        if n == 0:
            raise ValueError("a predictor family needs at least one latent")
        if self.orientation not in (FORWARD, BACKWARD):
            raise ValueError(f"unknown orientation {self.orientation!r}")
        w = np.full(n, 1.0 / n) if self.weights is None else np.array(self.weights, dtype=float)
        if w.shape != (n,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("latent weights must be positive and sum to 1")
        self.weights = w
        if self.ids is None:
            self.ids = list(range(n))

    def __len__(self) -> int:
        return len(self.mats)

    def transposed(self) -> "PredictorFamily":
        other = BACKWARD if self.orientation == FORWARD else FORWARD
        return PredictorFamily([m.T for m in self.mats], other, self.weights, list(self.ids))


def covariance(emb, d_rho) -> np.ndarray:
    """emb^T D_rho emb for the diagonal ``d_rho`` (e.g. ``mdp.d_rho()``)."""
    emb = np.asarray(emb, dtype=float)
    d = np.asarray(d_rho, dtype=float)
    if d.shape != (emb.shape[0],):
        raise ShapeError(f"weights of shape {d.shape} do not match embedding {emb.shape}")
    return emb.T @ (d[:, None] * emb)


def ortho_reg_loss(batch) -> float:
    """(1/(2B(B-1))) sum_{i!=j} (x_i.x_j)^2 - (1/B) sum_i x_i.x_i over a batch."""
    x = np.asarray(batch, dtype=float)
    B = x.shape[0]
    if B < 2:
        raise ValueError("orthonormality regularization needs a batch of at least 2")
    # sum_{i != j} (x_i.x_j)^2 = ||X^T X||_F^2 - sum_i |x_i|^4, O(B d^2)
    c = x.T @ x
    sq = np.einsum("ij,ij->i", x, x)
    off = np.sum(c * c) - np.sum(sq * sq)
    return float(off / (2 * B * (B - 1)) - sq.sum() / B)


def ortho_reg_grad(batch) -> np.ndarray:
    """Gradient of ``ortho_reg_loss`` with respect to each batch row."""
    x = np.asarray(batch, dtype=float)
    B = x.shape[0]
    if B < 2:
        raise ValueError("orthonormality regularization needs a batch of at least 2")
    sq = np.einsum("ij,ij->i", x, x)
    off_x = x @ (x.T @ x) - sq[:, None] * x  # offdiag(X X^T) X
    return (2.0 / (B * (B - 1))) * off_x - (2.0 / B) * x


def orthonormalize(emb, rank_tol: float = 1e-10) -> np.ndarray:
    """Thin Householder QR with the first nonzero entry of each column positive."""
    emb = np.asarray(emb, dtype=float)
    q, r = np.linalg.qr(emb, mode="reduced")
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= rank_tol * max(1.0, diag.max()):
        raise SingularMatrixError("embedding is rank-deficient")
    for j in range(q.shape[1]):
        nz = np.flatnonzero(np.abs(q[:, j]) > 1e-14)
        if nz.size and q[nz[0], j] < 0:
            q[:, j] = -q[:, j]
    return q


def is_orthonormal(emb, tol: float = 1e-8) -> bool:
    emb = np.asarray(emb, dtype=float)
    return bool(np.linalg.norm(emb.T @ emb - np.eye(emb.shape[1])) <= tol)


def orthogonal_projection(emb, tol: float = 1e-8) -> np.ndarray:
    """Pi = emb emb^T for an orthonormal embedding."""
    emb = np.asarray(emb, dtype=float)
    if not is_orthonormal(emb, tol):
        raise ValueError("orthogonal projection requires emb^T emb = I")
    return emb @ emb.T


def oblique_projection(emb, p_pi, gamma: float) -> np.ndarray:
    """emb (emb^T (I - gamma P) emb)^{-1} emb^T (I - gamma P)."""
    emb = np.asarray(emb, dtype=float)
    S = emb.shape[0]
    a = np.eye(S) - gamma * np.asarray(p_pi, dtype=float)
    inner = emb.T @ a @ emb
    return emb @ solve(inner, emb.T @ a)


def random_orthonormal(rng: np.random.Generator, n_states: int, dim: int) -> np.ndarray:
    return orthonormalize(rng.standard_normal((n_states, dim)))
