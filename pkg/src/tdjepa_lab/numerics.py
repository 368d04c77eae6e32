"""Dense matrix kernel, verification oracles and a fixed-step RK4 integrator.

Matrices are plain float64 numpy arrays. Every public routine here checks
shapes up front and refuses to return non-finite entries.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

COND_CAP = 1e12
FD_STEP = 1e-5


class ShapeError(ValueError):
    pass


class SingularMatrixError(ArithmeticError):
    def __init__(self, message: str, estimate: float = float("inf")):
        super().__init__(message)
        self.estimate = estimate


class NonFiniteError(ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic stream: PCG64 seeded from a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=float)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{what} has non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "product")


def lu_condition_proxy(u_diag: np.ndarray) -> float:
    mags = np.abs(u_diag)
    lo = mags.min()
    if lo == 0.0:
        return float("inf")
    return float(mags.max() / lo)


def _lu(m):
    # singularity is reported through the pivot-ratio estimate instead
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        return scipy.linalg.lu_factor(m, check_finite=False)


def invert(m, cond_cap: float = COND_CAP) -> np.ndarray:
    """Inverse through LU with partial pivoting.

    The condition estimate is the ratio of extreme pivot magnitudes of U;
    anything above ``cond_cap`` is rejected.
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"cannot invert non-square matrix of shape {m.shape}")
    check_finite(m)
    lu, piv = _lu(m)
    est = lu_condition_proxy(np.diag(lu))
    if not est <= cond_cap:
        raise SingularMatrixError(
            f"matrix is singular or ill-conditioned (condition estimate {est:.3g})", est
        )
    inv = scipy.linalg.lu_solve((lu, piv), np.eye(m.shape[0]), check_finite=False)
    return check_finite(inv, "inverse")


def solve(a, b, cond_cap: float = COND_CAP) -> np.ndarray:
    """Solve a x = b with the same LU/condition policy as ``invert``."""
    a = as_matrix(a)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != a.shape[1] or a.shape[0] != b.shape[0]:
        raise ShapeError(f"cannot solve system with {a.shape} and {b.shape}")
    lu, piv = _lu(a)
    est = lu_condition_proxy(np.diag(lu))
    if not est <= cond_cap:
        raise SingularMatrixError(
            f"system is singular or ill-conditioned (condition estimate {est:.3g})", est
        )
    return check_finite(scipy.linalg.lu_solve((lu, piv), b, check_finite=False), "solution")


def pinv(m, ridge: float = 0.0) -> np.ndarray:
    """Left pseudo-inverse (m^T m + ridge I)^{-1} m^T."""
    m = as_matrix(m)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    gram = m.T @ m + ridge * np.eye(m.shape[1])
    try:
        return solve(gram, m.T)
    except SingularMatrixError as err:
        if ridge == 0:
            raise SingularMatrixError(
                "matrix is rank-deficient; use ridge > 0", err.estimate
            ) from err
        raise


def frob_norm_sq(m) -> float:
    m = np.asarray(m, dtype=float)
    return float(np.sum(m * m))


def weighted_frob_norm_sq(m, w) -> float:
    """||m||_W^2 = ||m W^{1/2}||_F^2 = trace(m W m^T)."""
    m, w = as_matrix(m), as_matrix(w)
    if w.shape != (m.shape[1], m.shape[1]):
        raise ShapeError(f"weight of shape {w.shape} does not match matrix {m.shape}")
    if not np.allclose(w, w.T, rtol=0, atol=1e-12 * max(1.0, np.abs(w).max())):
        raise ValueError("weight matrix must be symmetric")
    return float(np.sum((m @ w) * m))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return g


def grad_rel_error(g_fd, g) -> float:
    """||g_fd - g||_F / max(1, ||g||_F)."""
    g_fd, g = np.asarray(g_fd), np.asarray(g)
    return float(np.linalg.norm(g_fd - g) / max(1.0, np.linalg.norm(g)))


def rk4_integrate(
    rhs: Callable[[np.ndarray], np.ndarray],
    x0,
    step: float,
    horizon: float,
    record_every: int = 1,
) -> list[np.ndarray]:
    """Classical fixed-step RK4 for an autonomous system x' = rhs(x).

    Returns the states at steps 0, k, 2k, ... and always the final one.
    A zero horizon returns [x0].
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    x = np.array(x0, dtype=float)
    traj = [x.copy()]
    n_steps = int(round(horizon / step))
    for i in range(1, n_steps + 1):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * step * k1)
        k3 = rhs(x + 0.5 * step * k2)
        k4 = rhs(x + step * k3)
        x = x + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state at integration step {i}", step=i)
        if i % record_every == 0 or i == n_steps:
            traj.append(x.copy())
    return traj


def expm(a) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a Taylor core."""
    a = as_matrix(a)
    norm = np.linalg.norm(a, 1)
    s = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0 else 0
    b = a / 2.0**s
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, 30):
        term = term @ b / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def sample_unit_sphere(rng: np.random.Generator, dim: int, radius: float = 1.0) -> np.ndarray:
    if dim < 1 or radius <= 0:
        raise ValueError("need dim >= 1 and radius > 0")
    while True:
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
        if n > 0:
            return v * (radius / n)


def sample_sphere_batch(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v * (radius / norms)


def psd_sqrt(w) -> np.ndarray:
    vals, vecs = np.linalg.eigh(as_matrix(w))
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def stack_params(mats: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(m, dtype=float).reshape(-1) for m in mats])


def unstack_params(flat: np.ndarray, shapes: Sequence[tuple]) -> list[np.ndarray]:
    out, k = [], 0
    for shp in shapes:
        n = int(np.prod(shp))
        out.append(flat[k : k + n].reshape(shp))
        k += n
    return out
