import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tdjepa_lab.envs import sample_random_mdp
from tdjepa_lab.mdp import deterministic_policy, policy_kernel
from tdjepa_lab.representations import Representation, random_orthonormal

settings.register_profile(
    "lab",
    max_examples=30,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("lab")

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def action_kernels(mdp):
    """One kernel per action: latent z follows "always take action z"."""
    S, A = mdp.n_states, mdp.n_actions
    return [policy_kernel(mdp, deterministic_policy(np.full(S, a), A)) for a in range(A)]


def exact_symmetric_kernel(seed, S=6, n_perm=4):
    """Mixture of (Q + Q^T) / 2 over random permutations Q: symmetric to the last bit."""
    r = np.random.default_rng(seed)
    w = r.dirichlet(np.ones(n_perm))
    p = np.zeros((S, S))
    for k in range(n_perm):
        q = np.eye(S)[r.permutation(S)]
        p += w[k] * (0.5 * (q + q.T))
    return p


def symmetric_instance(seed: int, S: int = 8, d_phi: int = 3, d_psi: int = 2, n_z: int = 2, gamma: float = 0.9):
    rng = np.random.default_rng(seed)
    mdp = sample_random_mdp(rng, S, n_z, gamma, symmetric=True)
    rep = Representation(random_orthonormal(rng, S, d_phi), random_orthonormal(rng, S, d_psi))
    return mdp, action_kernels(mdp), rep


def general_instance(seed: int, S: int = 7, d_phi: int = 3, d_psi: int = 2, n_z: int = 2, gamma: float = 0.8, mode: str = "literal"):
    from tdjepa_lab.envs import random_state_dist

    rng = np.random.default_rng(seed)
    rho = random_state_dist(rng, S)
    mdp = sample_random_mdp(rng, S, n_z, gamma, rho=rho, d_rho_mode=mode)
    rep = Representation(rng.standard_normal((S, d_phi)), rng.standard_normal((S, d_psi)))
    return mdp, action_kernels(mdp), rep
