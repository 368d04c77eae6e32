import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import action_kernels, general_instance, symmetric_instance
from tdjepa_lab import losses as L
from tdjepa_lab.mdp import TabularMDP, successor_measure
from tdjepa_lab.numerics import ShapeError, finite_diff_grad, grad_rel_error
from tdjepa_lab.representations import BACKWARD, FORWARD, PredictorFamily, Representation

seeds = st.integers(0, 2**32 - 1)
SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])

ALL_KINDS = L.all_kinds() + [
    L.LossKind(L.DENSITY, L.ONE_STEP),
    L.LossKind(L.GEN_FWD, L.ONE_STEP),
    L.LossKind(L.GEN_BWD, L.ONE_STEP),
    L.LossKind(L.GEN_FWD, L.BOOTSTRAP),
    L.LossKind(L.GEN_BWD, L.BOOTSTRAP),
]
SQUARED = [L.SM, L.MC_JEPA_FWD, L.MC_JEPA_BWD, L.TD_JEPA_FWD, L.TD_JEPA_BWD, L.TD_FW, L.TD_BW, L.DENSITY]


def family(rng, rep, kind, n):
    shape = (rep.d_phi, rep.d_psi) if kind.orientation == FORWARD else (rep.d_psi, rep.d_phi)
    return PredictorFamily([rng.standard_normal(shape) for _ in range(n)], kind.orientation)


def identity_setup(S=5, gamma=0.8, seed=0):
    mdp = TabularMDP(np.random.default_rng(seed).dirichlet(np.ones(S), size=S)[None], gamma)
    rep = Representation(np.eye(S), np.eye(S))
    return mdp, [mdp.P[0]], rep


def test_loss_kind_validation():
    with pytest.raises(ValueError):
        L.LossKind("NOPE")
    with pytest.raises(ValueError):
        L.LossKind(L.SM, "bogus")
    with pytest.raises(ValueError):
        L.LossKind(L.DENSITY, L.BOOTSTRAP)
    assert str(L.LossKind(L.GEN_FWD, L.ONE_STEP)) == "GEN_FWD[one-step]"
    assert L.LossKind(L.TD_BW).orientation == BACKWARD
    assert len(L.all_kinds()) == 10


def test_exact_factorization_has_zero_loss():
    mdp, kernels, rep = identity_setup()
    M = successor_measure(kernels[0], mdp.gamma)
    fwd = PredictorFamily([M])
    assert L.eval_loss(L.LossKind(L.SM), rep, fwd, kernels, mdp) < 1e-25
    assert L.eval_loss(L.LossKind(L.TD_JEPA_FWD), rep, fwd, kernels, mdp) < 1e-25


def test_mc_loss_on_swap_chain():
    mdp = TabularMDP(SWAP[None], 0.5)
    rep = Representation(np.eye(2), np.eye(2))
    val = L.eval_loss(L.LossKind(L.MC_JEPA_FWD), rep, PredictorFamily([np.zeros((2, 2))]), [SWAP], mdp)
    assert val == pytest.approx(20 / 9, abs=1e-12)


def test_sm_grad_T_vanishes_at_projection():
    mdp, kernels, rep = symmetric_instance(1)
    ks = L.KernelSet.build(kernels, mdp)
    fam = PredictorFamily([rep.phi.T @ M @ rep.psi for M in ks.M])
    b = L.eval_grads(L.LossKind(L.SM), rep, fam, ks, mdp)
    assert max(np.linalg.norm(g) for g in b.grad_T) < 1e-10


def test_sm_zero_parameters_zero_phi_gradient():
    mdp, kernels, _ = symmetric_instance(2)
    rep = Representation(np.zeros((8, 3)), np.zeros((8, 2)))
    fam = PredictorFamily([np.zeros((3, 2))] * len(kernels))
    assert np.array_equal(L.eval_grads(L.LossKind(L.SM), rep, fam, kernels, mdp).grad_phi, np.zeros((8, 3)))


def test_orientation_and_shape_checks():
    mdp, kernels, rep = symmetric_instance(3)
    fwd = PredictorFamily([np.zeros((3, 2))] * len(kernels))
    with pytest.raises(ValueError):
        L.eval_loss(L.LossKind(L.TD_BW), rep, fwd, kernels, mdp)
    with pytest.raises(ShapeError):
        L.eval_loss(L.LossKind(L.SM), rep, PredictorFamily([np.zeros((2, 2))] * len(kernels)), kernels, mdp)
    with pytest.raises(ShapeError):
        L.eval_loss(L.LossKind(L.SM), rep, PredictorFamily([np.zeros((3, 2))] * 5), kernels, mdp)


@pytest.mark.parametrize("mode", ["literal", "unnormalized"])
@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
def test_gradients_match_finite_differences(kind, mode):
    mdp, kernels, rep = general_instance(11, S=6, d_phi=3, d_psi=2, n_z=2, mode=mode)
    fam = family(np.random.default_rng(4), rep, kind, len(kernels))
    b = L.eval_grads(kind, rep, fam, kernels, mdp)
    frozen = (rep.phi, rep.psi, fam.mats)

    def f(phi=rep.phi, psi=rep.psi, mats=fam.mats):
        return L.surrogate_loss(kind, (phi, psi, mats), frozen, fam.weights, kernels, mdp)

    assert grad_rel_error(finite_diff_grad(lambda x: f(phi=x), rep.phi), b.grad_phi) < 1e-5
    assert grad_rel_error(finite_diff_grad(lambda x: f(psi=x), rep.psi), b.grad_psi) < 1e-5
    for z in range(len(fam)):

        def fz(x, z=z):
            mats = list(fam.mats)
            mats[z] = x
            return f(mats=mats)

        assert grad_rel_error(finite_diff_grad(fz, fam.mats[z]), b.grad_T[z]) < 1e-5
    # the surrogate at the frozen point is the loss itself
    assert f() == pytest.approx(b.value, rel=1e-12, abs=1e-14)


@given(seeds)
def test_squared_losses_nonnegative(seed):
    mdp, kernels, rep = general_instance(seed % 1000, S=6)
    r = np.random.default_rng(seed)
    for tag in SQUARED:
        kind = L.LossKind(tag)
        assert L.eval_loss(kind, rep, family(r, rep, kind, len(kernels)), kernels, mdp) >= 0.0


@given(seeds)
def test_monte_carlo_gradient_matching(seed):
    mdp, kernels, rep = symmetric_instance(seed % 10_000)
    r = np.random.default_rng(seed)
    fam = family(r, rep, L.LossKind(L.SM), len(kernels))
    sm = L.eval_grads(L.LossKind(L.SM), rep, fam, kernels, mdp)
    mc_f = L.eval_grads(L.LossKind(L.MC_JEPA_FWD), rep, fam, kernels, mdp)
    mc_b = L.eval_grads(L.LossKind(L.MC_JEPA_BWD), rep, fam.transposed(), kernels, mdp)
    assert np.max(np.abs(sm.grad_phi - mc_f.grad_phi)) < 1e-9
    assert np.max(np.abs(sm.grad_psi - mc_b.grad_psi)) < 1e-9


@given(seeds, st.sampled_from([0.5, 0.9]))
def test_td_gradient_matching(seed, gamma):
    mdp, kernels, rep = symmetric_instance(seed % 10_000, gamma=gamma)
    r = np.random.default_rng(seed)
    fam = family(r, rep, L.LossKind(L.SM), len(kernels))
    fw = L.eval_grads(L.LossKind(L.TD_FW), rep, fam, kernels, mdp)
    jf = L.eval_grads(L.LossKind(L.TD_JEPA_FWD), rep, fam, kernels, mdp)
    assert np.max(np.abs(fw.grad_phi - jf.grad_phi)) < 1e-9
    bfam = family(r, rep, L.LossKind(L.TD_BW), len(kernels))
    bw = L.eval_grads(L.LossKind(L.TD_BW), rep, bfam, kernels, mdp)
    jb = L.eval_grads(L.LossKind(L.TD_JEPA_BWD), rep, bfam, kernels, mdp)
    assert np.max(np.abs(bw.grad_psi - jb.grad_psi)) < 1e-9


@given(seeds, st.sampled_from(L.KERNELS))
def test_generalized_gradient_matching_without_assumptions(seed, kernel):
    mdp, kernels, rep = general_instance(seed % 10_000, mode="literal" if seed % 2 else "unnormalized")
    r = np.random.default_rng(seed)
    n = len(kernels)
    fam = family(r, rep, L.LossKind(L.SM), n)
    bfam = family(r, rep, L.LossKind(L.TD_BW), n)
    if kernel == L.BOOTSTRAP:
        dens_f, dens_b, b_fam = L.LossKind(L.TD_FW), L.LossKind(L.TD_BW), bfam
    else:
        dens_f = dens_b = L.LossKind(L.DENSITY, kernel)
        b_fam = bfam.transposed()
    a = L.eval_grads(dens_f, rep, fam, kernels, mdp)
    g = L.eval_grads(L.LossKind(L.GEN_FWD, kernel), rep, fam, kernels, mdp)
    assert np.max(np.abs(a.grad_phi - g.grad_phi)) < 1e-9
    assert max(np.max(np.abs(x - y)) for x, y in zip(a.grad_T, g.grad_T)) < 1e-9
    c = L.eval_grads(dens_b, rep, b_fam, kernels, mdp)
    e = L.eval_grads(L.LossKind(L.GEN_BWD, kernel), rep, bfam, kernels, mdp)
    c_T = c.grad_T if kernel == L.BOOTSTRAP else [x.T for x in c.grad_T]
    assert np.max(np.abs(c.grad_psi - e.grad_psi)) < 1e-9
    assert max(np.max(np.abs(x - y)) for x, y in zip(c_T, e.grad_T)) < 1e-9


def test_sampled_loss_single_exact_row():
    rep = Representation(np.eye(3), np.eye(3))
    T = np.zeros((3, 3))
    T[0] = np.eye(3)[2]  # phi(0) T = psi(2)
    fam = PredictorFamily([T])
    assert L.sampled_loss(L.LossKind(L.TD_JEPA_FWD), rep, fam, [0], [0], [2], 0.0) == 0.0
    with pytest.raises(ValueError):
        L.sampled_loss(L.LossKind(L.TD_JEPA_FWD), rep, fam, [], [], [], 0.0)
    with pytest.raises(ValueError):
        L.sampled_loss(L.LossKind(L.SM), rep, fam, [0], [0], [2], 0.0)


@pytest.mark.parametrize("tag", [L.TD_JEPA_FWD, L.TD_JEPA_BWD])
def test_sampled_loss_full_dataset_on_deterministic_chain(tag, rng):
    S = 5
    chain = np.roll(np.eye(S), 1, axis=1)
    mdp = TabularMDP(chain[None], 0.7, d_rho_mode="literal")
    rep = Representation(rng.standard_normal((S, 3)), rng.standard_normal((S, 2)))
    kind = L.LossKind(tag)
    fam = family(rng, rep, kind, 1)
    s = np.arange(S)
    avg = L.sampled_loss(kind, rep, fam, s, np.zeros(S, int), (s + 1) % S, mdp.gamma)
    assert avg == pytest.approx(L.eval_loss(kind, rep, fam, [chain], mdp), abs=1e-12)


@pytest.mark.parametrize("tag", [L.TD_JEPA_FWD, L.MC_JEPA_FWD])
def test_sampled_loss_monte_carlo_convergence(tag):
    mdp, kernels, rep = general_instance(21, S=6)
    kind = L.LossKind(tag)
    fam = family(np.random.default_rng(21), rep, kind, len(kernels))
    r = np.random.default_rng(22)
    s, z, s2 = L.sample_on_policy(mdp, kernels, fam.weights, r, 100_000, future=(tag == L.MC_JEPA_FWD))
    rows = L.sampled_losses_per_row(kind, rep, fam, s, z, s2, mdp.gamma)
    se = rows.std(ddof=1) / np.sqrt(rows.size)
    assert abs(rows.mean() - L.expected_sampled_loss(kind, rep, fam, kernels, mdp)) < 3 * se


def test_sampled_td_loss_is_literal_loss_plus_target_variance():
    mdp, kernels, rep = general_instance(5, mode="literal")
    kind = L.LossKind(L.TD_JEPA_FWD)
    fam = family(np.random.default_rng(5), rep, kind, len(kernels))
    exact = L.eval_loss(kind, rep, fam, kernels, mdp)
    var = 0.0
    for w, P, T in zip(fam.weights, kernels, fam.mats):
        y = rep.psi + mdp.gamma * rep.phi @ T  # target for every next state
        mean = P @ y
        for s in range(rep.n_states):
            var += w * mdp.rho[s] * 0.5 * P[s] @ np.sum((y - mean[s]) ** 2, axis=1)
    assert L.expected_sampled_loss(kind, rep, fam, kernels, mdp) == pytest.approx(exact + var, rel=1e-12)


def test_sampled_mc_loss_differs_by_a_predictor_free_constant():
    mdp, kernels, rep = general_instance(6, mode="literal")
    kind = L.LossKind(L.MC_JEPA_FWD)
    r = np.random.default_rng(6)
    gaps = []
    for _ in range(10):
        fam = family(r, rep, kind, len(kernels))
        fam.weights = np.full(len(kernels), 1.0 / len(kernels))
        gaps.append(L.expected_sampled_loss(kind, rep, fam, kernels, mdp) - L.eval_loss(kind, rep, fam, kernels, mdp))
    assert max(gaps) - min(gaps) < 1e-9
    assert min(gaps) > 0


def test_future_state_sampler_matches_occupancy():
    mdp, kernels, _ = general_instance(8, S=4, n_z=1)
    r = np.random.default_rng(8)
    s, _, s2 = L.sample_on_policy(mdp, kernels, [1.0], r, 200_000, future=True)
    emp = np.zeros((4, 4))
    np.add.at(emp, (s, s2), 1.0)
    emp /= emp.sum(axis=1, keepdims=True)
    occ = (1 - mdp.gamma) * successor_measure(kernels[0], mdp.gamma)
    assert np.max(np.abs(emp - occ)) < 0.01


def test_loss_sweep_csv():
    mdp, kernels, rep = symmetric_instance(4)
    kind = L.LossKind(L.SM)
    fam = family(np.random.default_rng(4), rep, kind, len(kernels))
    text = L.loss_sweep_csv([(kind, L.eval_grads(kind, rep, fam, kernels, mdp))])
    lines = text.splitlines()
    assert lines[0] == "kind,z,value,grad_T_norm,grad_phi_norm,grad_psi_norm"
    assert len(lines) == 1 + len(kernels)
    assert lines[1].startswith("SM,0,")


def test_kernel_set_adjoint_cache():
    mdp, kernels, _ = general_instance(9)
    ks = L.KernelSet.build(kernels, mdp)
    assert L.KernelSet.build(ks, mdp) is ks
    assert ks.adjoint(L.ONE_STEP) is ks.adjoint(L.BOOTSTRAP)
    assert len(ks.xi(L.SUCCESSOR)) == len(action_kernels(mdp))
