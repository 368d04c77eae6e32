"""Sampled minibatch TD-JEPA agent for finite MDPs.

Tabular encoders phi (S x d_phi) and psi (S x d_psi), action-conditioned
predictors, EMA target copies, latent sampling, orthonormality
regularization and zero-shot evaluation by reward regression.

Both predictors are trained forward in time:
    T_phi(phi(s), a, z) ~ psi^-(s') + gamma T_phi^-(phi^-(s'), a', z)
    T_psi(psi(s), a, z) ~ phi^-(s') + gamma T_psi^-(psi^-(s'), a', z)
with a' drawn from the target policy at phi^-(s'). The policy is the
softmax (or argmax) of Q_z(s, a) = T_phi(phi(s), a, z)^T z.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import Dataset
from .mdp import RewardTask, TabularMDP, deterministic_policy, policy_value, rollout_values, value_iteration
from .numerics import NonFiniteError, SingularMatrixError, sample_sphere_batch
from .representations import ortho_reg_grad, ortho_reg_loss, orthonormalize

BILINEAR = "bilinear"
MLP = "mlp"
CURVE_HEADER = ("step", "loss_phi", "loss_psi", "reg_phi", "reg_psi", "min_eig_phi", "min_eig_psi")


@dataclass
class TrainConfig:
    batch: int = 256
    reg: float = 1.0
    gamma: float | None = None  # None: use the MDP discount
    lr: float = 1e-2
    ema: float = 0.005
    p_goal: float = 0.5
    steps: int = 50_000
    tau: float = 0.05
    ridge: float = 1e-6
    reward_shift: float = 0.0
    d_phi: int = 16
    d_psi: int = 8
    predictor: str = BILINEAR
    hidden: int = 64
    init_scale: float = 0.01
    log_every: int = 500

    def __post_init__(self):
        if self.batch < 2:
            raise ValueError("batch must be at least 2")
        if self.reg < 0 or self.lr < 0 or self.tau <= 0 or self.ridge < 0:
            raise ValueError("reg, lr and ridge must be nonnegative and tau positive")
        if not 0.0 < self.ema <= 1.0:
            raise ValueError("ema must lie in (0, 1]")
        if not 0.0 <= self.p_goal <= 1.0:
            raise ValueError("p_goal must lie in [0, 1]")
        if self.steps < 0 or self.log_every < 1:
            raise ValueError("steps must be nonnegative and log_every positive")
        if self.predictor not in (BILINEAR, MLP):
            raise ValueError(f"unknown predictor {self.predictor!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# predictors: forward over all actions, backward for the taken action


def _bilinear_init(rng, n_actions, d_in, d_out, d_z, cfg):
    return {"W": cfg.init_scale * rng.standard_normal((n_actions, d_in, d_out, d_z))}


def _bilinear_layout(p, x, z):
    W = p["W"]
    A, d_in, d_out, d_z = W.shape
    xz = np.einsum("bi,bj->bij", x, z).reshape(len(x), d_in * d_z)
    Wm = W.transpose(1, 3, 0, 2).reshape(d_in * d_z, A * d_out)
    return xz, Wm


def _bilinear_all(p, x, z, keep=False):
    """(B, A, d_out) outputs for every action; W[a, i, k, j] x_i z_j."""
    A, _, d_out, _ = p["W"].shape
    xz, Wm = _bilinear_layout(p, x, z)
    out = (xz @ Wm).reshape(len(x), A, d_out)
    return (out, (xz, Wm)) if keep else out


def _bilinear_backward(p, x, z, a, G, cache=None):
    """Gradients of sum_b G_b . out(x_b, a_b, z_b) w.r.t. W and x."""
    A, d_in, d_out, d_z = p["W"].shape
    B = len(x)
    xz, Wm = _bilinear_layout(p, x, z) if cache is None else cache
    Gf = np.zeros((B, A, d_out))
    Gf[np.arange(B), a] = G
    Gf = Gf.reshape(B, A * d_out)
    gW = (xz.T @ Gf).reshape(d_in, d_z, A, d_out).transpose(2, 0, 3, 1)
    gxz = (Gf @ Wm.T).reshape(B, d_in, d_z)
    gx = np.matmul(gxz, z[:, :, None])[:, :, 0]
    return {"W": gW}, gx


def _mlp_init(rng, n_actions, d_in, d_out, d_z, cfg):
    h = cfg.hidden
    n_in = d_in + d_z + n_actions

    def glorot(m, n):
        return rng.standard_normal((m, n)) * np.sqrt(2.0 / (m + n))

    return {
        "W1": glorot(n_in, h),
        "b1": np.zeros(h),
        "W2": glorot(h, h),
        "b2": np.zeros(h),
        "W3": cfg.init_scale * rng.standard_normal((h, d_out)),
        "b3": np.zeros(d_out),
    }


def _mlp_forward(p, x, z, a):
    A = p["W1"].shape[0] - x.shape[1] - z.shape[1]
    onehot = np.zeros((len(x), A))
    onehot[np.arange(len(x)), a] = 1.0
    inp = np.concatenate([x, z, onehot], axis=1)
    h1 = np.tanh(inp @ p["W1"] + p["b1"])
    h2 = np.tanh(h1 @ p["W2"] + p["b2"])
    return h2 @ p["W3"] + p["b3"], (inp, h1, h2)


def _mlp_all(p, x, z, keep=False):
    A = p["W1"].shape[0] - x.shape[1] - z.shape[1]
    outs = [_mlp_forward(p, x, z, np.full(len(x), a))[0] for a in range(A)]
    out = np.stack(outs, axis=1)
    return (out, None) if keep else out


def _mlp_backward(p, x, z, a, G, cache=None):
    _, (inp, h1, h2) = _mlp_forward(p, x, z, a)
    g = {"W3": h2.T @ G, "b3": G.sum(axis=0)}
    d2 = (G @ p["W3"].T) * (1.0 - h2**2)
    g["W2"], g["b2"] = h1.T @ d2, d2.sum(axis=0)
    d1 = (d2 @ p["W2"].T) * (1.0 - h1**2)
    g["W1"], g["b1"] = inp.T @ d1, d1.sum(axis=0)
    gx = (d1 @ p["W1"].T)[:, : x.shape[1]]
    return g, gx


_PREDICTORS = {
    BILINEAR: (_bilinear_init, _bilinear_all, _bilinear_backward),
    MLP: (_mlp_init, _mlp_all, _mlp_backward),
}


# --------------------------------------------------------------------------
# agent state


def _copy(p: dict) -> dict:
    return {k: v.copy() for k, v in p.items()}


@dataclass(eq=False)
class AgentParams:
    """Online tables and predictors plus their EMA targets."""

    phi: np.ndarray
    psi: np.ndarray
    T_phi: dict
    T_psi: dict
    predictor: str = BILINEAR
    target: dict = field(default=None)

    def __post_init__(self):
        if self.target is None:
            self.target = {"phi": self.phi.copy(), "psi": self.psi.copy(), "T_phi": _copy(self.T_phi), "T_psi": _copy(self.T_psi)}

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]

    @property
    def d_psi(self) -> int:
        return self.psi.shape[1]

    def online(self) -> dict:
        return {"phi": self.phi, "psi": self.psi, "T_phi": self.T_phi, "T_psi": self.T_psi}

    def copy(self) -> "AgentParams":
        t = self.target
        return AgentParams(
            self.phi.copy(),
            self.psi.copy(),
            _copy(self.T_phi),
            _copy(self.T_psi),
            self.predictor,
            {"phi": t["phi"].copy(), "psi": t["psi"].copy(), "T_phi": _copy(t["T_phi"]), "T_psi": _copy(t["T_psi"])},
        )

    def flat_arrays(self) -> dict:
        """Every array keyed by a stable name (online and target)."""
        out = {"phi": self.phi, "psi": self.psi}
        for name in ("T_phi", "T_psi"):
            for k, v in getattr(self, name).items():
                out[f"{name}.{k}"] = v
        out["target.phi"] = self.target["phi"]
        out["target.psi"] = self.target["psi"]
        for name in ("T_phi", "T_psi"):
            for k, v in self.target[name].items():
                out[f"target.{name}.{k}"] = v
        return out

    @classmethod
    def from_flat_arrays(cls, arrays: dict, predictor: str = BILINEAR) -> "AgentParams":
        def group(prefix):
            return {k[len(prefix) :]: np.array(v) for k, v in arrays.items() if k.startswith(prefix)}

        target = {
            "phi": np.array(arrays["target.phi"]),
            "psi": np.array(arrays["target.psi"]),
            "T_phi": group("target.T_phi."),
            "T_psi": group("target.T_psi."),
        }
        return cls(np.array(arrays["phi"]), np.array(arrays["psi"]), group("T_phi."), group("T_psi."), predictor, target)


def init_agent(rng: np.random.Generator, n_states: int, n_actions: int, cfg: TrainConfig) -> AgentParams:
    """Encoders with unit empirical covariance (emb^T emb / S = I)."""
    if max(cfg.d_phi, cfg.d_psi) > n_states:
        raise ValueError("embedding dimension exceeds the number of states")
    scale = np.sqrt(n_states)
    phi = orthonormalize(rng.standard_normal((n_states, cfg.d_phi))) * scale
    psi = orthonormalize(rng.standard_normal((n_states, cfg.d_psi))) * scale
    init = _PREDICTORS[cfg.predictor][0]
    T_phi = init(rng, n_actions, cfg.d_phi, cfg.d_psi, cfg.d_psi, cfg)
    T_psi = init(rng, n_actions, cfg.d_psi, cfg.d_phi, cfg.d_psi, cfg)
    return AgentParams(phi, psi, T_phi, T_psi, cfg.predictor)


def predict_all(agent: AgentParams, which: str, x, z, target: bool = False) -> np.ndarray:
    """(B, A, d_out) predictor outputs; ``which`` is "T_phi" or "T_psi"."""
    p = agent.target[which] if target else getattr(agent, which)
    return _PREDICTORS[agent.predictor][1](p, np.atleast_2d(x), np.atleast_2d(z))


def q_values(agent: AgentParams, states, z, target: bool = False) -> np.ndarray:
    """Q_z(s, a) = T_phi(phi(s), a, z)^T z as a (B, A) array; z is (B, d) or (d,)."""
    states = np.atleast_1d(states)
    z = np.broadcast_to(np.asarray(z, dtype=float), (states.size, agent.d_psi))
    emb = (agent.target["phi"] if target else agent.phi)[states]
    out = predict_all(agent, "T_phi", emb, z, target)
    return np.einsum("bak,bk->ba", out, z)


def softmax_rows(q: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    x = (q - q.max(axis=1, keepdims=True)) / tau
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def policy(agent: AgentParams, s, z, tau: float, target: bool = False) -> np.ndarray:
    """Softmax action distribution(s) over Q_z(s, .) at temperature tau."""
    return softmax_rows(q_values(agent, s, z, target), tau)


def greedy_policy(agent: AgentParams, z) -> np.ndarray:
    """S x A deterministic policy argmax_a Q_z(s, a); ties to the lowest index."""
    q = q_values(agent, np.arange(agent.n_states), z)
    return deterministic_policy(np.argmax(q, axis=1), q.shape[1])


def _sample_rows(rng, probs):
    u = rng.random(len(probs))
    return np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), probs.shape[1] - 1)


def sample_z(rng, agent: AgentParams, dataset: Dataset, n: int, p_goal: float) -> np.ndarray:
    """psi^-(s) for a uniform dataset state with prob. p_goal, else a sphere sample of radius sqrt(d_psi)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    d = agent.d_psi
    from_data = rng.random(n) < p_goal
    idx = rng.integers(0, len(dataset), size=n)
    sphere = sample_sphere_batch(rng, n, d, np.sqrt(d))
    return np.where(from_data[:, None], agent.target["psi"][dataset.s[idx]], sphere)


# --------------------------------------------------------------------------
# objective


@dataclass
class StepDiagnostics:
    loss_phi: float
    loss_psi: float
    reg_phi: float
    reg_psi: float


def _targets(agent: AgentParams, s_next, z, a_next, gamma, next_out_phi=None):
    t = agent.target
    B = len(s_next)
    nxt_phi, nxt_psi = t["phi"][s_next], t["psi"][s_next]
    rows = np.arange(B)
    if next_out_phi is None:
        next_out_phi = predict_all(agent, "T_phi", nxt_phi, z, target=True)
    boot_phi = next_out_phi[rows, a_next]
    boot_psi = predict_all(agent, "T_psi", nxt_psi, z, target=True)[rows, a_next]
    return nxt_psi + gamma * boot_phi, nxt_phi + gamma * boot_psi


def objective_and_grads(
    agent: AgentParams, s, a, s_next, z, a_next, gamma: float, reg: float, need_grads: bool = True, next_out_phi=None
):
    """Sampled losses with targets frozen at the current target copies.

    Returns (diagnostics, grads) where grads maps "phi", "psi", "T_phi",
    "T_psi" to arrays shaped like the online parameters. ``next_out_phi``
    optionally reuses the target T_phi outputs at (phi^-(s'), z).
    """
    tgt_phi, tgt_psi = _targets(agent, s_next, z, a_next, gamma, next_out_phi)
    B = len(s)
    rows = np.arange(B)
    _, forward, backward = _PREDICTORS[agent.predictor]
    grads = {}
    diag = {}
    onehot = np.zeros((B, agent.n_states))
    onehot[rows, s] = 1.0
    for name, emb, pred_name, tgt in (("phi", agent.phi, "T_phi", tgt_phi), ("psi", agent.psi, "T_psi", tgt_psi)):
        x = emb[s]
        out, cache = forward(getattr(agent, pred_name), x, z, keep=True)
        R = out[rows, a] - tgt
        diag[f"loss_{name}"] = float(0.5 * np.sum(R * R) / B)
        diag[f"reg_{name}"] = ortho_reg_loss(x)
        if need_grads:
            gp, gx = backward(getattr(agent, pred_name), x, z, a, R / B, cache)
            gx = gx + reg * ortho_reg_grad(x)
            grads[name] = onehot.T @ gx
            grads[pred_name] = gp
    return StepDiagnostics(**diag), grads


def total_objective(agent, s, a, s_next, z, a_next, gamma, reg) -> float:
    d, _ = objective_and_grads(agent, s, a, s_next, z, a_next, gamma, reg, need_grads=False)
    return d.loss_phi + d.loss_psi + reg * (d.reg_phi + d.reg_psi)


def _ema(old: np.ndarray, new: np.ndarray, c: float) -> np.ndarray:
    return new.copy() if c == 1.0 else old + c * (new - old)


def update_step(agent: AgentParams, batch, z_batch, cfg: TrainConfig, rng, gamma: float, step: int = 0) -> StepDiagnostics:
    """One SGD step on both encoder/predictor pairs, then the EMA update (in place)."""
    s, a, s_next = (np.asarray(v, dtype=int) for v in batch)
    z = np.asarray(z_batch, dtype=float)
    if len(s) < 2 or len(z) != len(s):
        raise ValueError("batch and latent batch must have the same size >= 2")
    next_out = predict_all(agent, "T_phi", agent.target["phi"][s_next], z, target=True)
    a_next = _sample_rows(rng, softmax_rows(np.einsum("bak,bk->ba", next_out, z), cfg.tau))
    diag, grads = objective_and_grads(agent, s, a, s_next, z, a_next, gamma, cfg.reg, next_out_phi=next_out)
    if not np.isfinite([diag.loss_phi, diag.loss_psi, diag.reg_phi, diag.reg_psi]).all():
        raise NonFiniteError(f"non-finite loss at step {step}", step=step)
    lr = cfg.lr
    agent.phi -= lr * grads["phi"]
    agent.psi -= lr * grads["psi"]
    for name in ("T_phi", "T_psi"):
        params = getattr(agent, name)
        for k in params:
            params[k] -= lr * grads[name][k]
    c = cfg.ema
    t = agent.target
    t["phi"] = _ema(t["phi"], agent.phi, c)
    t["psi"] = _ema(t["psi"], agent.psi, c)
    for name in ("T_phi", "T_psi"):
        t[name] = {k: _ema(t[name][k], v, c) for k, v in getattr(agent, name).items()}
    return diag


def min_cov_eig(emb: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(emb.T @ emb / emb.shape[0])[0])


@dataclass
class TrainCurve:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in self.rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        return buf.getvalue()

    def column(self, name: str) -> np.ndarray:
        return np.array([r[CURVE_HEADER.index(name)] for r in self.rows], dtype=float)


def train(mdp: TabularMDP, dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator, agent: AgentParams | None = None):
    """Run ``cfg.steps`` updates; returns (agent, curve).

    The curve has a row at step 0 and every ``log_every`` steps with the
    interval-mean losses and the current covariance spectra.
    """
    gamma = mdp.gamma if cfg.gamma is None else cfg.gamma
    if agent is None:
        agent = init_agent(rng, mdp.n_states, mdp.n_actions, cfg)
    curve = TrainCurve()
    curve.rows.append((0, np.nan, np.nan, np.nan, np.nan, min_cov_eig(agent.phi), min_cov_eig(agent.psi)))
    acc = np.zeros(4)
    n = len(dataset)
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch)
        batch = (dataset.s[idx], dataset.a[idx], dataset.s_next[idx])
        z = sample_z(rng, agent, dataset, cfg.batch, cfg.p_goal)
        d = update_step(agent, batch, z, cfg, rng, gamma, step)
        acc += (d.loss_phi, d.loss_psi, d.reg_phi, d.reg_psi)
        if step % cfg.log_every == 0 or step == cfg.steps:
            k = step - curve.rows[-1][0]
            curve.rows.append((step, *(acc / k), min_cov_eig(agent.phi), min_cov_eig(agent.psi)))
            acc[:] = 0.0
    return agent, curve


# --------------------------------------------------------------------------
# zero-shot inference and evaluation


@dataclass
class TaskVector:
    z: np.ndarray
    fit_residual: float


def infer_task(agent: AgentParams, reward_samples, cfg: TrainConfig) -> TaskVector:
    """Ridge regression of (shifted) rewards on psi over the sampled states."""
    states = np.array([s for s, _ in reward_samples], dtype=int)
    r = np.array([v for _, v in reward_samples], dtype=float) + cfg.reward_shift
    if states.size == 0:
        raise ValueError("need at least one reward sample")
    feats = agent.psi[states]
    n = len(states)
    cov = feats.T @ feats / n + cfg.ridge * np.eye(agent.d_psi)
    rhs = feats.T @ r / n
    try:
        z = np.linalg.solve(cov, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("singular feature covariance; use ridge > 0") from exc
    if cfg.ridge == 0 and np.linalg.cond(cov) > 1e12:
        raise SingularMatrixError("singular feature covariance; use ridge > 0")
    resid = float(np.sqrt(np.mean((feats @ z - r) ** 2)))
    return TaskVector(z, resid)


def evaluate_zero_shot(
    agent: AgentParams,
    mdp: TabularMDP,
    task: RewardTask,
    cfg: TrainConfig,
    episodes: int,
    horizon: int,
    rng: np.random.Generator,
    dataset: Dataset | None = None,
) -> dict:
    """Infer z_r, act greedily on Q_{z_r}, and compare with the optimal value.

    Reward samples come from the dataset's next states when a dataset is
    given, otherwise from every state once. Both ratios use the unshifted
    reward and rho-averaged values.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    r = task.reward
    states = np.arange(mdp.n_states) if dataset is None else dataset.s_next
    tv = infer_task(agent, list(zip(states.tolist(), r[states].tolist())), cfg)
    pi = greedy_policy(agent, tv.z)
    v_star, _ = value_iteration(mdp, r)
    opt = float(mdp.rho @ v_star)
    exact = float(mdp.rho @ policy_value(mdp, pi, r))
    out = {"task": task.name, "z_fit_residual": tv.fit_residual, "optimal_value": opt, "policy_value": exact}
    out["exact_value_ratio"] = exact / opt if opt != 0 else 1.0
    if episodes > 0:
        ret = rollout_values(mdp, pi, r, rng, episodes, horizon)
        opt_ret = rollout_values(mdp, deterministic_policy(np.argmax(_q_star(mdp, r, v_star), axis=1), mdp.n_actions), r, rng, episodes, horizon)
        denom = float(opt_ret.mean())
        out["return_ratio"] = float(ret.mean()) / denom if denom != 0 else 1.0
    else:
        out["return_ratio"] = None
    return out


def _q_star(mdp, r, v):
    return (mdp.P @ (r + mdp.gamma * v)).T


def uniform_value_ratio(mdp: TabularMDP, task: RewardTask) -> float:
    r = task.reward
    v_star, _ = value_iteration(mdp, r)
    pi = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    return float(mdp.rho @ policy_value(mdp, pi, r)) / float(mdp.rho @ v_star)
