"""Softmax policies, vector value heads and the scalarized PPO update.

Parameters live in flat float64 vectors so that the constrained updates can
treat them as points in R^d (trust regions, conjugate gradient). Both policy
kinds expose the same small surface:

``logits(X)``, ``vjp(X, U)`` (pull a per-logit cotangent back to parameters),
``jvp(X, v)`` (push a parameter direction forward to logits) and
``sample(obs, state, rng)``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import rollout

CHECKPOINT_FORMAT = "cmorl-policy/1"


class NumericalError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BatchError(ValueError):
    pass


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# --------------------------------------------------------------------------
# feed-forward core


class _MLP:
    """tanh MLP on a flat parameter vector; linear output layer."""

    def __init__(self, sizes):
        self.sizes = tuple(int(s) for s in sizes)
        self.shapes = [(self.sizes[i + 1], self.sizes[i]) for i in range(len(self.sizes) - 1)]
        self.size = sum(o * i + o for o, i in self.shapes)

    def init(self, rng: np.random.Generator, out_scale: float) -> np.ndarray:
        parts = []
        for k, (o, i) in enumerate(self.shapes):
            gain = out_scale if k == len(self.shapes) - 1 else np.sqrt(2.0)
            q, _ = np.linalg.qr(rng.standard_normal((max(o, i), min(o, i))))
            W = q if o >= i else q.T
            parts += [gain * W[:o, :i].ravel(), np.zeros(o)]
        return np.concatenate(parts)

    def unpack(self, theta):
        out, k = [], 0
        for o, i in self.shapes:
            W = theta[k:k + o * i].reshape(o, i)
            k += o * i
            b = theta[k:k + o]
            k += o
            out.append((W, b))
        return out

    def forward(self, theta, X):
        layers = self.unpack(theta)
        acts = [X]
        h = X
        for j, (W, b) in enumerate(layers):
            h = h @ W.T + b
            if j < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def vjp(self, theta, acts, U):
        layers = self.unpack(theta)
        grads = []
        g = U
        for j in range(len(layers) - 1, -1, -1):
            W, _ = layers[j]
            grads.append((g.T @ acts[j], g.sum(axis=0)))
            if j > 0:
                g = (g @ W) * (1.0 - acts[j] ** 2)
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])

    def jvp(self, theta, acts, v):
        layers = self.unpack(theta)
        dlayers = self.unpack(v)
        dh = np.zeros_like(acts[0])
        for j, ((W, _), (dW, db)) in enumerate(zip(layers, dlayers)):
            dz = dh @ W.T + acts[j] @ dW.T + db
            dh = dz * (1.0 - acts[j + 1] ** 2) if j < len(layers) - 1 else dz
        return dh


class RunningNorm:
    """Observation standardizer; frozen before constrained updates begin."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0.0
        self.frozen = False

    def update(self, X: np.ndarray):
        if self.frozen or len(X) == 0:
            return
        m, v, k = X.mean(axis=0), X.var(axis=0), float(len(X))
        tot = self.count + k
        delta = m - self.mean
        self.mean = self.mean + delta * k / tot
        self.var = (self.var * self.count + v * k + delta ** 2 * self.count * k / tot) / tot
        self.count = tot

    def __call__(self, X):
        return (X - self.mean) / np.sqrt(self.var + 1e-8)

    def state(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count,
                "frozen": self.frozen}

    @classmethod
    def from_state(cls, s: dict) -> "RunningNorm":
        r = cls(len(s["mean"]))
        r.mean, r.var = np.array(s["mean"]), np.array(s["var"])
        r.count, r.frozen = s["count"], s["frozen"]
        return r


# --------------------------------------------------------------------------
# policies


class _PolicyBase:
    kind: str
    n_actions: int
    theta: np.ndarray

    def probs(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def log_prob(self, X, actions) -> np.ndarray:
        lp = log_softmax(self.logits(X))
        return lp[np.arange(len(lp)), np.asarray(actions)]

    def with_params(self, theta) -> "_PolicyBase":
        new = copy.deepcopy(self)
        new.theta = np.array(theta, dtype=np.float64)
        return new

    def clone(self):
        return copy.deepcopy(self)

    def sample(self, obs, state, rng: np.random.Generator):
        logits = self.logits(np.asarray([self.encode(obs, state)]))[0]
        if not np.all(np.isfinite(logits)):
            raise NumericalError(f"non-finite logits {logits}")
        lp = log_softmax(logits)
        cdf = np.cumsum(np.exp(lp))
        a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        a = min(a, self.n_actions - 1)
        return a, float(lp[a])

    def greedy(self) -> "GreedyPolicy":
        return GreedyPolicy(self)


class TabularPolicy(_PolicyBase):
    """One row of logits per discrete state."""

    kind = "tabular"

    def __init__(self, n_states: int, n_actions: int, theta=None):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.theta = (np.zeros(self.n_states * self.n_actions) if theta is None
                      else np.array(theta, dtype=np.float64))

    @property
    def arch(self) -> dict:
        return {"n_states": self.n_states, "n_actions": self.n_actions}

    def encode(self, obs, state):
        return int(state)

    def inputs(self, env, states):
        return np.asarray(states, dtype=int)

    def logits(self, X) -> np.ndarray:
        return self.theta.reshape(self.n_states, self.n_actions)[np.asarray(X, dtype=int)]

    def vjp(self, X, U) -> np.ndarray:
        G = np.zeros((self.n_states, self.n_actions))
        np.add.at(G, np.asarray(X, dtype=int), U)
        return G.ravel()

    def jvp(self, X, v) -> np.ndarray:
        return np.asarray(v).reshape(self.n_states, self.n_actions)[np.asarray(X, dtype=int)]


class MLPPolicy(_PolicyBase):
    """Two tanh hidden layers over standardized observations."""

    kind = "mlp"

    def __init__(self, obs_dim: int, n_actions: int, hidden=(64, 64), seed: int = 0, theta=None):
        self.obs_dim = int(obs_dim)
        self.n_actions = int(n_actions)
        self.hidden = tuple(int(h) for h in hidden)
        self.net = _MLP((self.obs_dim,) + self.hidden + (self.n_actions,))
        self.norm = RunningNorm(self.obs_dim)
        self.theta = (self.net.init(np.random.default_rng(seed), 0.01) if theta is None
                      else np.array(theta, dtype=np.float64))

    @property
    def arch(self) -> dict:
        return {"obs_dim": self.obs_dim, "n_actions": self.n_actions, "hidden": list(self.hidden),
                "norm": self.norm.state()}

    def encode(self, obs, state):
        return np.asarray(obs, dtype=np.float64)

    def inputs(self, env, states):
        return env.O[np.asarray(states, dtype=int)]

    def _fwd(self, X, theta=None):
        Xn = self.norm(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return self.net.forward(self.theta if theta is None else theta, Xn)

    def logits(self, X) -> np.ndarray:
        return self._fwd(X)[0]

    def vjp(self, X, U) -> np.ndarray:
        _, acts = self._fwd(X)
        return self.net.vjp(self.theta, acts, U)

    def jvp(self, X, v) -> np.ndarray:
        _, acts = self._fwd(X)
        return self.net.jvp(self.theta, acts, np.asarray(v))


class GreedyPolicy:
    """Deterministic view of a softmax policy (argmax action, first on ties)."""

    def __init__(self, policy):
        self.policy = policy

    def sample(self, obs, state, rng=None):
        logits = self.policy.logits(np.asarray([self.policy.encode(obs, state)]))[0]
        return int(np.argmax(logits)), 0.0


class TablePolicy:
    """Fixed deterministic action per state, for tests and oracle replays."""

    def __init__(self, actions):
        self.actions = actions

    def sample(self, obs, state, rng=None):
        return int(self.actions[state]), 0.0


# --------------------------------------------------------------------------
# value heads


class TabularValue:
    kind = "tabular"

    def __init__(self, n_states: int, n_objectives: int, theta=None):
        self.n_states, self.n_objectives = int(n_states), int(n_objectives)
        self.theta = (np.zeros(self.n_states * self.n_objectives) if theta is None
                      else np.array(theta, dtype=np.float64))

    @property
    def arch(self) -> dict:
        return {"n_states": self.n_states, "n_objectives": self.n_objectives}

    def predict(self, X) -> np.ndarray:
        return self.theta.reshape(self.n_states, self.n_objectives)[np.asarray(X, dtype=int)]

    def vjp(self, X, U) -> np.ndarray:
        G = np.zeros((self.n_states, self.n_objectives))
        np.add.at(G, np.asarray(X, dtype=int), U)
        return G.ravel()

    def clone(self):
        return copy.deepcopy(self)


class MLPValue:
    kind = "mlp"

    def __init__(self, obs_dim: int, n_objectives: int, hidden=(64, 64), seed: int = 0,
                 norm: RunningNorm | None = None, theta=None):
        self.obs_dim, self.n_objectives = int(obs_dim), int(n_objectives)
        self.hidden = tuple(int(h) for h in hidden)
        self.net = _MLP((self.obs_dim,) + self.hidden + (self.n_objectives,))
        self.norm = norm if norm is not None else RunningNorm(self.obs_dim)
        self.theta = (self.net.init(np.random.default_rng(seed + 1), 1.0) if theta is None
                      else np.array(theta, dtype=np.float64))

    @property
    def arch(self) -> dict:
        return {"obs_dim": self.obs_dim, "n_objectives": self.n_objectives,
                "hidden": list(self.hidden)}

    def predict(self, X) -> np.ndarray:
        return self.net.forward(self.theta, self.norm(np.atleast_2d(X)))[0]

    def vjp(self, X, U) -> np.ndarray:
        _, acts = self.net.forward(self.theta, self.norm(np.atleast_2d(X)))
        return self.net.vjp(self.theta, acts, U)

    def clone(self):
        return copy.deepcopy(self)


def make_policy(kind: str, env, seed: int = 0, hidden=(64, 64)):
    """Policy and matching value head for ``env``."""
    n = env.spec.n_objectives
    if kind == "tabular":
        return TabularPolicy(env.n_states, env.spec.action_count), TabularValue(env.n_states, n)
    if kind == "mlp":
        pol = MLPPolicy(env.obs_dim, env.spec.action_count, hidden, seed)
        return pol, MLPValue(env.obs_dim, n, hidden, seed, norm=pol.norm)
    raise ValueError(f"unknown policy kind {kind!r}")


# --------------------------------------------------------------------------
# sampling and evaluation


def act(policy, observation, state, rng):
    """Sample an action and its log-probability."""
    return policy.sample(observation, state, rng)


def evaluate_policy(env, policy, episodes: int, seed: int, mode: str = "stochastic"):
    """Monte-Carlo mean discounted return (``mode="greedy"`` uses the argmax action)."""
    runner = policy.greedy() if mode == "greedy" else policy
    return rollout(env, runner, episodes, seed)[1]


def evaluate_with_stderr(env, policy, episodes: int, seed: int, mode: str = "stochastic"):
    traces, mean = rollout(env, policy.greedy() if mode == "greedy" else policy, episodes, seed)
    G = np.stack([t.discounted_return(env.spec.gamma) for t in traces])
    stderr = G.std(axis=0, ddof=1) / np.sqrt(len(G)) if len(G) > 1 else np.zeros(G.shape[1])
    return mean, stderr


def mean_kl(policy_a, policy_b, X) -> float:
    """Mean over ``X`` of KL(policy_a(.|x) || policy_b(.|x))."""
    la = log_softmax(policy_a.logits(X))
    lb = log_softmax(policy_b.logits(X))
    return float(np.mean(np.sum(np.exp(la) * (la - lb), axis=1)))


def fisher_vector_product(policy, X, v, damping: float = 0.0) -> np.ndarray:
    """Hessian of mean KL(pi_old || pi_theta) at theta_old, applied to ``v``."""
    p = policy.probs(X)
    Jv = policy.jvp(X, v)
    M = p * Jv - p * np.sum(p * Jv, axis=1, keepdims=True)
    return policy.vjp(X, M) / len(p) + damping * np.asarray(v)


# --------------------------------------------------------------------------
# advantages and batches


@dataclass
class AdvantageBatch:
    """Flattened on-policy samples with per-objective advantages.

    ``steps`` holds each sample's time index within its episode, used to
    discount surrogate return estimates.
    """

    inputs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray
    steps: np.ndarray
    episode_returns: np.ndarray
    gamma: float
    observations: np.ndarray | None = None

    def __post_init__(self):
        N = len(self.actions)
        for name in ("inputs", "log_probs", "advantages", "targets", "steps"):
            if len(getattr(self, name)) != N:
                raise BatchError(f"{name} has length {len(getattr(self, name))}, expected {N}")

    def __len__(self):
        return len(self.actions)

    @property
    def n_episodes(self) -> int:
        return len(self.episode_returns)

    @property
    def n_objectives(self) -> int:
        return self.advantages.shape[1]

    def mean_return(self) -> np.ndarray:
        return self.episode_returns.mean(axis=0)

    def return_stderr(self) -> np.ndarray:
        E = self.n_episodes
        if E < 2:
            return np.zeros(self.n_objectives)
        return self.episode_returns.std(axis=0, ddof=1) / np.sqrt(E)


def gae_advantages(trace, value_predictions, gamma: float, gae_lambda: float):
    """Per-objective GAE for one episode.

    ``value_predictions`` has one row per visited state (``len(trace)`` or
    ``len(trace) + 1`` rows). The state after a terminal step is worth zero.
    Returns ``(advantages, value_targets)``, each ``(T, n)``.
    """
    if not 0.0 <= gae_lambda <= 1.0:
        raise ValueError("gae_lambda must lie in [0, 1]")
    R = np.asarray(trace.rewards, dtype=np.float64)
    V = np.asarray(value_predictions, dtype=np.float64)
    T = len(R)
    if len(V) not in (T, T + 1) or (V.ndim == 2 and V.shape[1] != R.shape[1]):
        raise BatchError(f"value predictions shape {V.shape} does not match {T} steps")
    nxt = np.zeros_like(R)
    nxt[:-1] = V[1:T]
    if not trace.terminals[-1] and len(V) == T + 1:
        nxt[-1] = V[T]
    deltas = R + gamma * nxt - V[:T]
    adv = np.zeros_like(R)
    acc = np.zeros(R.shape[1])
    for t in range(T - 1, -1, -1):
        acc = deltas[t] + gamma * gae_lambda * acc
        adv[t] = acc
    return adv, adv + V[:T]


def _sample_rows(logits: np.ndarray, rng: np.random.Generator):
    lp = log_softmax(logits)
    cdf = np.cumsum(np.exp(lp), axis=1)
    u = rng.random(len(lp)) * cdf[:, -1]
    a = np.minimum((cdf <= u[:, None]).sum(axis=1), lp.shape[1] - 1)
    return a, lp[np.arange(len(a)), a]


def _run_episodes(env, policy, count: int, rng: np.random.Generator):
    """Step ``count`` episodes in lockstep on the environment tables.

    Returns time-major ``(H, count)`` arrays of states, actions, log-probs,
    rewards ``(H, count, n)`` and the validity mask.
    """
    H, n = env.spec.horizon, env.spec.n_objectives
    S = np.zeros((H, count), dtype=int)
    A = np.zeros((H, count), dtype=int)
    LP = np.zeros((H, count))
    R = np.zeros((H, count, n))
    mask = np.zeros((H, count), dtype=bool)
    state = np.full(count, env.start)
    alive = np.full(count, not env.terminal[env.start])
    nxt = np.argmax(env.P, axis=2) if env.deterministic else None
    for t in range(H):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        s = state[idx]
        logits = policy.logits(policy.inputs(env, s))
        if not np.all(np.isfinite(logits)):
            raise NumericalError("non-finite logits during collection")
        a, lp = _sample_rows(logits, rng)
        if nxt is not None:
            s2 = nxt[s, a]
        else:
            cdf = env._cdf[s, a]
            s2 = np.minimum((cdf <= rng.random(len(s))[:, None]).sum(axis=1), env.n_states - 1)
        S[t, idx], A[t, idx], LP[t, idx], R[t, idx] = s, a, lp, env.R[s, a]
        mask[t, idx] = True
        state[idx] = s2
        alive[idx[env.terminal[s2]]] = False
    return S, A, LP, R, mask


def collect_batch(env, policy, value, min_steps: int, rng: np.random.Generator,
                  gae_lambda: float = 0.95) -> AdvantageBatch:
    """Sample whole episodes until at least ``min_steps`` transitions are gathered.

    Episodes are simulated in lockstep from the environment's transition and
    reward tables, which is equivalent to calling ``reset``/``step`` per episode.
    Samples are ordered episode by episode.
    """
    gamma, H = env.spec.gamma, env.spec.horizon
    chunks, total, mean_len = [], 0, float(H)
    while total < min_steps:
        count = max(1, int(np.ceil(1.1 * (min_steps - total) / mean_len)))
        S, A, LP, R, mask = _run_episodes(env, policy, count, rng)
        lengths = mask.sum(axis=0)
        chunks.append((S, A, LP, R, mask))
        total += int(lengths.sum())
        mean_len = max(1.0, float(np.mean(lengths)))
    S, A, LP, R, mask = (np.concatenate(parts, axis=1) for parts in zip(*chunks))
    lengths = mask.sum(axis=0)
    keep = int(np.searchsorted(np.cumsum(lengths), min_steps)) + 1
    S, A, LP, R, mask = S[:, :keep], A[:, :keep], LP[:, :keep], R[:, :keep], mask[:, :keep]

    V = np.zeros(R.shape)
    V[mask] = value.predict(policy.inputs(env, S[mask]))
    # the state after the last valid step is terminal or truncated: worth zero
    V_next = np.zeros_like(V)
    V_next[:-1] = np.where(mask[1:, :, None], V[1:], 0.0)
    deltas = np.where(mask[:, :, None], R + gamma * V_next - V, 0.0)
    adv = np.zeros_like(V)
    ret = np.zeros(V.shape[1:])
    acc = np.zeros(V.shape[1:])
    for t in range(H - 1, -1, -1):
        acc = deltas[t] + gamma * gae_lambda * acc
        adv[t] = acc
        ret = R[t] + gamma * ret
    tgt = adv + V

    order = mask.T  # episode-major flattening
    steps = np.broadcast_to(np.arange(H)[:, None], S.shape).T[order]
    inputs = policy.inputs(env, S.T[order])
    return AdvantageBatch(inputs, A.T[order], LP.T[order], adv.transpose(1, 0, 2)[order],
                          tgt.transpose(1, 0, 2)[order], steps, ret, gamma, env.O[S.T[order]])


# --------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam on a flat parameter vector (ascent when ``step`` is given a gradient of
    an objective to maximize)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-5):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta + self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_norm(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


@dataclass
class PPOConfig:
    steps_per_batch: int = 512
    epochs: int = 10
    minibatches: int = 32
    clip: float = 0.2
    gae_lambda: float = 0.95
    lr: float = 3e-4
    value_lr: float | None = None
    value_coef: float = 0.5
    max_grad_norm: float | None = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    clipped: bool = True


@dataclass
class TrainState:
    """A policy, its value head and their optimizer moments."""

    policy: object
    value: object
    policy_opt: Adam
    value_opt: Adam

    @classmethod
    def fresh(cls, policy, value, cfg: PPOConfig) -> "TrainState":
        return cls(policy, value, Adam(cfg.lr), Adam(cfg.value_lr or cfg.lr))

    def clone(self) -> "TrainState":
        return copy.deepcopy(self)


def normalized_advantages(batch: AdvantageBatch, enabled: bool = True):
    A = batch.advantages
    if not enabled:
        return A, np.zeros(A.shape[1]), np.ones(A.shape[1])
    mu, sd = A.mean(axis=0), A.std(axis=0)
    return (A - mu) / (sd + 1e-8), mu, sd


def surrogate_gradient(policy, X, actions, logp_old, adv, clip: float, clipped: bool = True,
                       entropy_coef: float = 0.0):
    """Gradient (w.r.t. parameters) of the mean clipped surrogate ``min(rA, clip(r)A)``.

    ``adv`` is the scalar advantage per sample. Returns ``(grad, objective, clip_fraction)``.
    """
    logits = policy.logits(X)
    lp_all = log_softmax(logits)
    p = np.exp(lp_all)
    idx = np.arange(len(actions))
    ratio = np.exp(lp_all[idx, actions] - logp_old)
    if clipped:
        surr = np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)
        active = np.where(adv >= 0, ratio <= 1 + clip, ratio >= 1 - clip)
    else:
        surr = ratio * adv
        active = np.ones_like(ratio, dtype=bool)
    coef = np.where(active, ratio * adv, 0.0) / len(actions)
    U = -p * coef[:, None]
    U[idx, actions] += coef
    objective = float(surr.mean())
    if entropy_coef:
        H = -np.sum(p * lp_all, axis=1)
        U += entropy_coef * (-p * (lp_all + H[:, None])) / len(actions)
        objective += entropy_coef * float(H.mean())
    return policy.vjp(X, U), objective, float(1.0 - active.mean())


def policy_loss_gradient(policy, batch: AdvantageBatch, weights, cfg: PPOConfig):
    """Full-batch surrogate gradient at the behaviour policy for scalarization ``weights``."""
    A, _, _ = normalized_advantages(batch, cfg.normalize_advantages)
    scalar = A @ np.asarray(weights, dtype=np.float64)
    g, _, _ = surrogate_gradient(policy, batch.inputs, batch.actions, batch.log_probs, scalar,
                                 cfg.clip, cfg.clipped, cfg.entropy_coef)
    return g


def value_gradient(value, X, targets, coef: float):
    pred = value.predict(X)
    err = pred - targets
    loss = 0.5 * float(np.mean(np.sum(err ** 2, axis=1)))
    return -coef * value.vjp(X, err / len(X)), loss


def minibatch_indices(N: int, minibatches: int, rng: np.random.Generator):
    perm = rng.permutation(N)
    return [perm[k::minibatches] for k in range(min(minibatches, N))]


def fit_value(state: TrainState, batch: AdvantageBatch, idx, cfg: PPOConfig) -> float:
    gv, vloss = value_gradient(state.value, batch.inputs[idx], batch.targets[idx], cfg.value_coef)
    state.value.theta = state.value_opt.step(state.value.theta, clip_norm(gv, cfg.max_grad_norm))
    return vloss


def scalarized_pg_step(state: TrainState, batch: AdvantageBatch, weights, cfg: PPOConfig,
                       rng: np.random.Generator):
    """PPO epochs on the scalar advantage ``weights @ A``; value head regressed on
    the vector return targets.

    ``weights`` is normally a preference vector; the Lagrangian solver also
    passes unnormalized nonnegative weights. Returns ``(state', diagnostics)``
    with ``state`` left untouched.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (batch.n_objectives,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"invalid scalarization weights {weights!r}")
    if len(batch) == 0:
        raise BatchError("empty batch")
    new = state.clone()
    A, mu, sd = normalized_advantages(batch, cfg.normalize_advantages)
    scalar = A @ w
    old = state.policy
    obj = vloss = 0.0
    clipfrac = []
    for _ in range(cfg.epochs):
        for idx in minibatch_indices(len(batch), cfg.minibatches, rng):
            g, obj, cf = surrogate_gradient(new.policy, batch.inputs[idx], batch.actions[idx],
                                            batch.log_probs[idx], scalar[idx], cfg.clip,
                                            cfg.clipped, cfg.entropy_coef)
            if not (np.isfinite(obj) and np.all(np.isfinite(g))):
                raise NumericalError("non-finite policy loss", {"objective": obj})
            new.policy.theta = new.policy_opt.step(new.policy.theta, clip_norm(g, cfg.max_grad_norm))
            vloss = fit_value(new, batch, idx, cfg)
            if not np.isfinite(vloss):
                raise NumericalError("non-finite value loss", {"value_loss": vloss})
            clipfrac.append(cf)
    diag = {
        "surrogate": obj,
        "value_loss": vloss,
        "kl": mean_kl(old, new.policy, batch.inputs),
        "clip_fraction": float(np.mean(clipfrac)) if clipfrac else 0.0,
        "advantage_mean": mu.tolist(),
        "advantage_std": sd.tolist(),
        "advantage_normalized": cfg.normalize_advantages,
        "batch_return": batch.mean_return().tolist(),
    }
    return new, diag


# --------------------------------------------------------------------------
# checkpoints


def _component_record(obj) -> dict:
    return {"kind": obj.kind, "arch": obj.arch, "params": obj.theta.tolist()}


def save_checkpoint(path, policy, value=None, preference=None) -> None:
    """Write a JSON checkpoint (params as float64 lists, repr-exact)."""
    rec = {"format": CHECKPOINT_FORMAT, **_component_record(policy),
           "preference": None if preference is None else np.asarray(preference).tolist()}
    if value is not None:
        rec["value"] = _component_record(value)
    Path(path).write_text(json.dumps(rec))


def _restore_policy(rec: dict):
    arch = rec["arch"]
    if rec["kind"] == "tabular":
        return TabularPolicy(arch["n_states"], arch["n_actions"], rec["params"])
    pol = MLPPolicy(arch["obs_dim"], arch["n_actions"], arch["hidden"], theta=rec["params"])
    pol.norm = RunningNorm.from_state(arch["norm"])
    return pol


def load_checkpoint(path):
    """Return ``(policy, value_or_None, preference_or_None)``."""
    rec = json.loads(Path(path).read_text())
    if rec.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    policy = _restore_policy(rec)
    value = None
    if rec.get("value"):
        v = rec["value"]
        if v["kind"] == "tabular":
            value = TabularValue(v["arch"]["n_states"], v["arch"]["n_objectives"], v["params"])
        else:
            value = MLPValue(v["arch"]["obs_dim"], v["arch"]["n_objectives"], v["arch"]["hidden"],
                             norm=getattr(policy, "norm", None), theta=v["params"])
    pref = rec.get("preference")
    return policy, value, None if pref is None else np.array(pref)
