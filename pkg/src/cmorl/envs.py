"""Small multi-objective MDPs with enumerable Pareto fronts.

Every environment here is finite: it carries explicit transition and reward
tables, so :mod:`cmorl.oracle` can extract an exact tabular model from it.
Episodes end on a terminal state or when ``horizon`` steps have elapsed; the
horizon cut is treated as terminal (no bootstrapping at evaluation time).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Invalid environment or run configuration."""


class InvalidActionError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """Environment used out of order (e.g. ``step`` after the episode ended)."""


@dataclass(frozen=True)
class EnvSpec:
    n_objectives: int
    action_count: int
    horizon: int
    gamma: float

    def __post_init__(self):
        if self.n_objectives < 2:
            raise ConfigError("an MOMDP needs at least two objectives")
        if self.horizon < 1 or self.action_count < 1:
            raise ConfigError("horizon and action_count must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")


@dataclass
class EpisodeTrace:
    """One episode: ``observations`` has one more row than ``actions``."""

    observations: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    terminals: np.ndarray
    episode_seed: int

    def __len__(self) -> int:
        return len(self.actions)

    def discounted_return(self, gamma: float) -> np.ndarray:
        # Horner order, matching backward induction in the oracle
        g = np.zeros(self.rewards.shape[1])
        for r in self.rewards[::-1]:
            g = r + gamma * g
        return g


class TabularMOEnv:
    """Finite MOMDP driven by explicit tables.

    Args:
        transitions: ``P[s, a, s']``, rows summing to 1.
        rewards: ``R[s, a, i]`` expected vector reward.
        observations: ``O[s]`` observation vector emitted in state ``s``.
        start: start state index.
        terminal: boolean mask of absorbing terminal states.
    """

    env_id = "tabular"

    def __init__(self, transitions, rewards, observations, start: int, terminal,
                 horizon: int, gamma: float, params: dict | None = None):
        self.P = np.asarray(transitions, dtype=np.float64)
        self.R = np.asarray(rewards, dtype=np.float64)
        self.O = np.asarray(observations, dtype=np.float64)
        self.start = int(start)
        self.terminal = np.asarray(terminal, dtype=bool)
        nS, nA, _ = self.P.shape
        self.spec = EnvSpec(self.R.shape[2], nA, int(horizon), float(gamma))
        self.n_states = nS
        self.obs_dim = self.O.shape[1]
        self.params = dict(params or {})
        self.deterministic = bool(np.all(np.max(self.P, axis=2) == 1.0))
        self._cdf = np.cumsum(self.P, axis=2)
        self._state: int | None = None
        self._t = 0
        self._done = True
        self._rng = np.random.default_rng(0)

    @property
    def n_objectives(self) -> int:
        return self.spec.n_objectives

    @property
    def state(self) -> int | None:
        return self._state

    def state_index(self, obs) -> int:
        hits = np.flatnonzero(np.all(self.O == np.asarray(obs), axis=1))
        if hits.size == 0:
            raise ValueError(f"observation {obs!r} is not emitted by this environment")
        return int(hits[0])

    def reset(self, seed: int = 0) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._state = self.start
        self._t = 0
        self._done = bool(self.terminal[self.start])
        return self.O[self._state].copy()

    def step(self, action: int):
        if self._state is None or self._done:
            raise ProtocolError("step() called on a finished or unstarted episode")
        a = int(action)
        if not 0 <= a < self.spec.action_count:
            raise InvalidActionError(f"action {action!r} outside [0, {self.spec.action_count})")
        s = self._state
        reward = self.R[s, a].copy()
        if self.deterministic:
            s2 = int(np.argmax(self.P[s, a]))
        else:
            s2 = int(np.searchsorted(self._cdf[s, a], self._rng.random(), side="right"))
            s2 = min(s2, self.n_states - 1)
        self._state = s2
        self._t += 1
        self._done = bool(self.terminal[s2]) or self._t >= self.spec.horizon
        return self.O[s2].copy(), reward, self._done

    def describe(self) -> dict:
        return {"env": self.env_id, **self.params}


class FruitTree(TabularMOEnv):
    """Full binary tree; leaves pay a six-nutrient vector, interior nodes pay zero.

    Node ``(row, index)`` has heap id ``2**row - 1 + index``. Action 0 goes to
    the left child, action 1 to the right child.
    """

    env_id = "fruit_tree"

    def __init__(self, depth: int = 6, seed: int = 42, gamma: float = 0.995):
        if not (isinstance(depth, (int, np.integer)) and 1 <= depth <= 8):
            raise ConfigError(f"fruit_tree depth must be an integer in [1, 8], got {depth!r}")
        depth = int(depth)
        n = 6
        nS = 2 ** (depth + 1) - 1
        first_leaf = 2 ** depth - 1
        rng = np.random.default_rng(seed)
        self.leaf_rewards = rng.uniform(0.0, 1.0, size=(2 ** depth, n))
        P = np.zeros((nS, 2, nS))
        R = np.zeros((nS, 2, n))
        O = np.zeros((nS, 2))
        for row in range(depth + 1):
            for idx in range(2 ** row):
                s = 2 ** row - 1 + idx
                O[s] = (row, idx)
                if row == depth:
                    P[s, :, s] = 1.0
                    continue
                for a in (0, 1):
                    child = 2 ** (row + 1) - 1 + 2 * idx + a
                    P[s, a, child] = 1.0
                    if row + 1 == depth:
                        R[s, a] = self.leaf_rewards[child - first_leaf]
        terminal = np.zeros(nS, dtype=bool)
        terminal[first_leaf:] = True
        super().__init__(P, R, O, 0, terminal, depth, gamma,
                         {"depth": depth, "seed": int(seed), "gamma": gamma})
        self.depth = depth


def fruit_tree_new(depth: int = 6, seed: int = 42, gamma: float = 0.995) -> FruitTree:
    return FruitTree(depth, seed, gamma)


class GridTradeoff(TabularMOEnv):
    """Deterministic two-goal gridworld.

    Cells are ``(row, col)`` with row 0 at the top; the agent starts at (0, 0).
    Goal 1 is the top-right cell ``(0, size-1)``, goal 2 the bottom-right cell
    ``(size-1, size-1)``; reaching either ends the episode. Actions are
    up, down, left, right; moves into a wall leave the agent in place.

    Reward for objective ``i`` is the decrease in Chebyshev distance to goal
    ``i`` (so +1, 0 or -1 per step). A step that brings the agent closer to
    neither goal additionally costs 0.1 on both objectives.
    """

    env_id = "grid_tradeoff"
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, size: int = 4, gamma: float = 0.995):
        if not (isinstance(size, (int, np.integer)) and 2 <= size <= 8):
            raise ConfigError(f"grid_tradeoff size must be an integer in [2, 8], got {size!r}")
        size = int(size)
        goals = ((0, size - 1), (size - 1, size - 1))
        nS = size * size

        def cheb(c, g):
            return max(abs(c[0] - g[0]), abs(c[1] - g[1]))

        P = np.zeros((nS, 4, nS))
        R = np.zeros((nS, 4, 2))
        O = np.zeros((nS, 2))
        terminal = np.zeros(nS, dtype=bool)
        for r in range(size):
            for c in range(size):
                s = r * size + c
                O[s] = (r, c)
                terminal[s] = (r, c) in goals
                for a, (dr, dc) in enumerate(self.MOVES):
                    nr = min(max(r + dr, 0), size - 1)
                    nc = min(max(c + dc, 0), size - 1)
                    P[s, a, nr * size + nc] = 1.0
                    progress = np.array([cheb((r, c), g) - cheb((nr, nc), g) for g in goals], float)
                    if np.all(progress <= 0):
                        progress -= 0.1
                    R[s, a] = progress
        super().__init__(P, R, O, 0, terminal, 2 * size, gamma, {"size": size, "gamma": gamma})
        self.size = size
        self.goals = goals


def grid_tradeoff_new(size: int = 4, gamma: float = 0.995) -> GridTradeoff:
    return GridTradeoff(size, gamma)


class RandomMOMDP(TabularMOEnv):
    """Seeded random MOMDP; observations are one-hot state codes, start state 0."""

    env_id = "random_momdp"

    def __init__(self, nS: int = 5, nA: int = 2, n: int = 2, seed: int = 0,
                 horizon: int = 10, gamma: float = 0.995, identical_objectives: bool = False):
        if not (1 <= nS <= 20 and 1 <= nA <= 5 and 2 <= n <= 4):
            raise ConfigError(f"random_momdp bounds violated: nS={nS}, nA={nA}, n={n}")
        if horizon < 1:
            raise ConfigError("horizon must be positive")
        rng = np.random.default_rng(seed)
        P = rng.gamma(1.0, size=(nS, nA, nS))
        P /= P.sum(axis=2, keepdims=True)
        if identical_objectives:
            R = np.repeat(rng.uniform(size=(nS, nA, 1)), n, axis=2)
        else:
            R = rng.uniform(size=(nS, nA, n))
        super().__init__(P, R, np.eye(nS), 0, np.zeros(nS, dtype=bool), horizon, gamma,
                         {"nS": nS, "nA": nA, "n": n, "seed": int(seed), "horizon": horizon,
                          "gamma": gamma, "identical_objectives": identical_objectives})


def random_momdp_new(nS: int, nA: int, n: int, seed: int, **kw) -> RandomMOMDP:
    return RandomMOMDP(nS, nA, n, seed, **kw)


ENV_REGISTRY = {
    "fruit_tree": FruitTree,
    "grid_tradeoff": GridTradeoff,
    "random_momdp": RandomMOMDP,
}


def make_env(env_id: str, **params) -> TabularMOEnv:
    """Build an environment from its string id and keyword parameters."""
    try:
        cls = ENV_REGISTRY[env_id]
    except KeyError:
        raise ConfigError(f"unknown env id {env_id!r}; choose from {sorted(ENV_REGISTRY)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {env_id}: {exc}") from None


def rollout(env: TabularMOEnv, policy, episodes: int, seed: int):
    """Run ``episodes`` episodes with ``policy.sample(obs, state, rng)``.

    Returns the traces and the mean discounted return vector.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    gamma = env.spec.gamma
    traces = []
    for ep_seed in seeds:
        ep_seed = int(ep_seed)
        rng = np.random.default_rng(ep_seed)
        obs = env.reset(ep_seed)
        observations, states, actions, rewards, logps, terms = [obs], [env.state], [], [], [], []
        done = False
        while not done:
            a, lp = policy.sample(obs, env.state, rng)
            obs, r, done = env.step(a)
            observations.append(obs)
            states.append(env.state)
            actions.append(a)
            rewards.append(r)
            logps.append(lp)
            terms.append(done)
        traces.append(EpisodeTrace(np.array(observations), np.array(states), np.array(actions),
                                   np.array(rewards), np.array(logps), np.array(terms), ep_seed))
    returns = np.stack([t.discounted_return(gamma) for t in traces])
    # centred mean: identical episodes reproduce their return bit for bit
    mean = returns[0] + np.mean(returns - returns[0], axis=0)
    return traces, mean
