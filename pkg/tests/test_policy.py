import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmorl.envs import EpisodeTrace, fruit_tree_new, grid_tradeoff_new, random_momdp_new
from cmorl.oracle import exact_policy_gradient, extract_model, scalarized_return
from cmorl.policy import (Adam, MLPPolicy, PPOConfig, TabularPolicy, TabularValue, TrainState, act,
                          collect_batch, evaluate_policy, evaluate_with_stderr, fisher_vector_product,
                          fit_value, gae_advantages, load_checkpoint, make_policy, mean_kl,
                          policy_loss_gradient, save_checkpoint, scalarized_pg_step,
                          surrogate_gradient)


def trace(rewards, terminal=True):
    R = np.asarray(rewards, dtype=float)
    T = len(R)
    terms = np.zeros(T, bool)
    terms[-1] = terminal
    return EpisodeTrace(np.zeros((T + 1, 1)), np.arange(T + 1), np.zeros(T, int), R,
                        np.zeros(T), terms, 0)


# -- sampling --------------------------------------------------------------


def test_uniform_and_saturated_probabilities():
    p = TabularPolicy(1, 2)
    assert np.array_equal(p.probs([0]), [[0.5, 0.5]])
    p = TabularPolicy(1, 2, [10.0, -10.0])
    assert p.probs([0])[0, 0] >= 1 - 1e-8


def test_act_log_prob_matches_softmax():
    p = TabularPolicy(2, 3, [0.3, -1.2, 2.0, 0.0, 0.5, -0.5])
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, lp = act(p, None, 1, rng)
        assert abs(lp - math.log(p.probs([1])[0, a])) <= 1e-12


def test_evaluate_deterministic_fruit_tree():
    env = fruit_tree_new(3, seed=5)
    p = TabularPolicy(env.n_states, 2)
    p.theta.reshape(env.n_states, 2)[:, 1] = 5.0  # always right
    g = env.spec.gamma
    G = evaluate_policy(env, p, 1, seed=0, mode="greedy")
    assert np.array_equal(G, g * (g * env.leaf_rewards[-1]))


def test_evaluate_uniform_depth_one():
    env = fruit_tree_new(1, seed=2, gamma=1.0)
    G, se = evaluate_with_stderr(env, TabularPolicy(env.n_states, 2), 4000, seed=3)
    assert np.all(np.abs(G - env.leaf_rewards.mean(axis=0)) <= 4 * se)


def test_stderr_shrinks_with_more_episodes():
    env = random_momdp_new(4, 2, 2, seed=1)
    p = TabularPolicy(4, 2)
    _, se_small = evaluate_with_stderr(env, p, 200, seed=0)
    _, se_big = evaluate_with_stderr(env, p, 800, seed=0)
    assert np.all(se_big < se_small)


# -- KL --------------------------------------------------------------------


def test_mean_kl_closed_form_and_asymmetry():
    a = TabularPolicy(1, 2, [0.0, 0.0])
    b = TabularPolicy(1, 2, [math.log(3), 0.0])
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert abs(mean_kl(a, b, [0]) - expected) <= 1e-12
    assert mean_kl(a, a, [0]) == 0.0
    assert mean_kl(a, b, [0]) != mean_kl(b, a, [0])


def test_fisher_vector_product_matches_kl_hessian():
    p = MLPPolicy(2, 3, (5,), seed=1)
    X = np.random.default_rng(0).normal(size=(7, 2))
    v = np.random.default_rng(1).normal(size=p.theta.size)
    eps = 1e-4

    def kl_at(theta):
        return mean_kl(p, p.with_params(theta), X)

    # second directional derivative of KL along v
    d2 = (kl_at(p.theta + eps * v) - 2 * kl_at(p.theta) + kl_at(p.theta - eps * v)) / eps ** 2
    assert v @ fisher_vector_product(p, X, v) == pytest.approx(d2, rel=1e-4)


# -- GAE -------------------------------------------------------------------


def test_gae_lambda_zero_is_td():
    tr = trace([[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]], terminal=False)
    V = np.array([[0.5, 0.1], [0.2, 0.3], [1.0, -1.0], [0.7, 0.4]])
    adv, _ = gae_advantages(tr, V, 0.9, 0.0)
    assert np.array_equal(adv, tr.rewards + 0.9 * V[1:] - V[:3])


def test_gae_lambda_one_zero_values_is_return_to_go():
    tr = trace([[1.0], [2.0], [4.0]])
    adv, tgt = gae_advantages(tr, np.zeros((3, 1)), 0.5, 1.0)
    assert np.array_equal(adv[:, 0], [1 + 0.5 * 2 + 0.25 * 4, 2 + 0.5 * 4, 4])
    assert np.array_equal(tgt, adv)


def test_gae_hand_unrolled():
    tr = trace([[1.0], [0.0], [2.0]])
    V = np.array([[0.5], [1.0], [0.25]])
    g = lam = 0.5
    d0 = 1 + g * 1.0 - 0.5
    d1 = 0 + g * 0.25 - 1.0
    d2 = 2 + 0.0 - 0.25  # terminal: next state is worth zero
    expected = [d0 + g * lam * (d1 + g * lam * d2), d1 + g * lam * d2, d2]
    adv, _ = gae_advantages(tr, V, g, lam)
    assert adv[:, 0].tolist() == expected


def test_collect_batch_matches_per_episode_gae():
    env = grid_tradeoff_new(3)
    pol, val = make_policy("tabular", env)
    val.theta = np.random.default_rng(0).normal(size=val.theta.size)
    batch = collect_batch(env, pol, val, 64, np.random.default_rng(1), gae_lambda=0.9)
    assert len(batch) >= 64 and batch.steps[0] == 0
    starts = np.flatnonzero(batch.steps == 0).tolist() + [len(batch)]
    for k, (a, b) in enumerate(zip(starts, starts[1:])):
        X = batch.inputs[a:b]
        R = np.zeros((b - a, 2))
        # rewards are recovered from the tables; the episode ends on termination or horizon
        nxt = np.argmax(env.P[X, batch.actions[a:b]], axis=1)
        R[:] = env.R[X, batch.actions[a:b]]
        tr = EpisodeTrace(None, None, batch.actions[a:b], R, None, np.r_[np.zeros(b - a - 1, bool), True], 0)
        adv, _ = gae_advantages(tr, val.predict(X), env.spec.gamma, 0.9)
        assert np.allclose(batch.advantages[a:b], adv, rtol=1e-12, atol=1e-12)
        assert np.array_equal(nxt[:-1], X[1:])
        assert np.allclose(batch.episode_returns[k], tr.discounted_return(env.spec.gamma), atol=1e-12)


# -- PPO step ----------------------------------------------------------------


def small_setup(seed=0):
    env = random_momdp_new(4, 3, 2, seed=seed, horizon=6)
    pol, val = make_policy("tabular", env)
    cfg = PPOConfig(epochs=2, minibatches=4, lr=0.05)
    batch = collect_batch(env, pol, val, 256, np.random.default_rng(seed))
    return env, TrainState.fresh(pol, val, cfg), batch, cfg


def test_zero_advantages_leave_policy_unchanged():
    _, state, batch, cfg = small_setup()
    batch = dataclasses.replace(batch, advantages=np.zeros_like(batch.advantages))
    new, _ = scalarized_pg_step(state, batch, [0.5, 0.5], cfg, np.random.default_rng(0))
    assert np.array_equal(new.policy.theta, state.policy.theta)


def test_one_hot_ignores_other_objectives():
    _, state, batch, cfg = small_setup(1)
    noisy = batch.advantages.copy()
    noisy[:, 1] = np.random.default_rng(3).normal(size=len(batch)) * 100
    a, _ = scalarized_pg_step(state, batch, [1, 0], cfg, np.random.default_rng(7))
    b, _ = scalarized_pg_step(state, dataclasses.replace(batch, advantages=noisy), [1, 0], cfg,
                              np.random.default_rng(7))
    assert np.array_equal(a.policy.theta, b.policy.theta)


def test_step_does_not_mutate_input_state():
    _, state, batch, cfg = small_setup(2)
    before = state.policy.theta.copy()
    new, diag = scalarized_pg_step(state, batch, [0.3, 0.7], cfg, np.random.default_rng(0))
    assert np.array_equal(state.policy.theta, before)
    assert diag["kl"] >= 0 and not np.array_equal(new.policy.theta, before)


def test_invalid_weights_rejected():
    _, state, batch, cfg = small_setup()
    for w in ([-0.1, 1.1], [np.nan, 1.0], [1.0]):
        with pytest.raises(ValueError):
            scalarized_pg_step(state, batch, w, cfg, np.random.default_rng(0))


@given(st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=20, deadline=None)
def test_policy_gradient_linear_in_weights(u, v):
    _, state, batch, cfg = small_setup(3)
    g0 = policy_loss_gradient(state.policy, batch, [1, 0], cfg)
    g1 = policy_loss_gradient(state.policy, batch, [0, 1], cfg)
    g = policy_loss_gradient(state.policy, batch, [u, v], cfg)
    assert np.allclose(g, u * g0 + v * g1, rtol=1e-10, atol=1e-12)


def test_surrogate_gradient_finite_difference_mlp():
    p = MLPPolicy(3, 2, (6, 6), seed=4)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(20, 3))
    actions = rng.integers(2, size=20)
    logp_old = p.log_prob(X, actions) + rng.normal(scale=0.05, size=20)
    adv = rng.normal(size=20)
    g, _, _ = surrogate_gradient(p, X, actions, logp_old, adv, 0.2, clipped=False)

    def obj(theta):
        return surrogate_gradient(p.with_params(theta), X, actions, logp_old, adv, 0.2, False)[1]

    eps = 1e-6
    fd = np.array([(obj(p.theta + eps * e) - obj(p.theta - eps * e)) / (2 * eps)
                   for e in np.eye(p.theta.size)])
    assert np.linalg.norm(fd - g) / np.linalg.norm(fd) < 1e-6


def test_exact_gradient_two_state_finite_difference():
    env = random_momdp_new(2, 2, 2, seed=9, horizon=5)
    model = extract_model(env)
    logits = np.random.default_rng(0).normal(size=(2, 2))
    w = np.array([0.3, 0.7])
    g = exact_policy_gradient(model, logits, w)
    eps = 1e-6
    fd = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        d = np.zeros_like(logits)
        d[idx] = eps
        fd[idx] = (scalarized_return(model, logits + d, w) - scalarized_return(model, logits - d, w)) / (2 * eps)
    assert np.linalg.norm(fd - g) / np.linalg.norm(fd) < 1e-4


def test_value_head_converges_to_mean_targets():
    val = TabularValue(3, 2)
    pol = TabularPolicy(3, 2)
    state = TrainState(pol, val, Adam(0.1), Adam(0.1))
    rng = np.random.default_rng(0)
    X = rng.integers(3, size=300)
    targets = np.stack([X * 1.0, -X * 2.0], axis=1) + rng.normal(scale=0.1, size=(300, 2))
    batch = type("B", (), {"inputs": X, "targets": targets})()
    cfg = PPOConfig(max_grad_norm=None, value_coef=1.0)
    for _ in range(800):
        fit_value(state, batch, np.arange(300), cfg)
    for s in range(3):
        assert np.allclose(val.predict([s])[0], targets[X == s].mean(axis=0), atol=1e-3)


# -- checkpoints -------------------------------------------------------------


@pytest.mark.parametrize("kind", ["tabular", "mlp"])
def test_checkpoint_roundtrip(tmp_path, kind):
    env = grid_tradeoff_new(3)
    pol, val = make_policy(kind, env, seed=3, hidden=(8,))
    pol.theta = pol.theta + np.random.default_rng(0).normal(size=pol.theta.size)
    if kind == "mlp":
        pol.norm.update(env.O)
    path = tmp_path / "p.json"
    save_checkpoint(path, pol, val, preference=[0.25, 0.75])
    pol2, val2, pref = load_checkpoint(path)
    X = pol.inputs(env, np.arange(env.n_states))
    assert np.array_equal(pol.logits(X), pol2.logits(X))
    assert np.array_equal(val.predict(X), val2.predict(X))
    assert pref.tolist() == [0.25, 0.75]


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
