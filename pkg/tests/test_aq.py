import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cimforge.aq import (
    DDPGAgent,
    QuantEnv,
    SyntheticOracle,
    ToyQatOracle,
    accuracy_target,
    action_to_bits,
    enumerate_optimum,
    reward,
    run_episode,
    search,
    synthetic_layers,
    toy_layers,
)
from cimforge.aq.ddpg import BufferError, ReplayBuffer, truncated_normal
from cimforge.aq.env import observations
from cimforge.config import ConstraintMode, QuantConfig
from cimforge.cost import total_latency
from cimforge.target import CimTarget

T = CimTarget()
MODES = list(ConstraintMode)


# ---------------------------------------------------------------- reward

def test_accuracy_target_examples():
    assert accuracy_target(90, 5) == 85
    assert accuracy_target(90, 0) == 90
    assert accuracy_target(71.2, 5) == pytest.approx(66.2)
    with pytest.raises(ValueError):
        accuracy_target(4, 5)


def test_reward_examples():
    assert reward(65, 70, 100, 100) == -50
    assert reward(70, 70, 100, 100) == 0
    assert reward(72, 70, 200, 100) == pytest.approx(100.2)
    with pytest.raises(ValueError):
        reward(70, 70, 1, 0)


@given(st.floats(0, 100), st.integers(1, 10 ** 6))
def test_reward_continuous_at_boundary(acc, t):
    assert reward(acc, acc, t, t) == 0
    assert reward(acc - 1e-9, acc, t, t) == pytest.approx(0, abs=1e-6)


# ---------------------------------------------------------------- action projection

def test_action_to_bits_examples():
    assert action_to_bits(0.0, 1, 5, "weight", "none", T) == 2
    assert action_to_bits(1.0, 1, 5, "weight", "none", T) == 8
    assert action_to_bits(0.5, 1, 5, "weight", "none", T) == 5
    assert action_to_bits(0.5, 1, 5, "weight", "weight", T) == 4
    assert action_to_bits(0.5, 1, 5, "activation", "weight", T) == 5
    assert action_to_bits(5 / 6, 1, 5, "weight", "weight", T) == 8  # proposed 7
    assert action_to_bits(0.0, 0, 5, "activation", "io", T) == 8
    assert action_to_bits(0.0, 4, 5, "weight", "both", T) == 8
    assert action_to_bits(0.0, 2, 5, "weight", "both", T) == 4


def test_action_to_bits_rejects_out_of_range():
    with pytest.raises(ValueError):
        action_to_bits(1.5, 0, 2, "weight", "none", T)


@given(st.floats(0, 1), st.integers(0, 4), st.sampled_from(MODES), st.sampled_from(["weight", "activation"]),
       st.integers(1, 4))
def test_projection_satisfies_constraints(a, layer, mode, role, r_cell):
    target = CimTarget(r_cell=r_cell)
    b = action_to_bits(a, layer, 5, role, mode, target)
    assert target.b_min <= b <= target.b_max or b == 8
    if mode.pins_io and layer in (0, 4):
        assert b == 8
    elif mode.weight_multiple and role == "weight":
        assert b % r_cell == 0


def test_observations_normalized():
    obs = observations(synthetic_layers())
    assert obs.shape == (5, 9)
    assert obs.min() >= 0 and obs.max() <= 1
    assert np.array_equal(obs[:, 1:4].sum(axis=1), np.ones(5))


# ---------------------------------------------------------------- synthetic oracle

def test_synthetic_oracle_examples():
    ids = ["a"]
    o = SyntheticOracle(ids, c_w=[0.1], c_a=[0.0])
    assert o(QuantConfig({"a": (8, 8)})) == 90.0
    assert o(QuantConfig({"a": (4, 8)})) == pytest.approx(90.0 - 0.8)
    o5 = SyntheticOracle([l.id for l in synthetic_layers()], seed=7)
    assert o5(QuantConfig.uniform(o5.layer_ids)) == o5.acc_8b
    assert np.all((o5.c_w >= 0.02) & (o5.c_w <= 0.2))


def test_brute_force_matches_enumeration_two_layers():
    layers = synthetic_layers(2)
    oracle = SyntheticOracle([l.id for l in layers], seed=3)
    env = QuantEnv(layers, oracle, T)
    best = -np.inf
    for w1, a1, w2, a2 in itertools.product(range(2, 9), repeat=4):
        cfg = QuantConfig({layers[0].id: (w1, a1), layers[1].id: (w2, a2)})
        best = max(best, env.evaluate(cfg)[0])
    opt = enumerate_optimum(layers, oracle, T)
    assert opt.n_evaluated == 7 ** 4
    assert opt.reward == pytest.approx(best, rel=1e-12)
    assert env.evaluate(opt.config)[0] == pytest.approx(best, rel=1e-12)


# ---------------------------------------------------------------- episodes and the environment

def _env(n=3, mode="none", seed=0):
    layers = synthetic_layers(n)
    return QuantEnv(layers, SyntheticOracle([l.id for l in layers], seed=seed), T, mode)


def test_symmetric_actor_gives_identical_actions():
    env = _env()
    agent = DDPGAgent(seed=1, actor_final_scale=0.0)
    ep = run_episode(agent, env, explore="none")
    assert np.all(ep.actions == ep.actions[0])
    assert len(set(ep.config.bits.values())) == 1
    # the default small final layer still maps every layer to the same bits
    ep = run_episode(DDPGAgent(seed=1), env, explore="none")
    assert len(set(ep.config.bits.values())) == 1


def test_episode_reward_matches_closed_form():
    env = _env()
    agent = DDPGAgent(seed=2)
    for _ in range(5):
        ep = run_episode(agent, env, explore="noise")
        acc = env.oracle.acc_8b - env.oracle.penalty(*np.array(list(ep.config.bits.values())).T)
        t_q = total_latency(env.layers, ep.config, T)
        assert ep.t_q == t_q
        assert ep.reward == pytest.approx(reward(acc, env.acc_t, env.t_8b, t_q), rel=1e-12)


def test_episode_stores_terminal_reward_in_every_tuple():
    env = _env(4)
    agent = DDPGAgent(seed=3)
    ep = run_episode(agent, env)
    assert len(agent.buffer) == 4
    assert np.all(agent.buffer.rew[:4] == ep.reward)
    assert list(agent.buffer.done[:4]) == [0, 0, 0, 1]


@pytest.mark.parametrize("mode", MODES)
def test_constraint_soundness_during_search(mode):
    env_layers = synthetic_layers(5)
    oracle = SyntheticOracle([l.id for l in env_layers], seed=1)
    res = search(env_layers, oracle, T, mode, episodes=40, seed=0, warmup=10)
    for cfg in res.configs:
        assert cfg.violations(T.b_min, T.b_max, T.r_cell) == []


def test_search_deterministic_and_running_max():
    layers = synthetic_layers(3)
    oracle = SyntheticOracle([l.id for l in layers], seed=2)
    a = search(layers, oracle, T, episodes=40, seed=5, warmup=10)
    b = search(layers, oracle, T, episodes=40, seed=5, warmup=10)
    assert a.rewards == b.rewards
    assert a.best_config == b.best_config
    running = np.maximum.accumulate(a.rewards)
    assert np.all(np.diff(running) >= 0)
    assert a.best_reward == running[-1]
    rep = a.report()
    assert rep["history"]["reward"] == a.rewards and "sal_score" in rep


# ---------------------------------------------------------------- DDPG internals

def _fill(agent, n=80, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        agent.buffer.add(rng.random(9), rng.random(2), float(rng.normal()), rng.random(9), i % 5 == 4)


def test_critic_gradient_matches_finite_differences():
    agent = DDPGAgent(seed=4)
    _fill(agent)
    batch = agent.buffer.sample(np.random.default_rng(1), 16)
    loss, grads = agent.critic_loss_and_grads(*batch)
    assert np.isfinite(loss) and loss >= 0
    rng = np.random.default_rng(2)
    eps = 1e-6
    for p, g in zip(agent.critic.params, grads):
        for idx in map(tuple, rng.integers(0, p.shape, size=(4, p.ndim))):
            old = p[idx]
            p[idx] = old + eps
            up, _ = agent.critic_loss_and_grads(*batch)
            p[idx] = old - eps
            down, _ = agent.critic_loss_and_grads(*batch)
            p[idx] = old
            fd = (up - down) / (2 * eps)
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-3)


def test_actor_gradient_zero_for_constant_critic():
    agent = DDPGAgent(seed=5, preact_l2=0.0)
    for p in agent.critic.params[:-1]:
        p[...] = 0.0
    agent.critic.params[-1][...] = 3.0
    obs = np.random.default_rng(0).random((8, 9))
    loss, grads = agent.actor_grads(obs)
    assert loss == pytest.approx(-3.0)
    assert all(np.all(g == 0) for g in grads)


def test_train_step_losses_finite_and_targets_move():
    agent = DDPGAgent(seed=6)
    _fill(agent)
    before = [p.copy() for p in agent.critic_target.params]
    losses = agent.train_step(32)
    assert np.isfinite(losses.critic) and losses.critic >= 0 and np.isfinite(losses.actor)
    moved = [np.abs(a - b).max() for a, b in zip(agent.critic_target.params, before)]
    assert max(moved) > 0
    for t, o, b in zip(agent.critic_target.params, agent.critic.params, before):
        # target = (1 - tau) * old target + tau * new online
        assert np.allclose(t, 0.99 * b + 0.01 * o)


def test_buffer_errors_and_capacity():
    buf = ReplayBuffer(4)
    with pytest.raises(BufferError):
        buf.sample(np.random.default_rng(0), 1)
    with pytest.raises(ValueError):
        buf.add(np.zeros(9), np.zeros(2), float("nan"), np.zeros(9), False)
    for i in range(6):
        buf.add(np.zeros(9), np.zeros(2), float(i), np.zeros(9), False)
    assert len(buf) == 4
    assert sorted(buf.rew[:4].tolist()) == [2.0, 3.0, 4.0, 5.0]
    with pytest.raises(BufferError):
        buf.sample(np.random.default_rng(0), 5)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=2), st.floats(0.01, 2.0), st.integers(0, 1000))
@settings(max_examples=50)
def test_truncated_normal_in_range(mean, sigma, seed):
    out = truncated_normal(np.random.default_rng(seed), np.array(mean), sigma)
    assert np.all((out >= 0) & (out <= 1))


def test_noise_decay():
    agent = DDPGAgent(seed=0)
    for _ in range(10):
        agent.end_episode()
    assert agent.sigma == pytest.approx(0.5 * 0.99 ** 10)


# ---------------------------------------------------------------- toy QAT oracle

@pytest.fixture(scope="module")
def qat():
    return ToyQatOracle(seed=0)


def test_toy_layers_match_mlp():
    ids = [l.id for l in toy_layers()]
    assert ids == ["fc1", "fc2", "fc3"]
    assert [(l.n_l, l.m_l) for l in toy_layers()] == [(16, 32), (32, 32), (32, 8)]


def test_qat_8bit_near_float(qat):
    cfg = QuantConfig.uniform(["fc1", "fc2", "fc3"])
    acc = qat(cfg)
    assert abs(acc - qat.float_accuracy) <= 2.0
    assert acc == qat(cfg)


def test_qat_low_bits_not_better_majority():
    lower = 0
    for seed in range(3):
        o = ToyQatOracle(seed=seed)
        lo = o(QuantConfig.uniform(["fc1", "fc2", "fc3"], 2, 2))
        hi = o(QuantConfig.uniform(["fc1", "fc2", "fc3"], 8, 8))
        lower += lo <= hi
    assert lower >= 2


def test_qat_rejects_missing_layers(qat):
    with pytest.raises(Exception):
        qat(QuantConfig({"fc1": (8, 8)}))
