"""Layer-wise quantization environment, reward, and the DDPG search loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from cimforge.aq.ddpg import DDPGAgent
from cimforge.aq.oracles import AccuracyOracle
from cimforge.config import ConstraintMode, QuantConfig
from cimforge.cost import LatencyLut, LayerDesc, speedup_and_score
from cimforge.target import CimTarget

ALPHA = 10.0
BETA = 100.0
GAMMA = 0.1
ACC_LOSS = 5.0
KINDS = ("Conv2D", "Dense", "MatMul")


def accuracy_target(acc_8b: float, acc_loss: float = ACC_LOSS) -> float:
    if not 0 <= acc_loss <= acc_8b:
        raise ValueError(f"acc_loss must lie in [0, acc_8b], got {acc_loss}")
    return acc_8b - acc_loss


def reward(acc_q: float, acc_t: float, t_8b, t_q, alpha: float = ALPHA, beta: float = BETA,
           gamma: float = GAMMA) -> float:
    """Penalize accuracy below the target, otherwise reward speedup plus a small accuracy bonus."""
    t_8b, t_q = Fraction(t_8b), Fraction(t_q)
    if t_q <= 0:
        raise ValueError("T_q must be positive")
    if acc_q < acc_t:
        return -alpha * (acc_t - acc_q)
    return beta * float(t_8b / t_q - 1) + gamma * (acc_q - acc_t)


def _project_weight(b: int, r_cell: int, b_max: int) -> int:
    q, rem = divmod(b, r_cell)
    nearest = (q + 1) * r_cell if 2 * rem >= r_cell else q * r_cell
    top = b_max - b_max % r_cell
    return min(max(nearest, r_cell), max(top, r_cell))


def action_to_bits(a: float, layer: int, n_layers: int, role: str, mode, target: CimTarget) -> int:
    """Continuous action in [0, 1] to a bit width, then the constraint projection."""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"action must lie in [0, 1], got {a}")
    if role not in ("weight", "activation"):
        raise ValueError(f"role must be 'weight' or 'activation', got {role!r}")
    mode = ConstraintMode.parse(mode)
    b = int(np.floor(target.b_min + a * (target.b_max - target.b_min) + 0.5))
    if mode.pins_io and layer in (0, n_layers - 1):
        return 8
    if mode.weight_multiple and role == "weight":
        b = _project_weight(b, target.r_cell, target.b_max)
    return b


def observations(layers: Sequence[LayerDesc]) -> np.ndarray:
    """Static part of the 9-feature observation for every layer, min-max normalized per column.

    Columns: k/K, one-hot kind (3), log M, log N, log V, previous w action, previous a action.
    The last two are filled in while stepping.
    """
    k = len(layers)
    obs = np.zeros((k, 9))
    for i, l in enumerate(layers):
        obs[i, 0] = i / k
        obs[i, 1 + KINDS.index(l.kind)] = 1.0
        obs[i, 4:7] = np.log([l.m_l, l.n_l, l.v_l])
    lo, hi = obs[:, :7].min(axis=0), obs[:, :7].max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    obs[:, :7] = np.where(hi > lo, (obs[:, :7] - lo) / span, obs[:, :7].clip(0, 1))
    return obs


@dataclass
class Episode:
    config: QuantConfig
    reward: float
    acc_q: float
    t_q: Fraction
    actions: np.ndarray


@dataclass
class QuantEnv:
    layers: list[LayerDesc]
    oracle: AccuracyOracle
    target: CimTarget
    constraint_mode: ConstraintMode = ConstraintMode.NONE
    acc_loss: float = ACC_LOSS

    def __post_init__(self) -> None:
        self.constraint_mode = ConstraintMode.parse(self.constraint_mode)
        self.lut = LatencyLut(self.layers, self.target)
        self.t_8b = self.lut.latency(QuantConfig.uniform([l.id for l in self.layers]))
        self.acc_8b = float(self.oracle.acc_8b)
        self.acc_t = accuracy_target(self.acc_8b, self.acc_loss)
        self.static_obs = observations(self.layers)

    def config_from_actions(self, actions: np.ndarray) -> QuantConfig:
        k = len(self.layers)
        bits = {}
        for i, l in enumerate(self.layers):
            w = action_to_bits(float(actions[i, 0]), i, k, "weight", self.constraint_mode, self.target)
            a = action_to_bits(float(actions[i, 1]), i, k, "activation", self.constraint_mode, self.target)
            bits[l.id] = (w, a)
        return QuantConfig(bits, self.constraint_mode)

    def evaluate(self, config: QuantConfig) -> tuple[float, float, Fraction]:
        acc_q = float(self.oracle(config))
        t_q = self.lut.latency(config)
        return reward(acc_q, self.acc_t, self.t_8b, t_q), acc_q, t_q


def run_episode(agent: DDPGAgent, env: QuantEnv, explore: str = "noise",
                reward_offset: float = 0.0, reward_scale: float = 1.0,
                reward_floor: float = -np.inf) -> Episode:
    """Step through the layers, evaluate the resulting config once, store the tuples.

    ``explore`` is ``"noise"`` (truncated Gaussian around the policy), ``"random"``
    (uniform warm-up actions) or ``"none"``. Every tuple receives the single episode
    reward, shifted by ``reward_offset`` and divided by ``reward_scale``.
    """
    k = len(env.layers)
    obs = env.static_obs.copy()
    actions = np.zeros((k, 2))
    for i in range(k):
        if i > 0:
            obs[i, 7:9] = actions[i - 1]
        if explore == "random":
            actions[i] = agent.random_action()
        else:
            actions[i] = agent.act(obs[i], noise=(explore == "noise"))
    config = env.config_from_actions(actions)
    r, acc_q, t_q = env.evaluate(config)
    stored = max((r - reward_offset) / reward_scale, reward_floor)
    for i in range(k):
        nxt = obs[i + 1] if i + 1 < k else obs[i]
        agent.buffer.add(obs[i], actions[i], stored, nxt, i == k - 1)
    return Episode(config, r, acc_q, t_q, actions)


@dataclass
class SearchResult:
    best_config: QuantConfig
    best_reward: float
    rewards: list[float]
    acc_q: list[float]
    t_q: list[Fraction]
    configs: list[QuantConfig]
    acc_8b: float
    t_8b: Fraction
    best_acc_q: float = 0.0
    best_t_q: Fraction = Fraction(0)
    extra: dict = field(default_factory=dict)

    def report(self) -> dict:
        speedup, score = speedup_and_score(self.t_8b, self.best_t_q, self.acc_8b, self.best_acc_q)
        return {
            "best_config": self.best_config.to_dict(),
            "best_reward": self.best_reward,
            "acc_8b": self.acc_8b,
            "acc_q": self.best_acc_q,
            "accuracy_loss": self.acc_8b - self.best_acc_q,
            "t_8b_us": float(self.t_8b),
            "t_q_us": float(self.best_t_q),
            "speedup": speedup,
            "sal_score": score,
            "history": {
                "reward": self.rewards,
                "acc_q": self.acc_q,
                "t_q_us": [float(t) for t in self.t_q],
            },
        }


def search(layers: Sequence[LayerDesc], oracle: AccuracyOracle, target: CimTarget,
           constraint_mode=ConstraintMode.NONE, episodes: int = 600, seed: int = 0,
           warmup: int = 20, batch_size: int = 64, updates_per_step: int = 10,
           acc_loss: float = ACC_LOSS, reward_scale: float = BETA, reward_floor: float = 0.0,
           **agent_kw) -> SearchResult:
    """DDPG search over per-layer (w_bit, a_bit); returns the highest-reward config seen.

    Rewards stored in the replay buffer are divided by ``reward_scale`` (default beta,
    so a stored value of 1 means one unit of speedup) to keep critic targets O(1), and
    floored at ``reward_floor``: below the accuracy target every config looks equally bad
    to the critic, which keeps it from spending capacity on the infeasible region.
    The history and the best config always use the unmodified reward.
    """
    env = QuantEnv(list(layers), oracle, target, constraint_mode, acc_loss)
    agent = DDPGAgent(seed=seed, **agent_kw)
    res = SearchResult(QuantConfig(), -np.inf, [], [], [], [], env.acc_8b, env.t_8b)
    for ep in range(episodes):
        explore = "random" if ep < warmup else "noise"
        ep_res = run_episode(agent, env, explore, reward_scale=reward_scale, reward_floor=reward_floor)
        res.rewards.append(ep_res.reward)
        res.acc_q.append(ep_res.acc_q)
        res.t_q.append(ep_res.t_q)
        res.configs.append(ep_res.config)
        if ep_res.reward > res.best_reward:
            res.best_reward, res.best_config = ep_res.reward, ep_res.config
            res.best_acc_q, res.best_t_q = ep_res.acc_q, ep_res.t_q
        if ep >= warmup:
            for _ in range(len(env.layers) * updates_per_step):
                if len(agent.buffer) >= batch_size:
                    agent.train_step(batch_size)
            agent.end_episode()
    return res
