"""Small DDPG agent in plain numpy: MLPs with hand-written backprop, Adam, replay buffer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OBS_DIM = 9
ACT_DIM = 2
HIDDEN = (64, 64)


class BufferError(RuntimeError):
    pass


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MLP:
    """Fully connected net, ReLU hidden layers, optional sigmoid output."""

    def __init__(self, sizes: tuple[int, ...], rng: np.random.Generator, sigmoid_out: bool = False,
                 final_scale: float = 3e-3):
        self.sizes = sizes
        self.sigmoid_out = sigmoid_out
        self.params: list[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            bound = final_scale if last else 1.0 / np.sqrt(n_in)
            self.params.append(rng.uniform(-bound, bound, (n_in, n_out)))
            self.params.append(np.zeros(n_out) if last else rng.uniform(-bound, bound, n_out))

    def copy(self) -> "MLP":
        new = object.__new__(MLP)
        new.sizes, new.sigmoid_out = self.sizes, self.sigmoid_out
        new.params = [p.copy() for p in self.params]
        return new

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        n = len(self.params) // 2
        for i in range(n):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            h = np.maximum(z, 0.0) if i < n - 1 else (_sigmoid(z) if self.sigmoid_out else z)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def preactivation(self, acts: list[np.ndarray]) -> np.ndarray:
        return acts[-2] @ self.params[-2] + self.params[-1]

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray,
                 grad_pre: np.ndarray | None = None) -> tuple[list[np.ndarray], np.ndarray]:
        """Parameter gradients and input gradient for upstream gradient ``grad_out``.

        ``grad_pre`` is an extra gradient w.r.t. the output pre-activation.
        """
        n = len(self.params) // 2
        g = grad_out * acts[-1] * (1.0 - acts[-1]) if self.sigmoid_out else grad_out
        if grad_pre is not None:
            g = g + grad_pre
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for i in reversed(range(n)):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                g = g * (acts[i] > 0)
        return grads, g

    def soft_update(self, source: "MLP", tau: float) -> None:
        for p, s in zip(self.params, source.params):
            p *= 1.0 - tau
            p += tau * s


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ReplayBuffer:
    """Ring buffer of (o, a, R, o', done) tuples."""

    def __init__(self, capacity: int = 2048, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, act, reward: float, next_obs, done: bool) -> None:
        if not np.isfinite(reward):
            raise ValueError("replay reward must be finite")
        i = self._pos
        self.obs[i], self.act[i], self.rew[i] = obs, act, reward
        self.next_obs[i], self.done[i] = next_obs, float(done)
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int):
        if self.size < batch_size:
            raise BufferError(f"replay buffer holds {self.size} tuples, need {batch_size}")
        idx = rng.choice(self.size, batch_size, replace=False)
        return self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx]


@dataclass
class Losses:
    critic: float
    actor: float


@dataclass
class DDPGAgent:
    """Actor 9-64-64-2 (sigmoid), critic 11-64-64-1, target copies, replay buffer."""

    seed: int = 0
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    tau: float = 0.01
    gamma_disc: float = 1.0
    capacity: int = 2048
    sigma0: float = 0.5
    sigma_decay: float = 0.99
    actor_final_scale: float = 3e-3
    preact_l2: float = 1e-2
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.seed)
        self.actor = MLP((OBS_DIM, *HIDDEN, ACT_DIM), self.rng, sigmoid_out=True,
                         final_scale=self.actor_final_scale)
        self.critic = MLP((OBS_DIM + ACT_DIM, *HIDDEN, 1), self.rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, self.lr_actor)
        self.critic_opt = Adam(self.critic.params, self.lr_critic)
        self.buffer = ReplayBuffer(self.capacity)
        self.sigma = self.sigma0
        self.episode = 0

    def act(self, obs: np.ndarray, noise: bool = True) -> np.ndarray:
        a = self.actor(obs[None, :])[0]
        if noise and self.sigma > 0:
            a = truncated_normal(self.rng, a, self.sigma)
        return a

    def random_action(self) -> np.ndarray:
        return self.rng.uniform(0.0, 1.0, ACT_DIM)

    def end_episode(self) -> None:
        self.episode += 1
        self.sigma *= self.sigma_decay

    def critic_loss_and_grads(self, obs, act, rew, next_obs, done):
        """Mean squared Bellman error and its gradient w.r.t. the critic parameters."""
        next_act = self.actor_target(next_obs)
        q_next = self.critic_target(np.hstack([next_obs, next_act]))[:, 0]
        y = rew + self.gamma_disc * (1.0 - done) * q_next
        q, acts = self.critic.forward(np.hstack([obs, act]))
        diff = q[:, 0] - y
        loss = float(np.mean(diff ** 2))
        grads, _ = self.critic.backward(acts, (2.0 / len(diff)) * diff[:, None])
        return loss, grads

    def actor_grads(self, obs):
        """Gradient of -mean Q(o, pi(o)) + preact_l2 * mean |z|^2 w.r.t. the actor parameters.

        ``z`` is the pre-sigmoid output; the penalty keeps the policy out of saturation.
        """
        a, a_acts = self.actor.forward(obs)
        q, c_acts = self.critic.forward(np.hstack([obs, a]))
        _, g_in = self.critic.backward(c_acts, -np.ones_like(q) / len(q))
        loss = float(-q.mean())
        grad_pre = None
        if self.preact_l2:
            z = self.actor.preactivation(a_acts)
            loss += self.preact_l2 * float(np.mean(np.sum(z * z, axis=1)))
            grad_pre = 2.0 * self.preact_l2 * z / len(z)
        grads, _ = self.actor.backward(a_acts, g_in[:, OBS_DIM:], grad_pre)
        return loss, grads

    def train_step(self, batch_size: int = 64) -> Losses:
        batch = self.buffer.sample(self.rng, batch_size)
        c_loss, c_grads = self.critic_loss_and_grads(*batch)
        self.critic_opt.step(c_grads)
        a_loss, a_grads = self.actor_grads(batch[0])
        self.actor_opt.step(a_grads)
        self.actor_target.soft_update(self.actor, self.tau)
        self.critic_target.soft_update(self.critic, self.tau)
        return Losses(c_loss, a_loss)


def truncated_normal(rng: np.random.Generator, mean: np.ndarray, sigma: float,
                     lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Gaussian around ``mean`` truncated to [lo, hi] by rejection."""
    mean = np.clip(np.asarray(mean, dtype=float), lo, hi)
    out = mean + sigma * rng.standard_normal(mean.shape)
    bad = (out < lo) | (out > hi)
    for _ in range(100):
        if not bad.any():
            return out
        out[bad] = mean[bad] + sigma * rng.standard_normal(int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return np.clip(out, lo, hi)
