"""Desk-scale DQN: uniform replay, hard target sync, epsilon-greedy."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gridworld import FrameStack
from .policy import build_policy


@dataclass
class TrainConfig:
    steps: int
    replay_capacity: int = 10000
    batch_size: int = 32
    target_sync: int = 1000
    train_interval: int = 4
    warmup: int = 500
    epsilon_start: float = 1.0
    epsilon_final: float = 0.1
    epsilon_decay_steps: int = 0  # 0 -> steps // 2
    gamma: float = 0.9
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0,1), got {self.gamma}")
        for field in ("replay_capacity", "batch_size", "target_sync", "train_interval"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epsilon_decay_steps == 0:
            self.epsilon_decay_steps = max(1, self.steps // 2)

    def epsilon_at(self, step):
        frac = min(1.0, step / self.epsilon_decay_steps)
        return self.epsilon_start + frac * (self.epsilon_final - self.epsilon_start)


class ReplayBuffer:
    """Uniform ring buffer holding uint8 frame stacks."""

    def __init__(self, capacity, state_shape):
        self.capacity = capacity
        self.states = np.zeros((capacity,) + state_shape, dtype=np.uint8)
        self.next_states = np.zeros_like(self.states)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._head = 0

    def add(self, state, action, reward, next_state, done):
        i = self._head
        self.states[i] = state
        self.next_states[i] = next_state
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = done
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(self.size, size=batch_size)
        return (
            self.states[idx].astype(np.float32),
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx].astype(np.float32),
            self.dones[idx],
        )


def train_dqn(env, config):
    """Train a greedy Q-policy on ``env``; reproducible given the seed."""
    rng = np.random.default_rng(config.seed)
    policy = build_policy(env.action_count, seed=config.seed, in_hw=env.frame_shape[0])
    target = build_policy(env.action_count, seed=config.seed, in_hw=env.frame_shape[0])
    target.load_state_dict(policy.state_dict())
    adam = T.Adam(policy.parameters(), lr=config.learning_rate)
    buffer = ReplayBuffer(config.replay_capacity, policy.input_shape)

    stacker = FrameStack()
    obs = env.reset(seed=int(rng.integers(2**31)))
    stacker.reset()
    state = stacker.push(obs)

    for step in range(config.steps):
        if rng.random() < config.epsilon_at(step):
            action = int(rng.integers(env.action_count))
        else:
            action = policy.act(state)
        obs, reward, done = env.step(action)
        next_state = stacker.push(obs)
        buffer.add(state, action, reward, next_state, done)
        state = next_state
        if done:
            obs = env.reset(seed=int(rng.integers(2**31)))
            stacker.reset()
            state = stacker.push(obs)

        if step >= config.warmup and step % config.train_interval == 0:
            _train_step(policy, target, adam, buffer, config, rng, step)
        if step % config.target_sync == 0:
            target.load_state_dict(policy.state_dict())
    return policy


def _train_step(policy, target, adam, buffer, config, rng, step):
    states, actions, rewards, next_states, dones = buffer.sample(
        config.batch_size, rng
    )
    with T.no_grad():
        # Double-DQN target: online network picks, target network values.
        pick = policy.logits_array(next_states).argmax(axis=1)
        tq = target.logits_array(next_states)
        next_q = tq[np.arange(len(pick)), pick]
    y = rewards + config.gamma * next_q * (~dones)

    q = policy.logits(states)
    qa = T.take_per_row(q, actions)
    diff = T.sub(qa, T.Tensor(y))
    # Huber-style loss: clip(d)*d is d^2 inside [-1,1] with a linear
    # tail outside, so TD-error gradients stay bounded.
    loss = T.mean(T.mul(T.clip_range(diff, -1.0, 1.0), diff))
    if not np.isfinite(loss.item()):
        raise RuntimeError(
            f"DQN diverged at step {step}: loss={loss.item()} "
            f"(lr={config.learning_rate}, batch={config.batch_size})"
        )
    policy.zero_grad()
    loss.backward()
    adam.step()
