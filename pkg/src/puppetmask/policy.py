"""Convolutional Q-network policies and policy comparison utilities."""

import numpy as np

from . import backends
from . import tensor as T
from .gridworld import FrameStack

# (out_channels, kernel, stride) for each conv layer of the standard
# policy body.
POLICY_CONV_SPECS = ((8, 5, 2), (8, 3, 2))
POLICY_HIDDEN = 64
INPUT_SCALE = 1.0 / 255.0


class ConvNet:
    """conv -> relu -> conv -> relu -> dense -> relu -> dense.

    Takes raw-pixel inputs in [0,255]; the first node scales them by
    1/255.  ``logits`` builds the differentiable graph, ``logits_array``
    runs the same kernels without recording, so both paths produce
    identical values.
    """

    def __init__(
        self,
        action_count,
        in_channels=4,
        in_hw=42,
        hidden=POLICY_HIDDEN,
        conv_specs=POLICY_CONV_SPECS,
        seed=0,
        dtype=np.float32,
        input_scale=INPUT_SCALE,
    ):
        if action_count < 1:
            raise ValueError(f"action_count must be >= 1, got {action_count}")
        self.action_count = int(action_count)
        self.in_channels = int(in_channels)
        self.in_hw = int(in_hw)
        self.hidden = int(hidden)
        self.conv_specs = tuple(tuple(int(v) for v in s) for s in conv_specs)
        self.input_scale = float(input_scale)
        self.dtype = np.dtype(dtype)
        self.params = {}
        rng = np.random.default_rng(seed)

        c, hw = self.in_channels, self.in_hw
        for i, (oc, k, stride) in enumerate(self.conv_specs):
            if hw < k:
                raise ValueError(
                    f"conv{i}: kernel {k} does not fit {hw}x{hw} feature map "
                    f"(input {self.in_hw}x{self.in_hw} too small)"
                )
            fan_in = c * k * k
            self._add(f"conv{i}_w", rng, (oc, c, k, k), fan_in)
            self._add(f"conv{i}_b", rng, (oc,), None)
            c, hw = oc, (hw - k) // stride + 1
        self._flat = c * hw * hw
        self._add("fc0_w", rng, (self._flat, self.hidden), self._flat)
        self._add("fc0_b", rng, (self.hidden,), None)
        self._add("fc1_w", rng, (self.hidden, self.action_count), self.hidden)
        self._add("fc1_b", rng, (self.action_count,), None)

    def _add(self, name, rng, shape, fan_in):
        if fan_in is None:
            data = np.zeros(shape, dtype=self.dtype)
        else:
            std = np.sqrt(2.0 / fan_in)
            data = (rng.standard_normal(shape) * std).astype(self.dtype)
        self.params[name] = T.Tensor(data, requires_grad=True, name=name)

    @property
    def input_shape(self):
        return (self.in_channels, self.in_hw, self.in_hw)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _check_input(self, shape):
        if shape[1:] != self.input_shape:
            raise T.ShapeError(
                f"policy input: expected (B,)+{self.input_shape}, got {shape}"
            )

    def logits(self, x):
        """Differentiable Q-values for a batch of raw-pixel stacks."""
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x), dtype=self.dtype)
        self._check_input(x.shape)
        h = T.scale(x, self.input_scale)
        for i, (_, _, stride) in enumerate(self.conv_specs):
            h = T.conv2d(h, self.params[f"conv{i}_w"], self.params[f"conv{i}_b"], stride)
            h = T.relu(h)
        h = T.reshape(h, (x.shape[0], self._flat))
        h = T.relu(T.dense(h, self.params["fc0_w"], self.params["fc0_b"]))
        return T.dense(h, self.params["fc1_w"], self.params["fc1_b"])

    def logits_array(self, x):
        """Same forward pass on plain arrays, no graph recording."""
        x = np.ascontiguousarray(np.asarray(x), dtype=self.dtype)
        self._check_input(x.shape)
        h = x * self.dtype.type(self.input_scale)
        for i, (_, _, stride) in enumerate(self.conv_specs):
            h = backends.conv2d_forward(
                h, self.params[f"conv{i}_w"].data, self.params[f"conv{i}_b"].data, stride
            )
            h = np.maximum(h, 0)
        h = h.reshape(x.shape[0], self._flat)
        h = np.maximum(h @ self.params["fc0_w"].data + self.params["fc0_b"].data, 0)
        return h @ self.params["fc1_w"].data + self.params["fc1_b"].data

    def q_values(self, state):
        """Q-vector for a single (C,H,W) raw state."""
        q = self.logits_array(np.asarray(state)[None])
        if not np.all(np.isfinite(q)):
            raise FloatingPointError("q_values produced non-finite output")
        return q[0]

    def act(self, state):
        """Greedy action; ties break to the lowest index."""
        return int(np.argmax(self.q_values(state)))

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays):
        for k, p in self.params.items():
            arr = np.asarray(arrays[k], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise T.ShapeError(
                    f"checkpoint tensor {k}: expected {p.data.shape}, got {arr.shape}"
                )
            p.data = np.ascontiguousarray(arr)

    def arch_manifest(self):
        return {
            "action_count": self.action_count,
            "in_channels": self.in_channels,
            "in_hw": self.in_hw,
            "hidden": self.hidden,
            "conv_specs": [list(s) for s in self.conv_specs],
            "input_scale": self.input_scale,
        }

    @classmethod
    def from_manifest(cls, manifest, seed=0):
        return cls(
            action_count=manifest["action_count"],
            in_channels=manifest["in_channels"],
            in_hw=manifest["in_hw"],
            hidden=manifest["hidden"],
            conv_specs=manifest["conv_specs"],
            seed=seed,
            input_scale=manifest["input_scale"],
        )


def build_policy(action_count=5, seed=0, in_hw=42, dtype=np.float32):
    """Standard 4-frame policy network for the grid environment."""
    return ConvNet(action_count, in_channels=4, in_hw=in_hw, seed=seed, dtype=dtype)


def act_greedy(policy, state):
    return policy.act(state)


def agreement_rate(pi, pi_target, env, episodes, seed=0):
    """How often two policies pick the same action along unattacked
    trajectories of ``pi``."""
    if pi.action_count != pi_target.action_count:
        raise ValueError("policies must share an action space")
    agree = 0
    total = 0
    for ep in range(episodes):
        obs = env.reset(seed=_episode_seed(seed, ep))
        stacker = FrameStack()
        done = False
        while not done:
            state = stacker.push(obs)
            a = pi.act(state)
            if pi_target.act(state) == a:
                agree += 1
            total += 1
            obs, _, done = env.step(a)
    if total == 0:
        raise ValueError("agreement_rate: no timesteps observed")
    return agree / total


def _episode_seed(base, episode):
    # Distinct, reproducible per-episode streams from one base seed.
    return int(base) * 100003 + int(episode)


def evaluate_policy(policy, env, episodes, seed=0):
    """Greedy rollout returns. Gives (mean, std, list of returns)."""
    returns = []
    for ep in range(episodes):
        obs = env.reset(seed=_episode_seed(seed, ep))
        stacker = FrameStack()
        done = False
        ret = 0.0
        while not done:
            state = stacker.push(obs)
            obs, r, done = env.step(policy.act(state))
            ret += r
        returns.append(ret)
    arr = np.asarray(returns)
    return float(arr.mean()), float(arr.std()), returns


class RandomPolicy:
    """Uniform-random baseline with the policy interface."""

    def __init__(self, action_count, seed=0):
        self.action_count = action_count
        self._rng = np.random.default_rng(seed)

    def act(self, state):
        return int(self._rng.integers(self.action_count))
