"""Attack crafting: universal per-action masks and FGSM baselines.

Unit convention: masks and perturbations live in network-input units
(pixels scaled by 1/255), where the budget ``epsilon`` is typically
0.005..0.1.  Applying an attack to a raw frame scales it back up and
clips to the valid range: ``clip(frame + 255 * delta, 0, 255)``.

Mask training maximizes, per action ``a``, the mean log-probability the
attacked policy assigns to ``a`` over a dataset of observations, minus
``alpha`` times the mask's L2 norm, alternating Adam steps with
projection onto the L-infinity ball of radius ``epsilon``.  The
attacked frame is clipped to the valid image range inside the
objective; history frames stay clean.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .gridworld import FrameStack, stack_state
from .policy import _episode_seed

RAW_PER_UNIT = 255.0


def project_linf(delta, epsilon):
    """Componentwise projection onto the L-infinity ball of radius eps."""
    if epsilon < 0:
        raise ValueError(f"project_linf: epsilon must be >= 0, got {epsilon}")
    return np.clip(delta, -epsilon, epsilon)


def sample_simplex(n, rng):
    """Uniform draw from the (n-1)-simplex via exponential normalization."""
    if n < 1:
        raise ValueError(f"sample_simplex: n must be >= 1, got {n}")
    g = rng.exponential(scale=1.0, size=n)
    return g / g.sum()


@dataclass
class AttackBudget:
    epsilon: float
    alpha: float = 0.0
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.05

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class ObservationDataset:
    """Episodes of raw observations (never stacked states)."""

    episodes: list

    def __post_init__(self):
        self.episodes = [np.asarray(ep, dtype=np.float32) for ep in self.episodes]
        if not self.episodes or any(len(ep) == 0 for ep in self.episodes):
            raise ValueError("dataset needs at least one non-empty episode")
        for ep in self.episodes:
            if ep.min() < 0 or ep.max() > 255:
                raise ValueError("observations must lie in [0,255]")

    @property
    def n_observations(self):
        return sum(len(ep) for ep in self.episodes)

    @property
    def frame_shape(self):
        return self.episodes[0].shape[1:]

    def indices(self):
        """All (episode, t) pairs, in order."""
        return [(k, t) for k, ep in enumerate(self.episodes) for t in range(len(ep))]

    def stack_at(self, k, t):
        """Clean 4-frame state for observation t of episode k."""
        ep = self.episodes[k]
        return stack_state(ep[t], ep[max(0, t - 3) : t])

    def runs_of_four(self):
        """All (episode, t) with t >= 3: positions with a full history."""
        return [(k, t) for k, ep in enumerate(self.episodes) for t in range(3, len(ep))]


def collect_episodes(policy, env, n_observations=10000, seed=0):
    """Greedy rollouts until at least ``n_observations`` frames exist.

    Returns trace records per episode: (t, action, reward, done, frame).
    Episodes are kept whole; the count is truncated at an episode
    boundary, never inside one.
    """
    if n_observations < 1:
        raise ValueError(f"n_observations must be >= 1, got {n_observations}")
    episodes = []
    total = 0
    ep = 0
    while total < n_observations:
        obs = env.reset(seed=_episode_seed(seed, ep))
        stacker = FrameStack()
        records = []
        done = False
        t = 0
        while not done:
            state = stacker.push(obs)
            action = policy.act(state)
            frame = obs
            obs, reward, done = env.step(action)
            records.append((t, action, reward, done, frame))
            t += 1
        episodes.append(records)
        total += len(records)
        ep += 1
    return episodes


def collect_dataset(policy, env, n_observations=10000, seed=0):
    """Observation dataset from unattacked greedy rollouts of ``policy``."""
    episodes = collect_episodes(policy, env, n_observations, seed=seed)
    return ObservationDataset([np.stack([r[4] for r in ep]) for ep in episodes])


def dataset_from_trace(episodes):
    """Build an ObservationDataset from EPTR trace records."""
    return ObservationDataset([np.stack([r[4] for r in ep]) for ep in episodes])


@dataclass
class MaskSet:
    """One additive mask per action, in network-input units."""

    masks: np.ndarray  # (actions, H, W) float32
    epsilon: float
    alpha: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.masks = np.ascontiguousarray(self.masks, dtype=np.float32)
        if self.masks.ndim != 3:
            raise ValueError(f"masks must be (actions,H,W), got {self.masks.shape}")
        self.validate()

    def validate(self):
        worst = float(np.abs(self.masks).max())
        if worst > self.epsilon + 1e-6:
            raise ValueError(
                f"mask exceeds budget: max|delta|={worst} > eps={self.epsilon}"
            )

    @property
    def action_count(self):
        return self.masks.shape[0]

    @classmethod
    def zeros(cls, action_count, frame_shape, epsilon=0.0, alpha=0.0):
        return cls(
            np.zeros((action_count,) + tuple(frame_shape), np.float32), epsilon, alpha
        )

    def apply(self, frame, action):
        """Perturb one raw frame toward ``action`` and clip to range."""
        return np.clip(
            frame + RAW_PER_UNIT * self.masks[action], 0.0, 255.0
        ).astype(np.float32)

    def max_l2(self):
        return float(
            max(np.sqrt(np.sum(np.square(m, dtype=np.float64))) for m in self.masks)
        )


def _log_probs(policy, stacks, temperature):
    logits = policy.logits(stacks)
    if temperature != 1.0:
        logits = T.scale(logits, 1.0 / temperature)
    return T.log_softmax(logits)


def _mask_loss(policies, stacks_raw, delta, action, alpha, temperature, mixture_rng):
    """Negated crafting objective as a graph scalar.

    Single policy: -mean log pi(a | attacked stack) + alpha*||delta||2.
    Several policies: the log of a simplex-weighted mixture of their
    probabilities, fresh weights per minibatch.
    """
    base = T.Tensor(stacks_raw)
    attacked = T.clip_range(
        T.add_to_channel(base, T.scale(delta, RAW_PER_UNIT), stacks_raw.shape[1] - 1),
        0.0,
        255.0,
    )
    if len(policies) == 1:
        gain = T.mean(T.take_column(_log_probs(policies[0], attacked, temperature), action))
    else:
        weights = sample_simplex(len(policies), mixture_rng)
        mix = None
        for pi, w in zip(policies, weights):
            prob = T.exp(T.take_column(_log_probs(pi, attacked, temperature), action))
            term = T.scale(prob, float(w))
            mix = term if mix is None else T.add(mix, term)
        gain = T.mean(T.log(mix))
    return T.add(T.scale(gain, -1.0), T.scale(T.l2_norm(delta), alpha))


def optimize_mask(
    policies,
    get_batch,
    n_items,
    action,
    budget,
    seed,
    frame_shape,
    temperature=1.0,
):
    """Shared mask optimizer for the white-box and ensemble paths.

    ``get_batch(indices, history_rng)`` returns raw (B,C,H,W) stacks.
    Returns (mask, per-epoch mean objective values).
    """
    if n_items < 1:
        raise ValueError("optimize_mask: empty dataset")
    frame_shape = tuple(frame_shape)
    if budget.epsilon == 0.0:
        return np.zeros(frame_shape, np.float32), []
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    streams = seed.spawn(3)
    shuffle_rng = np.random.default_rng(streams[0])
    mixture_rng = np.random.default_rng(streams[1])
    history_rng = np.random.default_rng(streams[2])

    delta = T.Tensor(
        np.zeros(frame_shape, np.float32), requires_grad=True, name=f"delta[{action}]"
    )
    adam = T.Adam([delta], lr=budget.learning_rate)
    objective_history = []
    for epoch in range(budget.epochs):
        order = shuffle_rng.permutation(n_items)
        obj_total = 0.0
        n_batches = 0
        for start in range(0, n_items, budget.batch_size):
            stacks = get_batch(order[start : start + budget.batch_size], history_rng)
            loss = _mask_loss(
                policies, stacks, delta, action, budget.alpha, temperature, mixture_rng
            )
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"mask optimization diverged: action={action} epoch={epoch} "
                    f"loss={value}"
                )
            delta.grad = None
            loss.backward()
            adam.step()
            delta.data = project_linf(delta.data, budget.epsilon).astype(np.float32)
            obj_total += -value
            n_batches += 1
        objective_history.append(obj_total / n_batches)
    return delta.data, objective_history


def _dataset_batch_fn(dataset, index_pairs, history_masks):
    """Batch provider mapping flat indices to clean (or pool-noised)
    4-frame stacks."""

    def get_batch(indices, history_rng):
        stacks = np.stack([dataset.stack_at(*index_pairs[i]) for i in indices])
        if history_masks is not None and len(history_masks):
            for b in range(stacks.shape[0]):
                for ch in range(stacks.shape[1] - 1):
                    m = history_masks[history_rng.integers(len(history_masks))]
                    stacks[b, ch] = np.clip(
                        stacks[b, ch] + RAW_PER_UNIT * m, 0.0, 255.0
                    )
        return stacks

    return get_batch


def mask_seed(seed, action, candidate=0):
    """Stable per-(action, candidate) seed derivation; candidate 0 is
    the white-box mask."""
    return np.random.SeedSequence(entropy=(int(seed), int(action), int(candidate)))


def craft_masks(
    policy,
    dataset,
    budget,
    seed=0,
    temperature=1.0,
    history_masks=None,
    workers=1,
):
    """White-box universal mask set: one optimized mask per action.

    Per-action optimizations are independent (own seeds, read-only
    policy weights), so ``workers > 1`` runs them on a thread pool
    without changing results.
    """
    index_pairs = dataset.indices()
    get_batch = _dataset_batch_fn(dataset, index_pairs, history_masks)

    def run(action):
        return optimize_mask(
            [policy],
            get_batch,
            len(index_pairs),
            action,
            budget,
            mask_seed(seed, action),
            dataset.frame_shape,
            temperature=temperature,
        )

    actions = range(policy.action_count)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, actions))
    else:
        results = [run(a) for a in actions]
    masks = [mask for mask, _ in results]
    histories = [history for _, history in results]
    provenance = {
        "mode": "whitebox",
        "seed": int(seed),
        "epsilon": budget.epsilon,
        "alpha": budget.alpha,
        "epochs": budget.epochs,
        "batch_size": budget.batch_size,
        "learning_rate": budget.learning_rate,
        "temperature": temperature,
        "dataset_observations": dataset.n_observations,
        "objective_history": histories,
    }
    return MaskSet(np.stack(masks), budget.epsilon, budget.alpha, provenance)


def _state_gradient(policy, state, a_target, temperature):
    """Gradient of the targeted loss w.r.t. the raw input state."""
    if not 0 <= a_target < policy.action_count:
        raise ValueError(f"invalid target action {a_target}")
    x = T.Tensor(np.asarray(state, dtype=np.float32)[None], requires_grad=True)
    lp = T.take_column(_log_probs(policy, x, temperature), a_target)
    loss = T.scale(T.mean(lp), -1.0)
    loss.backward()
    return x.grad[0]


def fgsm_attack(policy, state, a_target, epsilon, norm="linf", temperature=1.0):
    """Single-step targeted perturbation of the last observation.

    ``state`` is the agent's current raw 4-frame stack; the gradient is
    taken w.r.t. its newest frame only.  Returns the perturbation in
    network-input units; callers apply it with clipping.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    g = _state_gradient(policy, state, a_target, temperature)[-1]
    if norm == "linf":
        return (-epsilon * np.sign(g)).astype(np.float32)
    if norm == "l2":
        gn = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
        if gn == 0.0:
            raise ValueError("fgsm_attack: zero gradient, L2 direction undefined")
        return (-epsilon * g / gn).astype(np.float32)
    raise ValueError(f"norm must be 'linf' or 'l2', got {norm!r}")


def iterative_fgsm(
    policy, state, a_target, epsilon, steps, step_size, temperature=1.0
):
    """Projected iterative variant; steps=1 with step_size=epsilon is
    exactly the single-step attack."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    state = np.asarray(state, dtype=np.float32)
    eta = np.zeros(state.shape[1:], np.float32)
    for _ in range(steps):
        attacked = state.copy()
        attacked[-1] = np.clip(attacked[-1] + RAW_PER_UNIT * eta, 0.0, 255.0)
        g = _state_gradient(policy, attacked, a_target, temperature)[-1]
        eta = project_linf(eta - step_size * np.sign(g), epsilon).astype(np.float32)
    return eta
