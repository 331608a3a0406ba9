"""Black-box mask crafting against an ensemble of proxy policies.

Candidate masks are trained to fool every convex combination of the
proxies' action distributions (weights drawn uniformly from the simplex
per minibatch), then ranked by competition accuracy: how often the
*queried* victim picks the target action when the candidate sits on the
newest frame and random pool masks sit on the three history frames.
"""

import numpy as np

from .attacks import (
    RAW_PER_UNIT,
    MaskSet,
    mask_seed,
    optimize_mask,
    sample_simplex,  # noqa: F401  (re-exported: part of this module's surface)
    _dataset_batch_fn,
)
from .gridworld import stack_state

DEFAULT_EPOCHS = 100
DEFAULT_CANDIDATES = 100


def craft_candidates(
    proxies, dataset, budget, n_candidates, seed=0, temperature=1.0, workers=1
):
    """Independently seeded candidate masks per action.

    Returns (candidates, histories) with candidates shaped
    (actions, n_candidates, H, W).  With a single proxy and a single
    candidate this reduces exactly to the white-box optimization.
    """
    if not proxies:
        raise ValueError("craft_candidates: need at least one proxy policy")
    counts = {p.action_count for p in proxies}
    if len(counts) != 1:
        raise ValueError(f"proxies disagree on action count: {sorted(counts)}")
    action_count = counts.pop()
    if n_candidates < 1:
        raise ValueError(f"n_candidates must be >= 1, got {n_candidates}")

    index_pairs = dataset.indices()
    get_batch = _dataset_batch_fn(dataset, index_pairs, None)

    jobs = [(a, c) for a in range(action_count) for c in range(n_candidates)]

    def run(job):
        action, cand = job
        return optimize_mask(
            proxies,
            get_batch,
            len(index_pairs),
            action,
            budget,
            mask_seed(seed, action, cand),
            dataset.frame_shape,
            temperature=temperature,
        )

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    h, w = dataset.frame_shape
    candidates = np.zeros((action_count, n_candidates, h, w), np.float32)
    histories = [[None] * n_candidates for _ in range(action_count)]
    for (action, cand), (mask, history) in zip(jobs, results):
        candidates[action, cand] = mask
        histories[action][cand] = history
    return candidates, histories


def competition_accuracy(
    policy, dataset, candidate, action, mask_pool, n_trials, rng
):
    """Fraction of pool-noised 4-frame states steered to ``action``.

    Each trial takes 4 consecutive dataset observations, perturbs the
    first 3 with randomly drawn pool masks and the last with the
    candidate, and scores a greedy query of the victim policy.
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    if len(mask_pool) == 0:
        raise ValueError("competition_accuracy: empty mask pool")
    runs = dataset.runs_of_four()
    if not runs:
        raise ValueError(
            "competition_accuracy: dataset has no run of 4 consecutive observations"
        )
    pool = np.asarray(mask_pool, dtype=np.float32)
    hits = 0
    for _ in range(n_trials):
        k, t = runs[rng.integers(len(runs))]
        frames = dataset.episodes[k][t - 3 : t + 1].copy()
        for i in range(3):
            m = pool[rng.integers(len(pool))]
            frames[i] = np.clip(frames[i] + RAW_PER_UNIT * m, 0.0, 255.0)
        frames[3] = np.clip(frames[3] + RAW_PER_UNIT * candidate, 0.0, 255.0)
        state = stack_state(frames[3], frames[:3])
        if policy.act(state) == action:
            hits += 1
    return hits / n_trials


def select_masks(candidates, accuracies, epsilon, alpha, provenance=None):
    """Per action, keep the candidate with the highest competition
    accuracy; ties break to the lowest candidate index."""
    candidates = np.asarray(candidates)
    accuracies = np.asarray(accuracies, dtype=np.float64)
    if candidates.ndim != 4 or candidates.shape[1] == 0:
        raise ValueError(f"need (actions, candidates, H, W), got {candidates.shape}")
    if accuracies.shape != candidates.shape[:2]:
        raise ValueError(
            f"one accuracy per candidate required: {accuracies.shape} vs "
            f"{candidates.shape[:2]}"
        )
    chosen = np.argmax(accuracies, axis=1)
    masks = np.stack([candidates[a, c] for a, c in enumerate(chosen)])
    info = dict(provenance or {})
    info.update(
        {
            "mode": "blackbox",
            "selected_candidates": [int(c) for c in chosen],
            "selected_accuracies": [float(accuracies[a, c]) for a, c in enumerate(chosen)],
            "pool_mean_accuracy": float(accuracies.mean()),
        }
    )
    return MaskSet(masks, epsilon, alpha, info)


def run_blackbox(
    victim,
    proxies,
    dataset,
    budget,
    n_candidates=DEFAULT_CANDIDATES,
    n_trials=200,
    seed=0,
    temperature=1.0,
    workers=1,
):
    """Full pipeline: craft candidates, rank by competition accuracy
    against the queried victim, select the best mask per action.

    Returns (mask_set, accuracies).
    """
    candidates, histories = craft_candidates(
        proxies,
        dataset,
        budget,
        n_candidates,
        seed=seed,
        temperature=temperature,
        workers=workers,
    )
    action_count, m = candidates.shape[:2]
    pool = candidates.reshape(action_count * m, *candidates.shape[2:])
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC0)))
    accuracies = np.zeros((action_count, m))
    for a in range(action_count):
        for c in range(m):
            accuracies[a, c] = competition_accuracy(
                victim, dataset, candidates[a, c], a, pool, n_trials, rng
            )
    provenance = {
        "seed": int(seed),
        "epsilon": budget.epsilon,
        "alpha": budget.alpha,
        "epochs": budget.epochs,
        "candidates": int(m),
        "proxies": len(proxies),
        "trials": int(n_trials),
        "objective_history": histories,
    }
    return select_masks(candidates, accuracies, budget.epsilon, budget.alpha, provenance), accuracies
