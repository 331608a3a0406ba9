"""Ensemble candidate crafting, competition accuracy and selection."""

import numpy as np
import pytest

from puppetmask.attacks import AttackBudget, ObservationDataset, craft_masks
from puppetmask.blackbox import (
    DEFAULT_CANDIDATES,
    DEFAULT_EPOCHS,
    competition_accuracy,
    craft_candidates,
    select_masks,
)
from puppetmask.policy import build_policy


def _dataset(hw=12, n=40, seed=0):
    rng = np.random.default_rng(seed)
    episodes = [rng.uniform(60, 195, (n // 2, hw, hw)).astype(np.float32) for _ in range(2)]
    return ObservationDataset(episodes)


def test_defaults_match_protocol():
    assert DEFAULT_EPOCHS == 100
    assert DEFAULT_CANDIDATES == 100


class TestCraftCandidates:
    def test_single_proxy_single_candidate_reduces_to_whitebox(self):
        # One proxy with the degenerate simplex weight [1.0] must follow
        # the same optimization trajectory as the white-box path.
        pi = build_policy(5, seed=0, in_hw=12)
        ds = _dataset()
        budget = AttackBudget(epsilon=0.04, alpha=1e-6, epochs=2)
        white = craft_masks(pi, ds, budget, seed=7)
        cands, _ = craft_candidates([pi], ds, budget, n_candidates=1, seed=7)
        assert np.array_equal(cands[:, 0], white.masks)

    def test_candidates_respect_ball(self):
        proxies = [build_policy(5, seed=s, in_hw=12) for s in (0, 1)]
        budget = AttackBudget(epsilon=0.03, epochs=1)
        cands, _ = craft_candidates(proxies, ds := _dataset(), budget, 2, seed=3)
        assert cands.shape == (5, 2, 12, 12)
        assert np.abs(cands).max() <= 0.03 + 1e-6

    def test_distinct_seeds_give_distinct_candidates(self):
        pi = build_policy(5, seed=0, in_hw=12)
        budget = AttackBudget(epsilon=0.03, epochs=1)
        cands, _ = craft_candidates([pi], _dataset(), budget, 2, seed=3)
        assert not np.array_equal(cands[0, 0], cands[0, 1])

    def test_mismatched_proxies_rejected(self):
        with pytest.raises(ValueError, match="action count"):
            craft_candidates(
                [build_policy(5, seed=0, in_hw=12), build_policy(4, seed=0, in_hw=12)],
                _dataset(),
                AttackBudget(epsilon=0.03, epochs=1),
                1,
            )

    def test_workers_do_not_change_results(self):
        pi = build_policy(5, seed=0, in_hw=12)
        budget = AttackBudget(epsilon=0.04, epochs=1)
        a, _ = craft_candidates([pi], _dataset(), budget, 2, seed=5, workers=1)
        b, _ = craft_candidates([pi], _dataset(), budget, 2, seed=5, workers=2)
        assert np.array_equal(a, b)


class TestCompetitionAccuracy:
    def test_zero_trials_rejected(self):
        pi = build_policy(5, seed=0, in_hw=12)
        with pytest.raises(ValueError):
            competition_accuracy(
                pi, _dataset(), np.zeros((12, 12)), 0, np.zeros((1, 12, 12)), 0,
                np.random.default_rng(0),
            )

    def test_short_dataset_rejected(self):
        pi = build_policy(5, seed=0, in_hw=12)
        short = ObservationDataset([np.full((2, 12, 12), 50.0, np.float32)])
        with pytest.raises(ValueError, match="consecutive"):
            competition_accuracy(
                pi, short, np.zeros((12, 12)), 0, np.zeros((1, 12, 12)), 5,
                np.random.default_rng(0),
            )

    def test_null_candidate_and_pool_equals_base_rate(self):
        pi = build_policy(5, seed=2, in_hw=12)
        ds = _dataset(seed=4)
        rng = np.random.default_rng(9)
        zero = np.zeros((12, 12), np.float32)
        pool = np.zeros((1, 12, 12), np.float32)
        # exhaustive base rate over the positions the trials sample from
        runs = ds.runs_of_four()
        base = {}
        from puppetmask.gridworld import stack_state

        for action in range(5):
            hits = sum(
                pi.act(stack_state(ds.episodes[k][t], ds.episodes[k][t - 3 : t])) == action
                for k, t in runs
            )
            base[action] = hits / len(runs)
        for action in (0, 3):
            acc = competition_accuracy(pi, ds, zero, action, pool, 400, rng)
            assert acc == pytest.approx(base[action], abs=0.08)


class TestSelectMasks:
    def test_single_candidate_selected(self):
        cands = np.random.default_rng(0).uniform(-0.01, 0.01, (3, 1, 4, 4))
        ms = select_masks(cands, np.array([[0.5], [0.25], [1.0]]), 0.01, 0.0)
        assert np.array_equal(ms.masks, cands[:, 0].astype(np.float32))

    def test_tie_breaks_to_lowest_index(self):
        cands = np.zeros((1, 3, 2, 2), np.float32)
        cands[0, 1, 0, 0] = 0.01
        cands[0, 2, 0, 0] = -0.01
        ms = select_masks(cands, np.array([[0.2, 0.9, 0.9]]), 0.02, 0.0)
        assert ms.provenance["selected_candidates"] == [1]
        assert ms.masks[0, 0, 0] == np.float32(0.01)

    def test_selected_accuracy_is_max(self):
        rng = np.random.default_rng(3)
        cands = rng.uniform(-0.01, 0.01, (4, 6, 3, 3))
        accs = rng.uniform(0, 1, (4, 6))
        ms = select_masks(cands, accs, 0.01, 0.0)
        assert ms.provenance["selected_accuracies"] == pytest.approx(
            accs.max(axis=1).tolist()
        )
        assert ms.provenance["pool_mean_accuracy"] == pytest.approx(accs.mean())

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            select_masks(np.zeros((2, 0, 3, 3)), np.zeros((2, 0)), 0.1, 0.0)
