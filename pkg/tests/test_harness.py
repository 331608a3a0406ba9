"""Rollout mechanics, metrics accounting and report files."""

import numpy as np
import pytest

from puppetmask.attacks import AttackBudget, MaskSet
from puppetmask.gridworld import GridPursuit, ScriptedFarSeeker
from puppetmask.harness import (
    CSV_HEADER,
    RolloutMetrics,
    ScenarioConfig,
    behavior_gap,
    read_report_csv,
    report,
    rollout_attacked,
    rollout_fgsm_baseline,
    run_scenario,
    sweep_cells,
    write_sweep_csv,
)
from puppetmask.attacks import ObservationDataset
from puppetmask.policy import agreement_rate, build_policy


def _scenario(**kw):
    base = dict(
        attacked_policy_id="pi",
        target_policy_id="target",
        attack="none",
        episodes=5,
        seed=3,
    )
    base.update(kw)
    return ScenarioConfig(**base)


class TestScenarioConfig:
    def test_rejects_unknown_attack(self):
        with pytest.raises(ValueError):
            _scenario(attack="pgd")

    def test_rejects_zero_episodes(self):
        with pytest.raises(ValueError):
            _scenario(episodes=0)


class TestNullAttack:
    def test_success_rate_equals_agreement_on_matched_seeds(self):
        pi = build_policy(5, seed=0)
        target = ScriptedFarSeeker()
        scenario = _scenario(episodes=6, seed=11)
        metrics = run_scenario(pi, target, GridPursuit(), scenario)
        agree = agreement_rate(pi, target, GridPursuit(), episodes=6, seed=11)
        assert metrics.success_rate == pytest.approx(agree, abs=1e-12)

    def test_zero_mask_set_identical_to_none(self):
        pi = build_policy(5, seed=1)
        target = ScriptedFarSeeker()
        zeros = MaskSet.zeros(5, (42, 42))
        a = rollout_attacked(pi, target, zeros, GridPursuit(), _scenario(attack="masks"))
        b = run_scenario(pi, target, GridPursuit(), _scenario())
        assert a.episode_returns == b.episode_returns
        assert a.episode_successes == b.episode_successes


class TestRolloutMechanics:
    def test_action_space_mismatch_rejected(self):
        pi = build_policy(5, seed=0)
        bad_masks = MaskSet.zeros(3, (42, 42))
        with pytest.raises(ValueError, match="mismatch"):
            rollout_attacked(pi, ScriptedFarSeeker(), bad_masks, GridPursuit(), _scenario(attack="masks"))

    def test_masks_requested_but_missing(self):
        pi = build_policy(5, seed=0)
        with pytest.raises(ValueError):
            run_scenario(pi, ScriptedFarSeeker(), GridPursuit(), _scenario(attack="masks"))

    def test_deterministic_given_seeds(self):
        pi = build_policy(5, seed=2)
        target = ScriptedFarSeeker()
        m1 = run_scenario(pi, target, GridPursuit(), _scenario(seed=7, measure_time=False))
        m2 = run_scenario(pi, target, GridPursuit(), _scenario(seed=7, measure_time=False))
        assert m1.row() == m2.row()
        assert m1.episode_returns == m2.episode_returns

    def test_success_rate_bounds_and_accounting(self):
        pi = build_policy(5, seed=3)
        metrics = run_scenario(pi, ScriptedFarSeeker(), GridPursuit(), _scenario())
        assert 0.0 <= metrics.success_rate <= 1.0
        assert metrics.total_steps == sum(metrics.episode_lengths)
        assert metrics.success_rate == pytest.approx(
            sum(metrics.episode_successes) / metrics.total_steps
        )
        assert metrics.episodes == 5

    def test_untrained_policy_scenarios_complete(self):
        # Random-weight victim: both attack paths run without numerical
        # failures and report both metrics.
        pi = build_policy(5, seed=99)
        target = ScriptedFarSeeker()
        masks = MaskSet(
            np.random.default_rng(0).uniform(-0.05, 0.05, (5, 42, 42)).astype(np.float32),
            0.05,
            0.0,
        )
        m1 = rollout_attacked(pi, target, masks, GridPursuit(), _scenario(attack="masks", episodes=2))
        m2 = rollout_fgsm_baseline(
            pi, target, GridPursuit(), _scenario(attack="fgsm", epsilon=0.05, episodes=2)
        )
        for m in (m1, m2):
            assert np.isfinite(m.mean_return)
            assert 0.0 <= m.success_rate <= 1.0

    def test_fgsm_baseline_requires_gradient_attack(self):
        pi = build_policy(5, seed=0)
        with pytest.raises(ValueError):
            rollout_fgsm_baseline(pi, ScriptedFarSeeker(), GridPursuit(), _scenario())

    def test_mask_apply_time_far_below_fgsm_craft_time(self):
        pi = build_policy(5, seed=4)
        target = ScriptedFarSeeker()
        masks = MaskSet.zeros(5, (42, 42), epsilon=0.05)
        t_mask = rollout_attacked(
            pi, target, masks, GridPursuit(), _scenario(attack="masks", episodes=3)
        ).mean_craft_time_us
        t_fgsm = rollout_fgsm_baseline(
            pi, target, GridPursuit(), _scenario(attack="fgsm", epsilon=0.05, episodes=3)
        ).mean_craft_time_us
        assert t_fgsm > t_mask


class TestBehaviorGap:
    def test_target_against_itself_is_zero(self):
        m = RolloutMetrics("s", 0, 0.0, 0.0, episode_returns=[4.0, 5.0], episode_lengths=[3, 4], episode_successes=[0, 0])
        assert behavior_gap(m, 4.5) == pytest.approx(0.0)

    def test_sign_and_antisymmetry(self):
        m = RolloutMetrics("s", 0, 0.0, 0.0, episode_returns=[1.0], episode_lengths=[2], episode_successes=[0])
        assert behavior_gap(m, 5.0) == pytest.approx(4.0)
        m2 = RolloutMetrics("s", 0, 0.0, 0.0, episode_returns=[5.0], episode_lengths=[2], episode_successes=[0])
        assert behavior_gap(m2, 1.0) == pytest.approx(-4.0)


class TestReport:
    def _rows(self):
        return [
            {
                "scenario": "masks",
                "seed": s,
                "eps": 0.04,
                "alpha": 1e-6,
                "success_rate": 0.5 + 0.1 * s,
                "mean_return": 1.25,
                "std_return": 0.5,
                "max_mask_l2": 1.5999999,
                "episodes": 4,
                "mean_craft_time_us": 12.345,
            }
            for s in range(3)
        ]

    def test_header_exact(self, tmp_path):
        csv_path, _ = report(self._rows(), tmp_path)
        first = csv_path.read_text().splitlines()[0]
        assert first == (
            "scenario,seed,eps,alpha,success_rate,mean_return,std_return,"
            "max_mask_l2,episodes,mean_craft_time_us"
        )
        assert first == CSV_HEADER

    def test_roundtrip_within_tolerance(self, tmp_path):
        rows = self._rows()
        csv_path, _ = report(rows, tmp_path)
        parsed = read_report_csv(csv_path)
        assert len(parsed) == len(rows)
        for a, b in zip(parsed, sorted(rows, key=lambda r: r["seed"])):
            for key in a:
                if isinstance(b[key], str):
                    assert a[key] == b[key]
                else:
                    assert a[key] == pytest.approx(b[key], abs=1e-9)

    def test_empty_table_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            report([], tmp_path)

    def test_deterministic_bytes(self, tmp_path):
        p1, _ = report(self._rows(), tmp_path / "a")
        p2, _ = report(self._rows(), tmp_path / "b")
        assert p1.read_bytes() == p2.read_bytes()

    def test_sweep_csv_has_error_column(self, tmp_path):
        rows = self._rows()
        rows[0]["error"] = ""
        path = write_sweep_csv(rows, tmp_path / "sweep.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == CSV_HEADER + ",error"
        assert len(lines) == 4


class TestSweep:
    def test_single_cell_grid(self):
        pi = build_policy(5, seed=0, in_hw=42)
        rng = np.random.default_rng(0)
        ds = ObservationDataset([rng.uniform(0, 255, (12, 42, 42)).astype(np.float32)])
        rows, by_cell = sweep_cells(
            pi,
            ScriptedFarSeeker(),
            ds,
            GridPursuit(),
            [0.02],
            [0.0],
            _scenario(attack="masks", episodes=2),
            AttackBudget(epsilon=1.0, epochs=1),
        )
        assert len(rows) == 1
        assert rows[0]["error"] == ""
        assert (0.02, 0.0) in by_cell

    def test_cell_failure_recorded_not_raised(self):
        pi = build_policy(5, seed=0)
        rng = np.random.default_rng(0)
        ds = ObservationDataset([rng.uniform(0, 255, (10, 42, 42)).astype(np.float32)])
        rows, _ = sweep_cells(
            pi,
            ScriptedFarSeeker(),
            ds,
            GridPursuit(),
            [-0.5, 0.02],  # negative eps cell must fail, sweep continues
            [0.0],
            _scenario(attack="masks", episodes=2),
            AttackBudget(epsilon=1.0, epochs=1),
        )
        assert len(rows) == 2
        assert rows[0]["error"] != "" and "epsilon" in rows[0]["error"]
        assert rows[1]["error"] == ""

    def test_empty_grid_rejected(self):
        pi = build_policy(5, seed=0)
        ds = ObservationDataset([np.zeros((5, 42, 42), np.float32)])
        with pytest.raises(ValueError):
            sweep_cells(pi, ScriptedFarSeeker(), ds, GridPursuit(), [], [0.0],
                        _scenario(), AttackBudget(epsilon=1.0))
