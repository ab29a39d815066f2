import json
import logging

import numpy as np
import pytest

from spad.spl import (STATS_RUNNING, BatchReport, SPLState, batch_statistics,
                      compute_lambda, compute_weights, spl_step, unit_report)


class TestComputeLambda:
    def test_initial_step(self):
        assert compute_lambda(10.0, 2.0, 0, 4.0, 0.005) == 2.0

    def test_coefficient_reaches_one(self):
        assert compute_lambda(10.0, 2.0, 600, 4.0, 0.005) == 8.0

    def test_coefficient_clamped_below_one(self):
        assert compute_lambda(10.0, 2.0, 1000, 4.0, 0.005) == 8.0

    def test_non_decreasing_and_saturates(self):
        m, r = 4.0, 0.005
        values = [compute_lambda(10.0, 2.0, s, m, r) for s in range(0, 1200, 10)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        saturation_step = int((m - 1) / r)
        assert compute_lambda(10.0, 2.0, saturation_step, m, r) == 10.0 - 2.0
        assert compute_lambda(10.0, 2.0, saturation_step + 1, m, r) == 10.0 - 2.0

    def test_can_go_negative(self):
        assert compute_lambda(3.0, 1.0, 0, 4.0, 0.005) == -1.0

    def test_preconditions(self):
        with pytest.raises(ValueError):
            compute_lambda(1.0, -0.1, 0, 4.0, 0.005)
        with pytest.raises(ValueError):
            compute_lambda(1.0, 0.1, -1, 4.0, 0.005)


class TestComputeWeights:
    def test_partial_weight(self):
        assert compute_weights([1.0], 0.5)[0] == 0.5

    def test_low_loss_removed(self):
        assert compute_weights([0.4], 0.5)[0] == 0.0

    def test_negative_lambda_clamps_to_one(self):
        assert compute_weights([1.0], -0.2)[0] == 1.0

    def test_zero_lambda_keeps_everything(self):
        w = compute_weights([0.0, 0.5, 2.0], 0.0)
        assert np.all(w == 1.0)

    def test_zero_loss_with_negative_lambda(self):
        assert compute_weights([0.0], -1.0)[0] == 1.0

    def test_loss_equal_lambda_removed(self):
        assert compute_weights([0.5], 0.5)[0] == 0.0

    def test_weight_range(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            losses = rng.uniform(0, 10, size=50)
            lam = rng.uniform(-5, 12)
            w = compute_weights(losses, lam)
            assert np.all(w >= 0) and np.all(w <= 1)

    def test_monotone_in_loss(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            losses = np.sort(rng.uniform(0, 10, size=30))
            w = compute_weights(losses, rng.uniform(-2, 8))
            assert np.all(np.diff(w) >= 0)

    def test_monotone_in_lambda(self):
        rng = np.random.default_rng(5)
        losses = rng.uniform(0, 10, size=30)
        lams = np.sort(rng.uniform(-2, 12, size=20))
        prev = compute_weights(losses, lams[0])
        for lam in lams[1:]:
            cur = compute_weights(losses, lam)
            assert np.all(cur <= prev + 1e-15)
            prev = cur

    def test_hard_threshold(self):
        rng = np.random.default_rng(6)
        losses = rng.uniform(0, 4, size=200)
        lam = 1.3
        w = compute_weights(losses, lam)
        assert np.array_equal(w == 0.0, losses <= lam)

    def test_limit_behaviour(self):
        lam = 0.7
        big = compute_weights([1e12], lam)[0]
        assert big > 1 - 1e-9
        near = compute_weights([lam * (1 + 1e-9)], lam)[0]
        assert 0 < near < 1e-6

    def test_rejects_bad_losses(self):
        with pytest.raises(ValueError):
            compute_weights([np.nan], 0.5)
        with pytest.raises(ValueError):
            compute_weights([-1.0], 0.5)


class TestBatchStatistics:
    def test_two_values(self):
        assert batch_statistics([2.0, 4.0]) == (3.0, 1.0)

    def test_constant(self):
        assert batch_statistics([5.0, 5.0, 5.0]) == (5.0, 0.0)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(8)
        losses = rng.uniform(0, 3, size=64)
        mu, sigma = batch_statistics(losses)
        mean = sum(losses) / len(losses)
        var = sum((v - mean) ** 2 for v in losses) / len(losses)
        assert abs(mu - mean) < 1e-9
        assert abs(sigma - var ** 0.5) < 1e-9

    def test_too_small(self):
        with pytest.raises(ValueError):
            batch_statistics([1.0])


class TestSPLStep:
    def test_warmup_keeps_everything_and_freezes_counter(self):
        state = SPLState(m=4.0, r=0.005, warmup_active=True)
        report, new_state = spl_step([3.0, 1.0, 7.0], state)
        assert report.weights == (1.0, 1.0, 1.0)
        assert report.lambda_used is None
        assert new_state.step == 0

    def test_negative_lambda_keeps_everything(self):
        state = SPLState(m=4.0, r=0.005, warmup_active=False)
        report, new_state = spl_step([2.0, 4.0], state)
        assert report.mu == 3.0 and report.sigma == 1.0
        assert report.lambda_used == -1.0
        assert report.weights == (1.0, 1.0)
        assert report.removed_count == 0
        assert new_state.step == 1

    def test_removed_count_matches_enumeration(self):
        rng = np.random.default_rng(11)
        state = SPLState(m=1.0, r=0.01, warmup_active=False)  # lambda = mu - sigma
        losses = rng.uniform(0.1, 5.0, size=64)
        report, _ = spl_step(losses.tolist(), state)
        lam = report.lambda_used
        expected = [0.0 if l <= lam else min(1.0, max(0.0, 1.0 - lam / l))
                    for l in losses]
        assert report.weights == tuple(expected)
        assert report.removed_count == sum(1 for l in losses if l <= lam)

    def test_constant_batch_is_kept_with_warning(self, caplog):
        state = SPLState(m=1.0, r=0.01, warmup_active=False)
        with caplog.at_level(logging.WARNING, logger="spad.spl"):
            report, new_state = spl_step([2.0, 2.0, 2.0], state)
        assert report.weights == (1.0, 1.0, 1.0)
        assert report.lambda_used is None
        assert new_state.step == 1
        assert any("constant-loss" in rec.message for rec in caplog.records)

    def test_report_self_consistency(self):
        rng = np.random.default_rng(12)
        state = SPLState(m=1.5, r=0.1, warmup_active=False, step=4)
        losses = rng.uniform(0.01, 2.0, size=32)
        report, _ = spl_step(losses.tolist(), state)
        recomputed = compute_weights(report.losses, report.lambda_used)
        assert tuple(recomputed) == report.weights

    def test_running_statistics_mode(self):
        state = SPLState(m=1.0, r=0.5, warmup_active=False,
                         stats_mode=STATS_RUNNING)
        first = [1.0, 3.0]
        second = [5.0, 7.0]
        _, state = spl_step(first, state)
        report, _ = spl_step(second, state)
        merged = np.array(first + second)
        assert report.mu == pytest.approx(merged.mean(), abs=1e-12)
        assert report.sigma == pytest.approx(merged.std(), abs=1e-12)


class TestBatchReport:
    def test_log_line_schema(self):
        report = unit_report([0.2, 0.4, 0.9])
        entry = json.loads(report.log_line(17))
        assert set(entry) == {"step", "mu", "sigma", "lambda", "removed_count",
                              "weight_histogram"}
        assert entry["step"] == 17
        assert entry["lambda"] is None
        assert len(entry["weight_histogram"]) == 10
        assert sum(entry["weight_histogram"]) == 3

    def test_histogram_bins(self):
        report = BatchReport(losses=(1.0, 2.0, 3.0), weights=(0.0, 0.55, 1.0),
                             mu=2.0, sigma=0.5, lambda_used=0.9, removed_count=1)
        hist = report.weight_histogram()
        assert hist[0] == 1 and hist[5] == 1 and hist[9] == 1

    def test_removed_count_validated(self):
        with pytest.raises(ValueError):
            BatchReport(losses=(1.0,), weights=(0.0,), mu=1.0, sigma=0.0,
                        lambda_used=0.5, removed_count=0)


class TestSPLState:
    def test_validation(self):
        with pytest.raises(ValueError):
            SPLState(m=0.5)
        with pytest.raises(ValueError):
            SPLState(r=0.0)
        with pytest.raises(ValueError):
            SPLState(stats_mode="weird")

    def test_dict_round_trip(self):
        state = SPLState(m=2.0, r=0.1, step=7, warmup_active=False,
                         last_lambda=0.3)
        assert SPLState.from_dict(state.to_dict()) == state
