# tests/test_verification.py

import pytest

from stotrans.engine.attention import AttentionMode
from stotrans.engine.sampling import RngStream
from stotrans.services.verification_service import (
    GRADIENT_TOLERANCE,
    PROPERTY_NAMES,
    PropertyResult,
    attention_gradient_error,
    check_centroid_bound,
    check_dropout_expectation,
    check_gumbel_max_law,
    check_matmul_oracle,
    check_mode_collapse,
    check_normalization_sweep,
    check_softmax_stability,
    check_temperature_monotonicity,
    run_battery,
)


class TestChecks:

    @pytest.mark.parametrize("check", [
        check_softmax_stability,
        check_matmul_oracle,
        check_dropout_expectation,
        check_temperature_monotonicity,
        check_mode_collapse,
    ])
    def test_fast_checks_pass(self, check):
        result = check(RngStream(11))
        assert result.passed, result.render()

    def test_gumbel_max_law(self):
        assert check_gumbel_max_law(RngStream(3)).passed

    def test_small_normalization_sweep(self):
        result = check_normalization_sweep(RngStream(5), forwards=200)
        assert result.passed, result.render()

    def test_centroid_bound_trials(self):
        result = check_centroid_bound(RngStream(7), trials=100)
        assert result.passed and result.statistic <= 1e-9

    @pytest.mark.parametrize("mode", list(AttentionMode))
    def test_attention_gradients(self, mode):
        assert attention_gradient_error(mode, RngStream(13)) <= GRADIENT_TOLERANCE

    def test_render(self):
        line = PropertyResult("mode_collapse", 0.0, "<= 1e-12", True, 0.5).render()
        assert line.startswith("[PASS] mode_collapse")
        assert "FAIL" in PropertyResult("x", 1.0, "", False).render()


class TestBattery:

    def test_only_restricts_the_run(self):
        results = run_battery(seed=1, only=["matmul_oracle", "mode_collapse"])
        assert [r.name for r in results] == ["matmul_oracle", "mode_collapse"]
        assert all(r.passed and r.seconds >= 0 for r in results)

    def test_same_seed_same_statistics(self):
        a = run_battery(seed=2, only=["dropout_expectation"])
        b = run_battery(seed=2, only=["dropout_expectation"])
        assert a[0].statistic == b[0].statistic

    @pytest.mark.slow
    def test_full_battery(self):
        results = run_battery(seed=0)
        assert [r.name for r in results] == list(PROPERTY_NAMES)
        failed = [r.render() for r in results if not r.passed]
        assert not failed
