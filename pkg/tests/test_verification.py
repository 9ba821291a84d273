import numpy as np
import pytest

from attention_bench.attention import VARIANTS, AttentionSpec
from attention_bench.verification import (
    CHECKS,
    GRADIENT_FLOOR,
    CheckResult,
    attention_cost_ratio,
    check_causality,
    check_complexity,
    check_exactness,
    check_flash_memory,
    check_flops_analytic,
    check_gradients,
    check_profiler_overhead,
    exactness_targets,
    format_results,
    gradient_relative_error,
    model_gradient_error,
    run_verification,
    scores_peak_bytes,
    benchmark_spec,
)


def assert_all_pass(results):
    failed = [f"{r.group}/{r.name}: {r.value:.3g} > {r.limit:.3g}" for r in results if not r.passed]
    assert not failed, failed


def test_exactness_targets_cover_every_exact_variant():
    base = AttentionSpec("baseline", n_heads=2, head_dim=4)
    targets = exactness_targets(base, 5, np.random.default_rng(0))
    assert {spec.variant for spec in targets} == set(VARIANTS) - {"baseline", "linear"}
    flash = next(spec for spec in targets if spec.variant == "flash")
    assert 1 <= flash.tile_q <= 5 and 1 <= flash.tile_kv <= 5


def test_exact_variants_agree_with_baseline():
    results = check_exactness(instances=5, seed=1)
    assert len(results) == 6
    assert_all_pass(results)


def test_every_variant_is_causal():
    results = check_causality(instances=3, seed=2)
    assert [r.name for r in results] == list(VARIANTS)
    assert_all_pass(results)


def test_gradient_relative_error_uses_a_floor():
    assert gradient_relative_error(1.0, 1.0) == 0.0
    assert gradient_relative_error(2.0, 1.0) == pytest.approx(0.5)
    assert gradient_relative_error(1e-6, 0.0) == pytest.approx(1e-6 / GRADIENT_FLOOR)


@pytest.mark.parametrize("variant", ["baseline", "lsh"])
def test_backprop_matches_finite_differences(variant):
    assert model_gradient_error(variant, seed=0, elements_per_tensor=1) <= 1e-3


@pytest.mark.integration
def test_gradient_group_passes_for_every_variant():
    assert_all_pass(check_gradients(seeds=(0,)))


def test_analytic_flops_agree_with_the_counter():
    assert_all_pass(check_flops_analytic())


def test_quadratic_variants_quadruple_and_linear_ones_double():
    assert attention_cost_ratio("baseline") == pytest.approx(4.0, rel=0.1)
    assert attention_cost_ratio("linear") == pytest.approx(2.0, rel=0.1)
    assert_all_pass(check_complexity())


def test_flash_holds_fewer_score_bytes_than_baseline():
    baseline = scores_peak_bytes(benchmark_spec("baseline"), 128)
    flash = scores_peak_bytes(benchmark_spec("flash", tile_q=32, tile_kv=32), 128)
    assert 0 < flash < baseline
    assert_all_pass(check_flash_memory(n=128, tile=32))


def test_power_sampling_adds_under_five_percent_to_training():
    assert_all_pass(check_profiler_overhead())


def test_run_verification_runs_the_named_groups():
    results = run_verification(["memory"])
    assert [r.group for r in results] == ["memory"]
    assert set(CHECKS) == {
        "exactness",
        "causality",
        "gradients",
        "flops",
        "complexity",
        "memory",
        "overhead",
    }


def test_results_render_as_a_table():
    table = format_results(
        [
            CheckResult("flops", "baseline analytic", True, 0.001, 0.02),
            CheckResult("memory", "flash", False, 5.0, 4.0),
        ]
    )
    assert "baseline analytic" in table
    assert "FAIL" in table
    assert table.splitlines()[0].startswith("| group")
