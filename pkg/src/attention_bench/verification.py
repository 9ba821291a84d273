"""Invariant suite run by ``attention-bench verify``.

Each check returns :class:`CheckResult` rows; :func:`run_verification` runs
them all. Numerical checks run the engine in float64 so that agreement is
judged on the algorithms, not on float32 rounding.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tabulate import tabulate

from attention_bench import tensor_core as tc
from attention_bench.attention import (
    CORE_SCOPE,
    SCORES_TAG,
    VARIANTS,
    AttentionSpec,
    attend,
    attention_flops_analytic,
    equivalent_weights,
    init_attention_weights,
)
from attention_bench.data import PAD_ID, VOCAB_SIZE
from attention_bench.model import ModelConfig, OptimizerState, compute_loss, init_model, train_step
from attention_bench.profiler import DEFAULT_SAMPLE_PERIOD, PowerSampler, make_power_source
from attention_bench.tensor_core import Instrumentation, Tensor

logger = logging.getLogger(__name__)

EXACTNESS_TOL = 1e-5
CAUSALITY_TOL = 1e-6
GRADIENT_TOL = 1e-3
GRADIENT_STEP = 1e-3
GRADIENT_FLOOR = 1e-2
FLOP_TOL = 0.02
OVERHEAD_TOL = 1.05


@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    value: float
    limit: float

    def as_row(self) -> list:
        return [self.group, self.name, "ok" if self.passed else "FAIL", f"{self.value:.3g}", f"{self.limit:.3g}"]


def _max_abs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def exactness_targets(base: AttentionSpec, n: int, rng: np.random.Generator) -> List[AttentionSpec]:
    """Specs whose output must equal ``base`` (a baseline spec) given converted weights."""
    return [
        base.replace(variant="sdpa"),
        base.replace(
            variant="flash",
            tile_q=int(rng.integers(1, n + 1)),
            tile_kv=int(rng.integers(1, n + 1)),
        ),
        base.replace(variant="gqa", n_kv_heads=base.n_heads),
        base.replace(variant="sliding_window", window=n + int(rng.integers(0, 3))),
        base.replace(variant="lsh", n_buckets=1, n_rounds=1),
        base.replace(variant="mla", latent_dim=2 * base.inner_dim),
    ]


def check_exactness(instances: int = 20, seed: int = 0) -> List[CheckResult]:
    """Variants that must reproduce baseline attention, on random shapes and seeds."""
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    with Instrumentation(dtype=np.float64):
        for _ in range(instances):
            batch = int(rng.integers(1, 3))
            n = int(rng.integers(1, 25))
            n_heads = int(rng.integers(1, 5))
            head_dim = int(rng.integers(2, 9))
            d = n_heads * head_dim
            base = AttentionSpec("baseline", n_heads, head_dim)
            weights = init_attention_weights(base, d, rng, std=0.3)
            x = Tensor(rng.normal(size=(batch, n, d)))
            with tc.no_grad():
                reference = attend(x, base, weights).data
                for target in exactness_targets(base, n, rng):
                    converted = equivalent_weights(weights, base, target)
                    diff = _max_abs(attend(x, target, converted).data, reference)
                    worst[target.variant] = max(worst.get(target.variant, 0.0), diff)
    return [
        CheckResult("exactness", f"{variant} == baseline", diff <= EXACTNESS_TOL, diff, EXACTNESS_TOL)
        for variant, diff in worst.items()
    ]


def verification_spec(variant: str, n_heads: int = 2, head_dim: int = 8) -> AttentionSpec:
    """Small spec of ``variant`` with the benchmark's variant shapes scaled down."""
    return AttentionSpec(
        variant=variant,
        n_heads=n_heads,
        head_dim=head_dim,
        n_kv_heads=1,
        window=3,
        n_buckets=2,
        n_rounds=2,
        latent_dim=max(1, n_heads * head_dim // 2),
        tile_q=3,
        tile_kv=2,
    )


def check_causality(instances: int = 10, seed: int = 0) -> List[CheckResult]:
    """Changing input row ``t + 1`` must leave output rows ``0..t`` untouched."""
    rng = np.random.default_rng(seed)
    results = []
    with Instrumentation(dtype=np.float64), tc.no_grad():
        for variant in VARIANTS:
            spec = verification_spec(variant)
            worst = 0.0
            for _ in range(instances):
                n = int(rng.integers(2, 12))
                weights = init_attention_weights(spec, spec.inner_dim, rng, std=0.3)
                data = rng.normal(size=(1, n, spec.inner_dim))
                t = int(rng.integers(0, n - 1))
                perturbed = data.copy()
                perturbed[:, t + 1, :] += rng.normal(size=spec.inner_dim)
                before = attend(Tensor(data), spec, weights).data
                after = attend(Tensor(perturbed), spec, weights).data
                worst = max(worst, _max_abs(before[:, : t + 1], after[:, : t + 1]))
            results.append(
                CheckResult("causality", variant, worst <= CAUSALITY_TOL, worst, CAUSALITY_TOL)
            )
    return results


def gradient_check_config(variant: str, seed: int) -> ModelConfig:
    return ModelConfig(
        n_layers=2,
        d_model=16,
        n_heads=2,
        d_ff=32,
        vocab_size=VOCAB_SIZE,
        max_seq_len=8,
        attention=verification_spec(variant),
        seed=seed,
    )


def _probe_loss(state, ids) -> Tuple[float, str]:
    with Instrumentation(dtype=np.float64, track_kinks=True) as probe, tc.no_grad():
        loss = compute_loss(state, ids).item()
        return loss, probe.kink_signature()


def gradient_relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRADIENT_FLOOR)


def model_gradient_error(
    variant: str, seed: int, elements_per_tensor: int = 2, max_attempts: int = 8
) -> float:
    """Worst relative error between backprop and central differences for one model.

    Elements whose perturbation flips a discrete decision (a relu mask or an
    LSH bucket) are resampled, since the loss is not differentiable across
    such a change.
    """
    rng = np.random.default_rng(seed)
    config = gradient_check_config(variant, seed)
    worst = 0.0
    with Instrumentation(dtype=np.float64):
        state = init_model(config)
        ids = rng.integers(0, PAD_ID, size=(1, 6))
        loss = compute_loss(state, ids)
        tc.backward(loss)
        _, baseline_signature = _probe_loss(state, ids)
        for name, param in state.named_parameters():
            analytic = param.grad.data if param.grad is not None else np.zeros(param.shape)
            checked = 0
            for _ in range(max_attempts):
                if checked == elements_per_tensor:
                    break
                index = tuple(int(rng.integers(extent)) for extent in param.shape)
                original = param.data[index]
                param.data[index] = original + GRADIENT_STEP
                plus, plus_signature = _probe_loss(state, ids)
                param.data[index] = original - GRADIENT_STEP
                minus, minus_signature = _probe_loss(state, ids)
                param.data[index] = original
                if plus_signature != baseline_signature or minus_signature != baseline_signature:
                    logger.debug("Resampling %s%s: perturbation crosses a kink", name, index)
                    continue
                numeric = (plus - minus) / (2 * GRADIENT_STEP)
                worst = max(worst, gradient_relative_error(float(analytic[index]), numeric))
                checked += 1
    return worst


def check_gradients(seeds: Tuple[int, ...] = (0, 1, 2)) -> List[CheckResult]:
    """End-to-end finite-difference check of a 2-layer, 16-wide model per variant."""
    results = []
    for variant in VARIANTS:
        worst = max(model_gradient_error(variant, seed) for seed in seeds)
        results.append(CheckResult("gradients", variant, worst <= GRADIENT_TOL, worst, GRADIENT_TOL))
    return results


def instrumented_attention_flops(
    spec: AttentionSpec, n: int, batch: int = 1, seed: int = 0, scope: Optional[str] = None
) -> Tuple[int, Optional[List[int]]]:
    """FLOPs counted for one forward pass of ``spec`` on random input.

    Returns the count (total, or the named scope) and the LSH bucket
    capacities of the pass when the variant records them.
    """
    rng = np.random.default_rng(seed)
    with Instrumentation() as inst:
        weights = init_attention_weights(spec, spec.inner_dim, rng)
        x = Tensor(rng.normal(size=(batch, n, spec.inner_dim)))
        before = inst.flops.snapshot()
        with tc.no_grad():
            attend(x, spec, weights)
        after = inst.flops.snapshot()
        key = "total" if scope is None else f"scope.{scope}"
        count = after.get(key, 0) - before.get(key, 0)
        return count, inst.notes.get("lsh_bucket_capacity")


def benchmark_spec(variant: str, n_heads: int = 4, head_dim: int = 16, **changes) -> AttentionSpec:
    values = dict(n_kv_heads=1, window=32, n_buckets=4, n_rounds=2, latent_dim=n_heads * head_dim // 2, tile_q=16, tile_kv=16)
    values.update(changes)
    return AttentionSpec(variant=variant, n_heads=n_heads, head_dim=head_dim, **values)


def check_flops_analytic(n: int = 64) -> List[CheckResult]:
    """The closed-form estimate against the FLOP counter, per variant."""
    results = []
    for variant in VARIANTS:
        spec = benchmark_spec(variant)
        counted, capacities = instrumented_attention_flops(spec, n)
        expected = attention_flops_analytic(spec, n, bucket_capacity=capacities)
        error = abs(counted - expected) / expected
        results.append(CheckResult("flops", f"{variant} analytic", error <= FLOP_TOL, error, FLOP_TOL))
    return results


COMPLEXITY_BOUNDS: Dict[str, Tuple[float, float]] = {
    "baseline": (3.6, 4.4),
    "sdpa": (3.6, 4.4),
    "gqa": (3.6, 4.4),
    "flash": (3.6, 4.4),
    "mla": (3.6, 4.4),
    "linear": (1.8, 2.2),
    "sliding_window": (1.8, 2.6),
    "lsh": (0.0, 3.6),
}


def attention_cost_ratio(variant: str, n: int = 128, bucket_size: int = 32) -> float:
    """Attention-core FLOPs at ``2n`` over those at ``n``.

    LSH keeps the expected bucket size fixed, so its bucket count doubles with ``n``.
    """
    counts = []
    for length in (n, 2 * n):
        changes = {"n_buckets": max(2, length // bucket_size)} if variant == "lsh" else {}
        spec = benchmark_spec(variant, tile_q=64, tile_kv=64, **changes)
        counts.append(instrumented_attention_flops(spec, length, scope=CORE_SCOPE)[0])
    return counts[1] / counts[0]


def check_complexity(n: int = 128) -> List[CheckResult]:
    results = []
    for variant in VARIANTS:
        low, high = COMPLEXITY_BOUNDS[variant]
        ratio = attention_cost_ratio(variant, n)
        results.append(
            CheckResult("complexity", f"{variant} cost({2 * n})/cost({n})", low <= ratio <= high, ratio, high)
        )
    return results


def scores_peak_bytes(spec: AttentionSpec, n: int, seed: int = 0) -> int:
    """Peak bytes of score buffers during one inference pass of ``spec``."""
    rng = np.random.default_rng(seed)
    with Instrumentation() as inst:
        weights = init_attention_weights(spec, spec.inner_dim, rng)
        x = Tensor(rng.normal(size=(1, n, spec.inner_dim)))
        with tc.no_grad(), inst.alloc.window() as window:
            attend(x, spec, weights)
        return window.peak_by_tag.get(SCORES_TAG, 0)


def check_flash_memory(n: int = 256, tile: int = 64) -> List[CheckResult]:
    base = benchmark_spec("baseline")
    flash = benchmark_spec("flash", tile_q=tile, tile_kv=tile)
    baseline_peak = scores_peak_bytes(base, n)
    flash_peak = scores_peak_bytes(flash, n)
    return [
        CheckResult(
            "memory",
            f"flash scores peak < baseline at n={n}",
            flash_peak < baseline_peak,
            float(flash_peak),
            float(baseline_peak),
        )
    ]


def _timed_steps(state, optimizer, ids, steps: int, sampler: Optional[PowerSampler]) -> float:
    start = time.perf_counter()
    if sampler is None:
        for _ in range(steps):
            train_step(state, optimizer, ids)
    else:
        with sampler:
            for _ in range(steps):
                train_step(state, optimizer, ids)
    return time.perf_counter() - start


def profiler_overhead_ratio(
    repeats: int = 5,
    steps: int = 4,
    period: float = DEFAULT_SAMPLE_PERIOD,
    power: str = "constant:250",
    seed: int = 0,
) -> float:
    """Training time with a background :class:`PowerSampler` over time without one.

    Sampled and unsampled runs of the same steps alternate; the fastest run of
    each kind is compared so that scheduler noise does not count as overhead.
    """
    config = ModelConfig(
        n_layers=2,
        d_model=64,
        n_heads=4,
        d_ff=256,
        vocab_size=VOCAB_SIZE,
        max_seq_len=64,
        attention=benchmark_spec("baseline", head_dim=16),
        seed=seed,
    )
    ids = np.random.default_rng(seed).integers(1, VOCAB_SIZE, size=(4, 64))
    with Instrumentation() as inst:
        state = init_model(config)
        optimizer = OptimizerState.for_model(state)
        _timed_steps(state, optimizer, ids, 1, None)
        plain, sampled = [], []
        for _ in range(repeats):
            plain.append(_timed_steps(state, optimizer, ids, steps, None))
            source = make_power_source(power, flop_reader=lambda: inst.flops.total)
            sampler = PowerSampler(source, period)
            sampled.append(_timed_steps(state, optimizer, ids, steps, sampler))
    return min(sampled) / min(plain)


def check_profiler_overhead(period: float = DEFAULT_SAMPLE_PERIOD) -> List[CheckResult]:
    ratio = profiler_overhead_ratio(period=period)
    return [
        CheckResult(
            "overhead",
            f"sampled / unsampled step time at {1 / period:g} Hz",
            ratio < OVERHEAD_TOL,
            ratio,
            OVERHEAD_TOL,
        )
    ]


CHECKS: Dict[str, Callable[[], List[CheckResult]]] = {
    "exactness": check_exactness,
    "causality": check_causality,
    "gradients": check_gradients,
    "flops": check_flops_analytic,
    "complexity": check_complexity,
    "memory": check_flash_memory,
    "overhead": check_profiler_overhead,
}


def run_verification(groups: Optional[List[str]] = None) -> List[CheckResult]:
    """Run the named check groups (all by default) and return every result."""
    results: List[CheckResult] = []
    for group in groups or list(CHECKS):
        logger.info("Verifying %s", group)
        results.extend(CHECKS[group]())
    return results


def format_results(results: List[CheckResult]) -> str:
    return tabulate(
        [r.as_row() for r in results],
        headers=["group", "check", "status", "value", "limit"],
        tablefmt="github",
    )
