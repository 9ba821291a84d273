import numpy as np
import pytest

from attention_bench import tensor_core as tc
from attention_bench.attention import VARIANTS, AttentionSpec, equivalent_weights
from attention_bench.config import PROFILES, default_attention_spec
from attention_bench.data import PAD_ID, VOCAB_SIZE, tokenize_bytes
from attention_bench.exceptions import ConfigError, DataError, DimensionError
from attention_bench.model import (
    ModelConfig,
    OptimizerState,
    compute_loss,
    forward,
    inference_forward,
    init_model,
    model_size_bytes,
    parameter_count_formula,
    time_inference,
    train_step,
)
from attention_bench.tensor_core import Instrumentation, Tensor


def tiny_config(variant: str = "baseline", seed: int = 0, **attention) -> ModelConfig:
    values = dict(n_kv_heads=1, window=4, n_buckets=2, n_rounds=2, latent_dim=8, tile_q=4, tile_kv=3)
    values.update(attention)
    return ModelConfig(
        n_layers=2,
        d_model=16,
        n_heads=2,
        d_ff=32,
        vocab_size=VOCAB_SIZE,
        max_seq_len=16,
        attention=AttentionSpec(variant=variant, n_heads=2, head_dim=8, **values),
        seed=seed,
    )


def desk_config(variant: str) -> ModelConfig:
    desk = PROFILES["desk"]
    return ModelConfig(
        n_layers=desk["n_layers"],
        d_model=desk["d_model"],
        n_heads=desk["n_heads"],
        d_ff=desk["d_ff"],
        vocab_size=VOCAB_SIZE,
        max_seq_len=desk["seq_len"],
        attention=default_attention_spec(variant, desk["n_heads"], desk["d_model"]),
    )


@pytest.fixture
def tokens() -> np.ndarray:
    return np.random.default_rng(0).integers(0, PAD_ID, size=(2, 12))


def test_parameter_count_matches_closed_form():
    config = ModelConfig(
        n_layers=2,
        d_model=32,
        n_heads=2,
        d_ff=128,
        vocab_size=261,
        max_seq_len=64,
        attention=AttentionSpec("baseline", n_heads=2, head_dim=16),
    )
    assert parameter_count_formula(config) == 35616
    assert init_model(config).num_parameters() == 35616


def test_gqa_saves_exactly_the_key_value_reduction():
    baseline = tiny_config("baseline")
    gqa = tiny_config("gqa")
    saved = baseline.n_layers * 2 * 16 * (16 - 8)
    assert init_model(baseline).num_parameters() - init_model(gqa).num_parameters() == saved
    assert parameter_count_formula(gqa) == init_model(gqa).num_parameters()


def test_mla_saves_exactly_the_projection_difference():
    baseline = tiny_config("baseline")
    mla = tiny_config("mla", latent_dim=4)
    per_layer = 4 * 16 * 16 - (2 * 16 * 16 + 16 * 4 + 2 * 4 * 16)
    difference = model_size_bytes(init_model(baseline)) - model_size_bytes(init_model(mla))
    assert difference == 4 * baseline.n_layers * per_layer


def test_model_size_is_four_bytes_per_parameter():
    state = init_model(tiny_config())
    assert model_size_bytes(state) == 4 * state.num_parameters()


def test_desk_variants_have_comparable_sizes():
    baseline = parameter_count_formula(desk_config("baseline"))
    for variant in VARIANTS:
        size = parameter_count_formula(desk_config(variant))
        assert abs(size - baseline) / baseline <= 0.10, variant


def test_same_seed_gives_bitwise_identical_states():
    first = init_model(tiny_config("lsh", seed=5))
    second = init_model(tiny_config("lsh", seed=5))
    for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
        assert np.array_equal(a.data, b.data), name
    for (_, a), (_, b) in zip(first.named_buffers(), second.named_buffers()):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shape_and_causality(variant, tokens):
    with Instrumentation(dtype=np.float64), tc.no_grad():
        state = init_model(tiny_config(variant))
        logits = forward(state, tokens).numpy()
        changed = tokens.copy()
        changed[:, 6] = (changed[:, 6] + 1) % PAD_ID
        after = forward(state, changed).numpy()
    assert logits.shape == (2, 12, VOCAB_SIZE)
    np.testing.assert_allclose(after[:, :6], logits[:, :6], atol=1e-5)


def test_flash_and_baseline_give_the_same_logits(tokens):
    baseline_config = tiny_config("baseline")
    flash_config = baseline_config.with_variant("flash")
    baseline = init_model(baseline_config)
    flash = init_model(flash_config)
    source = dict(baseline.named_parameters())
    for name, tensor in flash.named_parameters():
        if ".attn." not in name:
            tensor.data[...] = source[name].data
    for base_layer, flash_layer in zip(baseline.layers, flash.layers):
        flash_layer.attn = equivalent_weights(
            base_layer.attn, baseline_config.attention, flash_config.attention
        )
    with tc.no_grad():
        np.testing.assert_allclose(
            forward(flash, tokens).numpy(), forward(baseline, tokens).numpy(), atol=1e-4
        )


def test_forward_rejects_bad_tokens():
    state = init_model(tiny_config())
    with pytest.raises(DimensionError):
        forward(state, np.zeros(5, dtype=np.int64))
    with pytest.raises(DimensionError):
        forward(state, np.zeros((1, 17), dtype=np.int64))
    with pytest.raises(DataError):
        forward(state, np.full((1, 4), VOCAB_SIZE))


def test_all_padding_batch_has_no_loss():
    state = init_model(tiny_config())
    with pytest.raises(DataError):
        compute_loss(state, np.full((2, 5), PAD_ID))


def test_initial_loss_is_near_uniform(tokens):
    state = init_model(tiny_config())
    with tc.no_grad():
        loss = compute_loss(state, tokens).item()
    assert loss == pytest.approx(np.log(VOCAB_SIZE), rel=0.1)


def test_training_overfits_a_repeated_batch():
    batch = np.stack([tokenize_bytes(text, 12) for text in ("the cat sat on", "a dog ran far")])
    state = init_model(tiny_config())
    optimizer = OptimizerState.for_model(state, lr=1e-2)
    losses = [train_step(state, optimizer, batch).loss for _ in range(50)]
    assert losses[-1] < 0.5 * losses[0]


def test_training_is_deterministic(tokens):
    def losses():
        state = init_model(tiny_config("linear", seed=3))
        optimizer = OptimizerState.for_model(state)
        return [train_step(state, optimizer, tokens).loss for _ in range(3)]

    assert losses() == losses()


def test_step_metrics_account_forward_and_total_flops(tokens):
    state = init_model(tiny_config())
    optimizer = OptimizerState.for_model(state)
    with Instrumentation():
        metrics = train_step(state, optimizer, tokens)
    assert metrics.step == 1
    assert metrics.tokens == tokens.size
    assert 0 < metrics.forward_flops < metrics.flops
    assert metrics.peak_bytes > 0


def test_inference_allocates_less_than_training(tokens):
    state = init_model(tiny_config())
    optimizer = OptimizerState.for_model(state)
    with Instrumentation() as inst:
        metrics = train_step(state, optimizer, tokens)
        with inst.alloc.window() as window:
            inference_forward(state, tokens)
    assert window.peak_bytes - window.start_bytes < metrics.peak_bytes


def test_step_peak_bytes_exclude_what_was_already_live(tokens):
    def step_peak(ballast_elements):
        state = init_model(tiny_config())
        optimizer = OptimizerState.for_model(state)
        with Instrumentation():
            ballast = Tensor(np.zeros(ballast_elements))
            metrics = train_step(state, optimizer, tokens)
            del ballast
        return metrics.peak_bytes

    assert step_peak(1_000_000) == step_peak(1)


def test_inference_is_bitwise_repeatable(tokens):
    state = init_model(tiny_config("lsh"))
    first, seconds = inference_forward(state, tokens)
    second, _ = inference_forward(state, tokens)
    assert seconds >= 0
    assert np.array_equal(first.data, second.data)
    assert not first.requires_grad


def test_time_inference_reports_median_and_spread(tokens):
    timing = time_inference(init_model(tiny_config()), tokens, repeats=10)
    assert len(timing.samples) == 10
    assert timing.median_seconds > 0
    assert timing.mad_seconds >= 0
    with pytest.raises(ConfigError):
        time_inference(init_model(tiny_config()), tokens, repeats=0)


def test_config_round_trips_and_validates():
    config = tiny_config("mla")
    assert ModelConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ConfigError):
        ModelConfig(
            n_layers=1,
            d_model=16,
            n_heads=2,
            d_ff=8,
            vocab_size=VOCAB_SIZE,
            max_seq_len=8,
            attention=AttentionSpec("baseline", n_heads=2, head_dim=8),
        )
    with pytest.raises(ConfigError):
        ModelConfig(
            n_layers=1,
            d_model=16,
            n_heads=2,
            d_ff=32,
            vocab_size=VOCAB_SIZE,
            max_seq_len=8,
            attention=AttentionSpec("baseline", n_heads=2, head_dim=4),
        )
