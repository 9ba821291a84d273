import json

import pytest

from attention_bench import harness
from attention_bench.attention import VARIANTS
from attention_bench.checkpoint import load_checkpoint
from attention_bench.config import resolve_settings
from attention_bench.exceptions import ConfigError, NumericalError
from attention_bench.harness import (
    REPORT_FILE,
    SUMMARY_FILE,
    RunReport,
    RunSpec,
    VariantReport,
    emit_figure_tables,
    rank_variants,
    regenerate,
    run_benchmark,
    summary_markdown,
)
from attention_bench.profiler import PowerSampler

FIGURES = [
    "fig1_epoch_time.csv",
    "fig2_power.csv",
    "fig3_total_energy.csv",
    "fig4_loss.csv",
    "fig5_model_size.csv",
    "fig6_flops.csv",
    "fig7_memory.csv",
    "fig8_inference.csv",
]


def small_spec(out_dir, **changes) -> RunSpec:
    values = dict(
        n_layers=1,
        d_model=16,
        n_heads=2,
        d_ff=32,
        epochs=2,
        batches_per_epoch=2,
        batch_size=2,
        seq_len=16,
        synth_docs=8,
        power="constant:100",
        sample_period=0.01,
        inference_repeats=2,
        out_dir=str(out_dir),
        show_progress=False,
    )
    values.update(changes)
    return RunSpec(**values)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("bench")
    return out_dir, run_benchmark(small_spec(out_dir))


def test_every_variant_runs_on_the_same_batches(bench):
    _, report = bench
    assert [v.variant for v in report.variants] == list(VARIANTS)
    assert report.exit_status == 0
    assert report.fair
    assert len({v.batch_stream_digest for v in report.variants}) == 1


def test_variant_reports_carry_every_indicator(bench):
    _, report = bench
    for variant in report.variants:
        assert len(variant.epochs) == 2
        assert len(variant.loss_curve) == 4
        assert variant.flops_per_step > variant.forward_flops_per_step > 0
        assert variant.model_size_bytes == 4 * variant.parameter_count
        assert variant.peak_bytes > 0
        assert variant.inference_seconds_median > 0
        assert variant.total_wall_seconds == pytest.approx(
            sum(e.wall_seconds for e in variant.epochs)
        )


def test_constant_power_gives_energy_equal_to_watts_times_time(bench):
    _, report = bench
    for variant in report.variants:
        for epoch in variant.epochs:
            assert epoch.energy_joules == pytest.approx(100 * epoch.wall_seconds)
            assert epoch.mean_watts == pytest.approx(100)
    energy = [e.variant for e in rank_variants(report, "total_energy")]
    wall = [e.variant for e in rank_variants(report, "wall_time")]
    assert energy == wall


def test_structural_savings_show_in_the_report(bench):
    _, report = bench
    baseline = report.variant("baseline")
    assert report.variant("gqa").parameter_count < baseline.parameter_count
    assert report.variant("mla").kv_cache_bytes_per_token < baseline.kv_cache_bytes_per_token


def test_outputs_are_written(bench):
    out_dir, report = bench
    for name in [REPORT_FILE, SUMMARY_FILE, *FIGURES]:
        assert (out_dir / name).is_file(), name
    saved = json.loads((out_dir / REPORT_FILE).read_text())
    assert saved["fair"] is True
    assert RunReport.load(out_dir / REPORT_FILE).to_dict() == report.to_dict()


def test_figure_tables_regenerate_byte_for_byte(bench, tmp_path):
    out_dir, _ = bench
    regenerate(out_dir / REPORT_FILE, tmp_path)
    for name in FIGURES + [SUMMARY_FILE]:
        assert (tmp_path / name).read_bytes() == (out_dir / name).read_bytes(), name


def test_figure_tables_have_one_row_per_variant_or_epoch(bench, tmp_path):
    _, report = bench
    paths = {p.name: p for p in emit_figure_tables(report, tmp_path)}
    assert sorted(paths) == FIGURES
    loss_rows = paths["fig4_loss.csv"].read_text().splitlines()
    assert loss_rows[0] == "variant,epoch,mean_loss"
    assert len(loss_rows) == 1 + 2 * len(VARIANTS)
    assert len(paths["fig5_model_size.csv"].read_text().splitlines()) == 1 + len(VARIANTS)


def test_same_seed_gives_the_same_losses(tmp_path):
    first = run_benchmark(small_spec(tmp_path, variants=["linear"]), write=False)
    second = run_benchmark(small_spec(tmp_path, variants=["linear"]), write=False)
    assert first.variant("linear").loss_curve == second.variant("linear").loss_curve


def test_failed_variant_does_not_stop_the_run(tmp_path, monkeypatch):
    original = harness._run_variant

    def flaky(spec, variant, documents, out_dir):
        if variant == "lsh":
            raise NumericalError("loss diverged")
        return original(spec, variant, documents, out_dir)

    monkeypatch.setattr(harness, "_run_variant", flaky)
    report = run_benchmark(small_spec(tmp_path, variants=["baseline", "lsh"]))
    assert report.exit_status == 1
    assert report.variant("lsh").status == "failed"
    assert report.variant("lsh").error == "loss diverged"
    assert report.variant("baseline").ok
    ranking = rank_variants(report, "flops")
    assert [(e.variant, e.available) for e in ranking] == [("baseline", True), ("lsh", False)]
    assert "Failed variants: lsh" in (tmp_path / SUMMARY_FILE).read_text()


class ScriptedClockSampler(PowerSampler):
    """Samples only at marks, on a clock that reads 0, 0, 0, 10, 10, 20 seconds."""

    ticks = (0.0, 0.0, 0.0, 10.0, 10.0, 20.0)

    def __init__(self, source, period=0.1, clock=None):
        ticks = iter(self.ticks)
        super().__init__(source, period, clock=lambda: next(ticks))

    def start(self, background=True):
        return super().start(background=False)


def test_file_trace_energy_follows_the_trace_timestamps(tmp_path, monkeypatch):
    trace = tmp_path / "trace.csv"
    trace.write_text("t_seconds,watts\n0,100\n10,300\n", encoding="utf-8")
    monkeypatch.setattr(harness, "PowerSampler", ScriptedClockSampler)
    spec = small_spec(tmp_path, variants=["linear"], power=f"file:{trace}")
    variant = run_benchmark(spec, write=False).variant("linear")
    assert [e.wall_seconds for e in variant.epochs] == [10.0, 10.0]
    assert [e.energy_joules for e in variant.epochs] == pytest.approx([2000.0, 3000.0])
    assert [e.mean_watts for e in variant.epochs] == pytest.approx([200.0, 300.0])
    assert variant.total_energy_joules == pytest.approx(5000.0)
    assert variant.mean_watts == pytest.approx(250.0)


@pytest.mark.integration
def test_desk_run_lowers_the_loss_of_every_variant(tmp_path):
    settings = resolve_settings({"power": "constant:250", "out": str(tmp_path)}, environ={})
    report = run_benchmark(RunSpec.from_settings(settings, show_progress=False), write=False)
    assert [v.variant for v in report.variants] == list(VARIANTS)
    for variant in report.variants:
        assert variant.ok, variant.error
        assert variant.epochs[-1].mean_loss < variant.epochs[0].mean_loss, variant.variant


def test_checkpoints_are_saved_on_request(tmp_path):
    report = run_benchmark(small_spec(tmp_path, variants=["mla"], save_checkpoints=True))
    path = report.variant("mla").checkpoint
    state = load_checkpoint(path)
    assert state.num_parameters() == report.variant("mla").parameter_count


def test_ranking_breaks_ties_by_name_and_puts_missing_last():
    report = RunReport(
        spec={},
        environment={},
        variants=[
            VariantReport("sdpa", flops_per_step=10.0),
            VariantReport("baseline", flops_per_step=10.0),
            VariantReport("linear", flops_per_step=4.0),
            VariantReport("gqa"),
        ],
    )
    ranking = rank_variants(report, "flops")
    assert [e.variant for e in ranking] == ["linear", "baseline", "sdpa", "gqa"]
    assert not ranking[-1].available
    assert "unavailable" in summary_markdown(report)
    with pytest.raises(ConfigError):
        rank_variants(report, "accuracy")


def test_convergence_marks_the_epoch_of_half_the_drop():
    assert harness._convergence([4.0, 3.0, 2.0]) == (0.5, 2)
    assert harness._convergence([2.0, 2.5]) == (-0.25, None)


def test_run_spec_validates_counts_and_variants(tmp_path):
    with pytest.raises(ConfigError):
        small_spec(tmp_path, epochs=0)
    with pytest.raises(ConfigError):
        small_spec(tmp_path, variants=["baseline", "performer"])
    assert small_spec(tmp_path, variants="gqa,gqa,mla").variants == ["gqa", "mla"]


def test_run_spec_from_resolved_settings():
    settings = resolve_settings({"variants": "flash", "tile": 8, "epochs": 1}, environ={})
    spec = RunSpec.from_settings(settings, show_progress=False)
    assert spec.variants == ["flash"]
    assert spec.d_model == 128 and spec.batches_per_epoch == 40
    config = spec.model_config("flash")
    assert (config.attention.tile_q, config.attention.tile_kv) == (8, 8)
    assert "show_progress" not in spec.to_dict()
