"""Benchmark driver: trains every variant under one schedule and reports the indicators.

:func:`run_benchmark` runs the variants one after another, each with a freshly
seeded model and the same batch stream, and persists a JSON :class:`RunReport`
(the record of truth), eight figure tables derived from it and a markdown
summary.
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tabulate import tabulate
from tqdm import tqdm

from attention_bench.attention import VARIANTS, kv_cache_bytes_per_token
from attention_bench.checkpoint import save_checkpoint
from attention_bench.config import default_attention_spec, parse_variants
from attention_bench.data import VOCAB_SIZE, Batcher, CorpusStats, load_documents
from attention_bench.exceptions import ConfigError
from attention_bench.model import (
    ModelConfig,
    OptimizerState,
    init_model,
    model_size_bytes,
    time_inference,
    train_step,
)
from attention_bench.profiler import (
    EpochMetrics,
    PowerSampler,
    cpu_and_disk_snapshot,
    host_environment,
    make_power_source,
    snapshot_delta,
)
from attention_bench.tensor_core import Instrumentation

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
SUMMARY_FILE = "summary.md"
FLOAT_FORMAT = "%.10g"

RANK_KEYS = {
    "total_energy": "total_energy_joules",
    "wall_time": "total_wall_seconds",
    "peak_bytes": "peak_bytes",
    "flops": "flops_per_step",
    "inference_time": "inference_seconds_median",
}

ENERGY_CAVEAT = (
    "With a constant synthetic power source, energy is proportional to wall time, so the "
    "energy and wall-time rankings coincide. With measured power they can diverge: a "
    "variant that trains longer is not always the one that draws the most energy."
)


@dataclass
class RunSpec:
    """One benchmark run: the model shape, the variants and the shared schedule.

    Raises:
        ConfigError: If a count is smaller than 1 or a variant name is unknown.
    """

    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 8
    d_ff: int = 512
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    epochs: int = 5
    batches_per_epoch: int = 40
    batch_size: int = 16
    seq_len: int = 128
    seed: int = 0
    power: str = "auto"
    data: str = "synth"
    out_dir: str = "bench_out"
    lr: float = 3e-4
    attention: Dict[str, Any] = field(default_factory=dict)
    sample_period: float = 0.1
    inference_repeats: int = 10
    synth_docs: int = 1024
    save_checkpoints: bool = False
    show_progress: bool = True

    def __post_init__(self):
        self.variants = parse_variants(self.variants)
        for name in (
            "n_layers",
            "d_model",
            "n_heads",
            "d_ff",
            "epochs",
            "batches_per_epoch",
            "batch_size",
            "seq_len",
            "inference_repeats",
            "synth_docs",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}.")

    def model_config(self, variant: str) -> ModelConfig:
        spec = default_attention_spec(variant, self.n_heads, self.d_model, **self.attention)
        return ModelConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            vocab_size=VOCAB_SIZE,
            max_seq_len=self.seq_len,
            attention=spec,
            seed=self.seed,
        )

    @classmethod
    def from_settings(cls, settings: Dict[str, Any], show_progress: bool = True) -> "RunSpec":
        """Build a spec from a resolved settings dict (see :mod:`attention_bench.config`)."""
        attention = {
            "window": settings.get("window"),
            "n_buckets": settings.get("n_buckets"),
            "n_rounds": settings.get("n_rounds"),
            "n_kv_heads": settings.get("n_kv_heads"),
            "latent_dim": settings.get("latent_dim"),
            "tile_q": settings.get("tile"),
            "tile_kv": settings.get("tile"),
        }
        return cls(
            n_layers=settings["n_layers"],
            d_model=settings["d_model"],
            n_heads=settings["n_heads"],
            d_ff=settings["d_ff"],
            variants=settings["variants"],
            epochs=settings["epochs"],
            batches_per_epoch=settings["batches"],
            batch_size=settings["batch_size"],
            seq_len=settings["seq_len"],
            seed=settings["seed"],
            power=settings["power"],
            data=settings["data"],
            out_dir=settings["out"],
            lr=settings["lr"],
            attention={k: v for k, v in attention.items() if v is not None},
            sample_period=settings["sample_period"],
            inference_repeats=settings["inference_repeats"],
            synth_docs=settings["synth_docs"],
            save_checkpoints=settings["save_checkpoints"],
            show_progress=show_progress,
        )

    def to_dict(self) -> dict:
        values = asdict(self)
        values.pop("show_progress")
        return values


@dataclass
class VariantReport:
    """Everything measured for one variant. Unmeasurable fields are None."""

    variant: str
    status: str = "ok"
    error: Optional[str] = None
    epochs: List[EpochMetrics] = field(default_factory=list)
    loss_curve: List[float] = field(default_factory=list)
    total_energy_joules: Optional[float] = None
    mean_watts: Optional[float] = None
    total_wall_seconds: Optional[float] = None
    model_size_bytes: Optional[int] = None
    parameter_count: Optional[int] = None
    flops_per_step: Optional[float] = None
    forward_flops_per_step: Optional[float] = None
    peak_bytes: Optional[int] = None
    scores_peak_bytes: Optional[int] = None
    rss_peak_bytes: Optional[int] = None
    inference_seconds_median: Optional[float] = None
    inference_seconds_mad: Optional[float] = None
    kv_cache_bytes_per_token: Optional[int] = None
    total_cpu_seconds: Optional[float] = None
    total_disk_bytes_read: Optional[int] = None
    loss_reduction: Optional[float] = None
    epochs_to_half_reduction: Optional[int] = None
    batch_stream_digest: Optional[str] = None
    attention: Dict[str, Any] = field(default_factory=dict)
    checkpoint: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        values = asdict(self)
        values["epochs"] = [epoch.to_dict() for epoch in self.epochs]
        return values

    @classmethod
    def from_dict(cls, values: dict) -> "VariantReport":
        values = dict(values)
        values["epochs"] = [EpochMetrics.from_dict(e) for e in values.get("epochs", [])]
        return cls(**values)


@dataclass
class RunReport:
    """Per-variant results plus the run spec and the host environment."""

    spec: Dict[str, Any]
    environment: Dict[str, Any]
    variants: List[VariantReport]
    corpus: Dict[str, Any] = field(default_factory=dict)

    @property
    def exit_status(self) -> int:
        return 0 if all(v.ok for v in self.variants) else 1

    @property
    def fair(self) -> bool:
        """True when every successful variant consumed the same batch stream."""
        digests = {v.batch_stream_digest for v in self.variants if v.ok}
        return len(digests) <= 1

    def variant(self, name: str) -> VariantReport:
        for report in self.variants:
            if report.variant == name:
                return report
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "environment": self.environment,
            "corpus": self.corpus,
            "fair": self.fair,
            "variants": [v.to_dict() for v in self.variants],
        }

    @classmethod
    def from_dict(cls, values: dict) -> "RunReport":
        return cls(
            spec=values["spec"],
            environment=values["environment"],
            variants=[VariantReport.from_dict(v) for v in values["variants"]],
            corpus=values.get("corpus", {}),
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunReport":
        with open(path, encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))


def _convergence(epoch_losses: Sequence[float]):
    first, final = epoch_losses[0], epoch_losses[-1]
    reduction = 1.0 - final / first if first else None
    drop = first - final
    if drop <= 0:
        return reduction, None
    for index, loss in enumerate(epoch_losses, start=1):
        if first - loss >= drop / 2:
            return reduction, index
    return reduction, None


def _sum_optional(values):
    values = list(values)
    if not values or any(v is None for v in values):
        return None
    return sum(values)


def _run_variant(spec: RunSpec, variant: str, documents: List[str], out_dir: Path) -> VariantReport:
    config = spec.model_config(variant)
    report = VariantReport(variant=variant, attention=config.attention.to_dict())
    batcher = Batcher(
        documents, spec.batch_size, spec.seq_len, spec.seed, spec.batches_per_epoch, CorpusStats()
    )
    digest = hashlib.md5()
    steps_flops: List[int] = []
    steps_forward: List[int] = []

    with Instrumentation() as inst:
        state = init_model(config)
        optimizer = OptimizerState.for_model(state, lr=spec.lr)
        source = make_power_source(spec.power, flop_reader=lambda: inst.flops.total)
        with PowerSampler(source, spec.sample_period) as sampler:
            for epoch in range(spec.epochs):
                before = cpu_and_disk_snapshot()
                t_start = sampler.mark()
                steps = []
                batches = tqdm(
                    batcher.epoch(epoch),
                    total=len(batcher),
                    desc=f"{variant} {epoch + 1}/{spec.epochs}",
                    leave=False,
                    disable=not spec.show_progress,
                )
                for batch in batches:
                    digest.update(batch.ids.tobytes())
                    steps.append(train_step(state, optimizer, batch))
                t_end = sampler.mark()
                usage = snapshot_delta(before, cpu_and_disk_snapshot())
                wall = t_end - t_start
                energy = sampler.energy_between(t_start, t_end)
                metrics = EpochMetrics(
                    epoch=epoch + 1,
                    wall_seconds=wall,
                    mean_loss=float(np.mean([s.loss for s in steps])),
                    steps=len(steps),
                    tokens=sum(s.tokens for s in steps),
                    flops=sum(s.flops for s in steps),
                    forward_flops=sum(s.forward_flops for s in steps),
                    peak_bytes=max(s.peak_bytes for s in steps),
                    energy_joules=energy,
                    mean_watts=energy / wall if energy is not None and wall > 0 else None,
                    cpu_process_seconds=usage.cpu_seconds,
                    cpu_percent=(
                        100.0 * usage.cpu_seconds / wall
                        if usage.cpu_seconds is not None and wall > 0
                        else None
                    ),
                    disk_bytes_read=usage.bytes_read,
                    disk_bytes_written=usage.bytes_written,
                    rss_peak_bytes=usage.rss_bytes,
                )
                report.epochs.append(metrics)
                report.loss_curve.extend(s.loss for s in steps)
                steps_flops.extend(s.flops for s in steps)
                steps_forward.extend(s.forward_flops for s in steps)
                logger.info(
                    "%s epoch %d/%d: loss %.4f, %.2fs, energy %s J",
                    variant,
                    epoch + 1,
                    spec.epochs,
                    metrics.mean_loss,
                    wall,
                    "n/a" if energy is None else f"{energy:.1f}",
                )

        timing = time_inference(state, next(iter(batcher.epoch(0))), spec.inference_repeats)
        report.peak_bytes = inst.alloc.peak_bytes
        report.scores_peak_bytes = inst.alloc.peak_by_tag.get("scores")

    report.total_wall_seconds = sum(e.wall_seconds for e in report.epochs)
    report.total_energy_joules = _sum_optional(e.energy_joules for e in report.epochs)
    if report.total_energy_joules is not None and report.total_wall_seconds > 0:
        report.mean_watts = report.total_energy_joules / report.total_wall_seconds
    report.total_cpu_seconds = _sum_optional(e.cpu_process_seconds for e in report.epochs)
    report.total_disk_bytes_read = _sum_optional(e.disk_bytes_read for e in report.epochs)
    rss = [e.rss_peak_bytes for e in report.epochs if e.rss_peak_bytes is not None]
    report.rss_peak_bytes = max(rss) if rss else None
    report.parameter_count = state.num_parameters()
    report.model_size_bytes = model_size_bytes(state)
    report.flops_per_step = float(np.mean(steps_flops))
    report.forward_flops_per_step = float(np.mean(steps_forward))
    report.inference_seconds_median = timing.median_seconds
    report.inference_seconds_mad = timing.mad_seconds
    report.kv_cache_bytes_per_token = kv_cache_bytes_per_token(config.attention)
    report.loss_reduction, report.epochs_to_half_reduction = _convergence(
        [e.mean_loss for e in report.epochs]
    )
    report.batch_stream_digest = digest.hexdigest()
    if spec.save_checkpoints:
        checkpoint_dir = out_dir / "checkpoints"
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        report.checkpoint = str(save_checkpoint(state, checkpoint_dir / f"{variant}.ckpt"))
    return report


def run_benchmark(spec: RunSpec, write: bool = True) -> RunReport:
    """Train and measure every variant of ``spec`` sequentially.

    A variant that raises is marked ``failed`` and the run moves on; the
    report's :attr:`RunReport.exit_status` is then 1.

    Args:
        spec (RunSpec): What to run.
        write (bool, optional): Persist ``report.json``, the figure tables and
            ``summary.md`` under ``spec.out_dir``. Defaults to True.

    Returns:
        RunReport: The collected measurements.
    """
    out_dir = Path(spec.out_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    corpus_stats = CorpusStats()
    documents = load_documents(spec.data, spec.seed, corpus_stats, n_docs=spec.synth_docs)
    environment = host_environment(
        make_power_source(spec.power, flop_reader=lambda: 0), spec.seed
    )
    logger.info(
        "Benchmarking %s: %d epochs x %d batches of %d x %d tokens",
        ", ".join(spec.variants),
        spec.epochs,
        spec.batches_per_epoch,
        spec.batch_size,
        spec.seq_len,
    )

    variants = []
    for variant in spec.variants:
        logger.info("Running variant %s", variant)
        try:
            variants.append(_run_variant(spec, variant, documents, out_dir))
        except Exception as exc:
            logger.exception("Variant %s failed", variant)
            variants.append(VariantReport(variant=variant, status="failed", error=str(exc)))

    report = RunReport(
        spec=spec.to_dict(),
        environment=environment,
        variants=variants,
        corpus=corpus_stats.to_dict(),
    )
    if not report.fair:
        logger.error("Variants did not see identical batch streams.")
    if write:
        report.save(out_dir / REPORT_FILE)
        emit_figure_tables(report, out_dir)
        write_summary(report, out_dir / SUMMARY_FILE)
        logger.info("Report written to %s", out_dir)
    return report


@dataclass
class RankEntry:
    variant: str
    value: Optional[float]
    available: bool


def rank_variants(report: RunReport, key: str) -> List[RankEntry]:
    """Variants in ascending order of ``key``, ties broken by name.

    Variants without a value for ``key`` (failed, or unmeasured on this host)
    come last, flagged ``available=False``.

    Raises:
        ConfigError: If ``key`` is not one of ``RANK_KEYS``.
    """
    if key not in RANK_KEYS:
        raise ConfigError(f"Unknown ranking key '{key}'. Choose from {', '.join(RANK_KEYS)}.")
    attribute = RANK_KEYS[key]
    ranked, missing = [], []
    for variant in report.variants:
        value = getattr(variant, attribute)
        if variant.ok and value is not None:
            ranked.append(RankEntry(variant.variant, value, True))
        else:
            missing.append(RankEntry(variant.variant, None, False))
    ranked.sort(key=lambda e: (e.value, e.variant))
    missing.sort(key=lambda e: e.variant)
    return ranked + missing


def _mb(value: Optional[int]) -> Optional[float]:
    return None if value is None else value / 2**20


def figure_tables(report: RunReport) -> Dict[str, pd.DataFrame]:
    """The eight figure tables, keyed by file name."""
    per_epoch = {"time": [], "power": [], "loss": []}
    rows = {name: [] for name in ("energy", "size", "flops", "memory", "inference")}
    for v in report.variants:
        for e in v.epochs:
            per_epoch["time"].append(
                {"variant": v.variant, "epoch": e.epoch, "wall_seconds": e.wall_seconds,
                 "cpu_seconds": e.cpu_process_seconds, "cpu_percent": e.cpu_percent,
                 "disk_bytes_read": e.disk_bytes_read}
            )
            per_epoch["power"].append(
                {"variant": v.variant, "epoch": e.epoch, "mean_watts": e.mean_watts,
                 "energy_joules": e.energy_joules, "device_utilization": e.device_utilization}
            )
            per_epoch["loss"].append({"variant": v.variant, "epoch": e.epoch, "mean_loss": e.mean_loss})
        rows["energy"].append(
            {"variant": v.variant, "total_energy_joules": v.total_energy_joules,
             "total_wall_seconds": v.total_wall_seconds, "mean_watts": v.mean_watts}
        )
        rows["size"].append(
            {"variant": v.variant, "parameter_count": v.parameter_count,
             "model_size_bytes": v.model_size_bytes, "model_size_mb": _mb(v.model_size_bytes),
             "kv_cache_bytes_per_token": v.kv_cache_bytes_per_token}
        )
        backward = (
            v.flops_per_step - v.forward_flops_per_step
            if v.flops_per_step is not None and v.forward_flops_per_step is not None
            else None
        )
        rows["flops"].append(
            {"variant": v.variant, "forward_flops_per_step": v.forward_flops_per_step,
             "backward_and_update_flops_per_step": backward, "flops_per_step": v.flops_per_step}
        )
        rows["memory"].append(
            {"variant": v.variant, "peak_bytes": v.peak_bytes,
             "scores_peak_bytes": v.scores_peak_bytes, "rss_peak_bytes": v.rss_peak_bytes}
        )
        rows["inference"].append(
            {"variant": v.variant, "inference_seconds_median": v.inference_seconds_median,
             "inference_seconds_mad": v.inference_seconds_mad}
        )

    def frame(records, columns):
        return pd.DataFrame.from_records(records, columns=columns)

    return {
        "fig1_epoch_time.csv": frame(
            per_epoch["time"],
            ["variant", "epoch", "wall_seconds", "cpu_seconds", "cpu_percent", "disk_bytes_read"],
        ),
        "fig2_power.csv": frame(
            per_epoch["power"],
            ["variant", "epoch", "mean_watts", "energy_joules", "device_utilization"],
        ),
        "fig3_total_energy.csv": frame(
            rows["energy"], ["variant", "total_energy_joules", "total_wall_seconds", "mean_watts"]
        ),
        "fig4_loss.csv": frame(per_epoch["loss"], ["variant", "epoch", "mean_loss"]),
        "fig5_model_size.csv": frame(
            rows["size"],
            ["variant", "parameter_count", "model_size_bytes", "model_size_mb", "kv_cache_bytes_per_token"],
        ),
        "fig6_flops.csv": frame(
            rows["flops"],
            ["variant", "forward_flops_per_step", "backward_and_update_flops_per_step", "flops_per_step"],
        ),
        "fig7_memory.csv": frame(
            rows["memory"], ["variant", "peak_bytes", "scores_peak_bytes", "rss_peak_bytes"]
        ),
        "fig8_inference.csv": frame(
            rows["inference"], ["variant", "inference_seconds_median", "inference_seconds_mad"]
        ),
    }


def emit_figure_tables(report: RunReport, outdir: Union[str, Path]) -> List[Path]:
    """Write the eight figure CSVs; the output is a pure function of ``report``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, table in figure_tables(report).items():
        path = outdir / name
        table.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")
        paths.append(path)
    return paths


def _format(value: Optional[float]) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return f"{value:.6g}"


def summary_markdown(report: RunReport) -> str:
    """Markdown with one ranked table per key and the convergence table."""
    parts = ["# Attention benchmark summary", ""]
    failed = [v.variant for v in report.variants if not v.ok]
    if failed:
        parts += [f"Failed variants: {', '.join(failed)}", ""]
    for key in RANK_KEYS:
        rows = [
            [position, entry.variant, _format(entry.value), "" if entry.available else "unavailable"]
            for position, entry in enumerate(rank_variants(report, key), start=1)
        ]
        parts += [
            f"## Ranking by {key.replace('_', ' ')}",
            "",
            tabulate(rows, headers=["rank", "variant", RANK_KEYS[key], "note"], tablefmt="github"),
            "",
        ]
    convergence = [
        [v.variant, _format(v.loss_reduction), v.epochs_to_half_reduction or "n/a"]
        for v in report.variants
        if v.ok
    ]
    parts += [
        "## Convergence",
        "",
        tabulate(
            convergence,
            headers=["variant", "loss_reduction", "epochs_to_half_reduction"],
            tablefmt="github",
        ),
        "",
        "## Energy and time",
        "",
        ENERGY_CAVEAT,
        "",
    ]
    return "\n".join(parts)


def write_summary(report: RunReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(summary_markdown(report), encoding="utf-8")
    return path


def regenerate(report_path: Union[str, Path], outdir: Optional[Union[str, Path]] = None) -> List[Path]:
    """Re-emit the figure tables and summary from a saved report."""
    report_path = Path(report_path)
    outdir = Path(outdir) if outdir is not None else report_path.parent
    report = RunReport.load(report_path)
    paths = emit_figure_tables(report, outdir)
    paths.append(write_summary(report, outdir / SUMMARY_FILE))
    return paths
