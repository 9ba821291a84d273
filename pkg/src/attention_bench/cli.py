"""Command-line entry point: ``attention-bench {run,single,verify,report}``.

Exit statuses: 0 success, 1 a variant or check failed, 2 usage error.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

from attention_bench.attention import VARIANTS
from attention_bench.config import resolve_settings
from attention_bench.exceptions import AttentionBenchError, ConfigError
from attention_bench.harness import RunSpec, regenerate, run_benchmark
from attention_bench.verification import CHECKS, format_results, run_verification

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# flag -> settings key, for the options shared by `run` and `single`
RUN_OPTIONS = {
    "--profile": ("profile", str, "desk or full"),
    "--epochs": ("epochs", int, "epochs per variant"),
    "--batches": ("batches", int, "batches per epoch"),
    "--batch-size": ("batch_size", int, "sequences per batch"),
    "--seq-len": ("seq_len", int, "tokens per sequence"),
    "--seed": ("seed", int, "seed of models, data and shuffling"),
    "--data": ("data", str, "JSONL path, 'sample' or 'synth'"),
    "--power": ("power", str, "platform[:PATH] | file:PATH | constant:W | affine:A,B | auto"),
    "--out": ("out", str, "output directory"),
    "--n-layers": ("n_layers", int, "decoder layers"),
    "--d-model": ("d_model", int, "hidden size"),
    "--n-heads": ("n_heads", int, "attention heads"),
    "--d-ff": ("d_ff", int, "MLP width"),
    "--lr": ("lr", float, "AdamW learning rate"),
    "--window": ("window", int, "sliding window tokens"),
    "--n-buckets": ("n_buckets", int, "LSH buckets"),
    "--n-rounds": ("n_rounds", int, "LSH hashing rounds"),
    "--n-kv-heads": ("n_kv_heads", int, "GQA key/value heads"),
    "--latent-dim": ("latent_dim", int, "MLA latent size"),
    "--tile": ("tile", int, "flash tile size"),
    "--sample-period": ("sample_period", float, "power sampling period in seconds"),
    "--inference-repeats": ("inference_repeats", int, "timed inference calls"),
    "--synth-docs": ("synth_docs", int, "documents in the synthetic corpus"),
}


class _UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    for flag, (dest, kind, help_text) in RUN_OPTIONS.items():
        parser.add_argument(flag, dest=dest, type=kind, default=None, help=help_text)
    parser.add_argument("--config", default=None, help="JSON or key=value file overriding flags")
    parser.add_argument(
        "--save-checkpoints",
        dest="save_checkpoints",
        action="store_const",
        const=True,
        default=None,
        help="write a checkpoint per variant",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="attention-bench",
        description="Train and measure eight self-attention variants in one small GPT-2.",
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--quiet", action="store_true", help="no progress bars, warnings only")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    run = commands.add_parser("run", help="run the full benchmark")
    run.add_argument("--variants", default=None, help=f"comma list of {', '.join(VARIANTS)}")
    _add_run_options(run)

    single = commands.add_parser("single", help="run one variant")
    single.add_argument("variant", help="one of " + ", ".join(VARIANTS))
    _add_run_options(single)

    verify = commands.add_parser("verify", help="run the invariant suite")
    verify.add_argument(
        "--groups", default=None, help=f"comma list of {', '.join(CHECKS)} (default: all)"
    )

    report = commands.add_parser("report", help="re-emit tables from a saved report")
    report.add_argument("report", help="path of report.json")
    report.add_argument("--out", default=None, help="output directory (default: next to the report)")
    return parser


def _configure_logging(level: Optional[str], quiet: bool) -> None:
    level = level or os.environ.get("ATTN_BENCH_LOG_LEVEL", "INFO")
    if quiet:
        level = "WARNING"
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _run(args: argparse.Namespace, explicit: List[str]) -> int:
    flags = {dest: getattr(args, dest) for dest, _, _ in RUN_OPTIONS.values()}
    flags["save_checkpoints"] = args.save_checkpoints
    if args.command == "single":
        flags["variants"] = args.variant
        explicit = explicit + ["variants"]
    else:
        flags["variants"] = args.variants
    settings = resolve_settings(flags, set(explicit), args.config)
    spec = RunSpec.from_settings(settings, show_progress=not args.quiet)
    report = run_benchmark(spec)
    print(f"Report written to {Path(spec.out_dir) / 'report.json'}")
    return EXIT_OK if report.exit_status == 0 else EXIT_FAILURE


def _verify(args: argparse.Namespace) -> int:
    groups = None
    if args.groups:
        groups = [g.strip() for g in args.groups.split(",") if g.strip()]
        unknown = [g for g in groups if g not in CHECKS]
        if unknown:
            raise ConfigError(f"Unknown check groups {unknown}. Valid groups: {', '.join(CHECKS)}.")
    results = run_verification(groups)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def _explicit_keys(argv: Sequence[str]) -> List[str]:
    keys = []
    for token in argv:
        if token.startswith("--"):
            keys.append(token[2:].split("=", 1)[0].replace("-", "_"))
    return keys


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    _configure_logging(args.log_level, args.quiet)

    try:
        if args.command in ("run", "single"):
            return _run(args, _explicit_keys(argv))
        if args.command == "verify":
            return _verify(args)
        paths = regenerate(args.report, args.out)
        print("\n".join(str(p) for p in paths))
        return EXIT_OK
    except ConfigError as exc:
        print(f"attention-bench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AttentionBenchError, OSError, ValueError, KeyError) as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE


def main() -> None:
    load_dotenv()
    sys.exit(cli())
