import logging
import os

from dotenv import load_dotenv

from attention_bench import RunSpec, run_benchmark
from attention_bench.harness import rank_variants

load_dotenv()


def main():
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    spec = RunSpec(
        n_layers=2,
        d_model=64,
        n_heads=4,
        d_ff=256,
        variants=["baseline", "linear", "mla"],
        epochs=2,
        batches_per_epoch=8,
        batch_size=8,
        seq_len=64,
        data="sample",
        power=os.getenv("ATTN_BENCH_POWER", "auto"),
        out_dir="example_out",
    )
    report = run_benchmark(spec)

    print("Environment:")
    print(report.environment)

    for key in ("wall_time", "total_energy", "flops", "peak_bytes"):
        print(f"Ranking by {key}:")
        print(
            *[
                f"  {position}. {entry.variant}: {entry.value}"
                for position, entry in enumerate(rank_variants(report, key), start=1)
            ],
            sep="\n",
        )

    print(f"Tables and summary written to {spec.out_dir}")


if __name__ == "__main__":
    main()
