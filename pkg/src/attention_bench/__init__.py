from attention_bench.attention import VARIANTS, AttentionSpec, attend, attention_flops_analytic
from attention_bench.model import ModelConfig, forward, init_model, train_step
from attention_bench.harness import RunReport, RunSpec, run_benchmark
from attention_bench.verification import run_verification
