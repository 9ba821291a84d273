"""A miniature GPT-2 decoder with a pluggable attention block, AdamW and the step loops."""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from attention_bench import tensor_core as tc
from attention_bench.attention import (
    AttentionSpec,
    AttentionWeights,
    attend,
    init_attention_weights,
)
from attention_bench.data import PAD_ID, TokenBatch, next_token_targets
from attention_bench.exceptions import ConfigError, DataError, DimensionError
from attention_bench.profiler import StepMetrics
from attention_bench.tensor_core import Instrumentation, Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02
BYTES_PER_PARAMETER = 4
MAX_SEED = 2**64 - 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes of the decoder plus the attention variant it uses.

    Raises:
        ConfigError: If a size is not positive, ``d_ff < d_model``, or the
            attention heads do not tile ``d_model``.
    """

    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    attention: AttentionSpec
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}.")
        if self.d_ff < self.d_model:
            raise ConfigError(f"d_ff={self.d_ff} must be at least d_model={self.d_model}.")
        if self.attention.n_heads != self.n_heads:
            raise ConfigError(
                f"Attention uses {self.attention.n_heads} heads but the model has {self.n_heads}."
            )
        if self.attention.inner_dim != self.d_model:
            raise ConfigError(
                f"n_heads * head_dim = {self.attention.inner_dim} must equal d_model = {self.d_model}."
            )
        if not 0 <= self.seed <= MAX_SEED:
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed}.")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def with_variant(self, variant: str, **attention_changes) -> "ModelConfig":
        """Same architecture with another attention variant."""
        spec = self.attention.replace(variant=variant, **attention_changes)
        return ModelConfig(**{**self._fields(), "attention": spec})

    def _fields(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def to_dict(self) -> dict:
        values = self._fields()
        values["attention"] = self.attention.to_dict()
        return values

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        values = dict(values)
        values["attention"] = AttentionSpec.from_dict(values["attention"])
        return cls(**values)


@dataclass
class LayerState:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionWeights
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_fc: Tensor
    b_fc: Tensor
    w_proj: Tensor
    b_proj: Tensor

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.ln1.gain", self.ln1_gain
        yield f"{prefix}.ln1.bias", self.ln1_bias
        for name, tensor in self.attn.params.items():
            yield f"{prefix}.attn.{name}", tensor
        yield f"{prefix}.ln2.gain", self.ln2_gain
        yield f"{prefix}.ln2.bias", self.ln2_bias
        yield f"{prefix}.mlp.w_fc", self.w_fc
        yield f"{prefix}.mlp.b_fc", self.b_fc
        yield f"{prefix}.mlp.w_proj", self.w_proj
        yield f"{prefix}.mlp.b_proj", self.b_proj


@dataclass
class ModelState:
    """All parameters of the decoder; the output head reuses ``wte``."""

    config: ModelConfig
    wte: Tensor
    wpe: Tensor
    layers: List[LayerState]
    ln_f_gain: Tensor
    ln_f_bias: Tensor

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Every trainable tensor with a stable dotted name, in a fixed order."""
        named = [("wte", self.wte), ("wpe", self.wpe)]
        for index, layer in enumerate(self.layers):
            named.extend(layer.named_parameters(f"layers.{index}"))
        named.extend([("ln_f.gain", self.ln_f_gain), ("ln_f.bias", self.ln_f_bias)])
        return named

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        """Fixed, untrained arrays (LSH rotations)."""
        return [
            (f"layers.{index}.attn.{name}", value)
            for index, layer in enumerate(self.layers)
            for name, value in layer.attn.buffers.items()
        ]

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()


def _normal(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _constant(value: float, shape) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


def init_model(config: ModelConfig) -> ModelState:
    """Fresh parameters: weights from ``Normal(0, 0.02)``, biases 0, layernorm gains 1.

    The generator is seeded with ``config.seed`` and consumed in a fixed order,
    so equal configs give bitwise-equal states.
    """
    rng = np.random.default_rng(config.seed)
    d, ff = config.d_model, config.d_ff
    wte = _normal(rng, (config.vocab_size, d))
    wpe = _normal(rng, (config.max_seq_len, d))
    layers = []
    for _ in range(config.n_layers):
        attn = init_attention_weights(config.attention, d, rng, INIT_STD)
        layers.append(
            LayerState(
                ln1_gain=_constant(1.0, (d,)),
                ln1_bias=_constant(0.0, (d,)),
                attn=attn,
                ln2_gain=_constant(1.0, (d,)),
                ln2_bias=_constant(0.0, (d,)),
                w_fc=_normal(rng, (d, ff)),
                b_fc=_constant(0.0, (ff,)),
                w_proj=_normal(rng, (ff, d)),
                b_proj=_constant(0.0, (d,)),
            )
        )
    state = ModelState(
        config=config,
        wte=wte,
        wpe=wpe,
        layers=layers,
        ln_f_gain=_constant(1.0, (d,)),
        ln_f_bias=_constant(0.0, (d,)),
    )
    logger.debug(
        "Initialized %s model with %d parameters", config.attention.variant, state.num_parameters()
    )
    return state


def attention_parameter_count(spec: AttentionSpec, d_model: int) -> int:
    """Trainable attention parameters per layer."""
    d = d_model
    if spec.variant == "gqa":
        return 2 * d * d + 2 * d * spec.n_kv_heads * spec.head_dim
    if spec.variant == "mla":
        return 2 * d * d + d * spec.latent_dim + 2 * spec.latent_dim * d
    return 4 * d * d


def parameter_count_formula(config: ModelConfig) -> int:
    """Closed-form parameter count.

    ``V*d + T*d + L*(4d + A + 2*d*ff + ff + d) + 2d`` where ``A`` is
    :func:`attention_parameter_count`, ``V`` the vocabulary, ``T`` the maximum
    sequence length and ``L`` the number of layers.
    """
    d, ff = config.d_model, config.d_ff
    per_layer = 4 * d + attention_parameter_count(config.attention, d) + 2 * d * ff + ff + d
    return config.vocab_size * d + config.max_seq_len * d + config.n_layers * per_layer + 2 * d


def model_size_bytes(state: ModelState) -> int:
    """Parameter bytes at 4 bytes per parameter."""
    return state.num_parameters() * BYTES_PER_PARAMETER


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens.ids if isinstance(tokens, TokenBatch) else tokens, dtype=np.int64)
    if ids.ndim != 2:
        raise DimensionError(f"Token ids must be (batch, seq), got shape {ids.shape}.")
    if ids.shape[1] > config.max_seq_len:
        raise DimensionError(
            f"Sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}."
        )
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise DataError(f"Token id out of range for vocabulary {config.vocab_size}.")
    return ids


def _block(h: Tensor, layer: LayerState, spec: AttentionSpec) -> Tensor:
    attn_in = tc.layernorm(h, layer.ln1_gain, layer.ln1_bias)
    h = tc.add(h, attend(attn_in, spec, layer.attn))
    mlp = tc.layernorm(h, layer.ln2_gain, layer.ln2_bias)
    mlp = tc.gelu(tc.add(tc.matmul(mlp, layer.w_fc), layer.b_fc))
    mlp = tc.add(tc.matmul(mlp, layer.w_proj), layer.b_proj)
    return tc.add(h, mlp)


def forward(state: ModelState, tokens: Union[TokenBatch, np.ndarray]) -> Tensor:
    """Logits ``(batch, seq, vocab)`` of a pre-norm decoder with a tied output head.

    Raises:
        DimensionError: If the ids are not 2-d or longer than ``max_seq_len``.
        DataError: If an id is outside the vocabulary.
    """
    config = state.config
    ids = _check_tokens(config, tokens)
    seq = ids.shape[1]
    with tc.flop_scope("forward"):
        h = tc.add(
            tc.embedding_lookup(state.wte, ids),
            tc.embedding_lookup(state.wpe, np.arange(seq)),
        )
        for layer in state.layers:
            h = _block(h, layer, config.attention)
        h = tc.layernorm(h, state.ln_f_gain, state.ln_f_bias)
        return tc.matmul(h, tc.transpose_last2(state.wte))


def compute_loss(
    state: ModelState, tokens: Union[TokenBatch, np.ndarray], pad_id: int = PAD_ID
) -> Tensor:
    """Mean next-token cross-entropy; pad targets and the last position are ignored.

    Raises:
        DataError: If no position has a real target (an all-pad batch).
    """
    ids = _check_tokens(state.config, tokens)
    logits = forward(state, ids)
    return tc.cross_entropy(logits, next_token_targets(ids, pad_id), ignore_index=pad_id)


@dataclass
class OptimizerState:
    """AdamW hyperparameters and per-parameter moment buffers.

    Weight decay is decoupled and applies to matrices only (``ndim >= 2``).
    """

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    clip_norm: Optional[float] = 1.0
    step_count: int = 0
    first_moment: Dict[str, Tensor] = field(default_factory=dict)
    second_moment: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("lr and eps must be positive and weight_decay non-negative.")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}.")

    @classmethod
    def for_model(cls, state: ModelState, **hyperparameters) -> "OptimizerState":
        optimizer = cls(**hyperparameters)
        with tc.no_grad():
            for name, tensor in state.named_parameters():
                optimizer.first_moment[name] = Tensor(np.zeros(tensor.shape))
                optimizer.second_moment[name] = Tensor(np.zeros(tensor.shape))
        return optimizer

    def hyperparameters(self) -> dict:
        values = asdict(self)
        for key in ("first_moment", "second_moment", "step_count"):
            values.pop(key)
        return values


def clip_grad_norm(parameters: List[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns:
        float: The norm before clipping.
    """
    grads = [p.grad.data for p in parameters if p.grad is not None]
    squares = sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)
    tc.count_flops("elementwise", 2 * sum(g.size for g in grads))
    norm = float(np.sqrt(squares))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for g in grads:
            g *= factor
        tc.count_flops("elementwise", sum(g.size for g in grads))
    return norm


def adamw_update(state: ModelState, optimizer: OptimizerState) -> None:
    """One AdamW step over every parameter that received a gradient."""
    optimizer.step_count += 1
    t = optimizer.step_count
    b1, b2 = optimizer.beta1, optimizer.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, param in state.named_parameters():
        if param.grad is None:
            continue
        g = param.grad.data
        m = optimizer.first_moment[name].data
        v = optimizer.second_moment[name].data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if param.ndim >= 2 and optimizer.weight_decay:
            param.data -= optimizer.lr * optimizer.weight_decay * param.data
            tc.count_flops("elementwise", 2 * param.size)
        param.data -= optimizer.lr * (m / correction1) / (np.sqrt(v / correction2) + optimizer.eps)
        tc.count_flops("elementwise", 14 * param.size)


def _train_step(state, optimizer, ids, pad_id, inst: Instrumentation) -> StepMetrics:
    flops_before = inst.flops.total
    forward_before = inst.flops.by_scope.get("forward", 0)
    with inst.alloc.window() as window:
        start = time.perf_counter()
        state.zero_grad()
        loss = compute_loss(state, ids, pad_id)
        loss_value = loss.item()
        tc.backward(loss)
        del loss
        with tc.flop_scope("optimizer"):
            if optimizer.clip_norm is not None:
                clip_grad_norm(state.parameters(), optimizer.clip_norm)
            adamw_update(state, optimizer)
        wall = time.perf_counter() - start
    metrics = StepMetrics(
        step=optimizer.step_count,
        wall_seconds=wall,
        flops=inst.flops.total - flops_before,
        forward_flops=inst.flops.by_scope.get("forward", 0) - forward_before,
        peak_bytes=window.peak_bytes - window.start_bytes,
        loss=loss_value,
        tokens=int(ids.size),
    )
    logger.debug(
        "step %d loss %.4f flops %d wall %.4fs",
        metrics.step,
        metrics.loss,
        metrics.flops,
        metrics.wall_seconds,
    )
    return metrics


def train_step(
    state: ModelState,
    optimizer: OptimizerState,
    batch: Union[TokenBatch, np.ndarray],
    pad_id: Optional[int] = None,
) -> StepMetrics:
    """Forward, backward, gradient clipping and an AdamW update on one batch.

    FLOPs and peak bytes are read from the active :class:`Instrumentation`; a
    temporary one is used when none is active.

    Raises:
        DataError: If the batch has no real target.
    """
    if pad_id is None:
        pad_id = batch.pad_id if isinstance(batch, TokenBatch) else PAD_ID
    ids = _check_tokens(state.config, batch)
    inst = tc.current_instrumentation()
    if inst is not None:
        return _train_step(state, optimizer, ids, pad_id, inst)
    with Instrumentation() as inst:
        return _train_step(state, optimizer, ids, pad_id, inst)


def inference_forward(
    state: ModelState, batch: Union[TokenBatch, np.ndarray]
) -> Tuple[Tensor, float]:
    """Forward pass without graph recording; returns the logits and wall seconds."""
    with tc.no_grad():
        start = time.perf_counter()
        logits = forward(state, batch)
        return logits, time.perf_counter() - start


@dataclass
class InferenceTiming:
    median_seconds: float
    mad_seconds: float
    samples: List[float]


def time_inference(
    state: ModelState, batch: Union[TokenBatch, np.ndarray], repeats: int = 10
) -> InferenceTiming:
    """Median and median absolute deviation of ``repeats`` inference calls."""
    if repeats < 1:
        raise ConfigError(f"repeats must be at least 1, got {repeats}.")
    samples = [inference_forward(state, batch)[1] for _ in range(repeats)]
    median = float(np.median(samples))
    mad = float(np.median(np.abs(np.asarray(samples) - median)))
    return InferenceTiming(median, mad, samples)
