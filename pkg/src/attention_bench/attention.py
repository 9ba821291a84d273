"""The eight self-attention mechanisms behind one interface.

Every ``attend_*`` function takes hidden states ``x`` of shape
``(batch, n, d_model)``, an :class:`AttentionSpec` and the matching
:class:`AttentionWeights`, and returns a tensor of the same shape. All of them
are causal: output position ``t`` only depends on input positions ``<= t``.

The token-mixing part of each variant (everything between the input and output
projections) runs inside the ``attention_core`` FLOP scope, and its
sequence-length-squared buffers are tagged ``scores`` in the allocation tracker.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from attention_bench import tensor_core as tc
from attention_bench.exceptions import ConfigError, DimensionError
from attention_bench.tensor_core import Tensor

logger = logging.getLogger(__name__)

VARIANTS = (
    "baseline",
    "sdpa",
    "gqa",
    "linear",
    "sliding_window",
    "lsh",
    "flash",
    "mla",
)

MASK_VALUE = -1e9
LINEAR_EPS = 1e-6
SCORES_TAG = "scores"
CORE_SCOPE = "attention_core"


def check_variant(name: str) -> str:
    """Return ``name`` if it is one of the eight variants.

    Raises:
        ConfigError: Listing the valid names otherwise.
    """
    if name not in VARIANTS:
        raise ConfigError(
            f"Unknown attention variant '{name}'. Valid variants: {', '.join(VARIANTS)}."
        )
    return name


@dataclass(frozen=True)
class AttentionSpec:
    """Variant tag plus every variant hyperparameter.

    Fields that do not apply to the variant are carried but ignored. ``n_kv_heads``
    defaults to ``n_heads`` and ``latent_dim`` to ``n_heads * head_dim // 2``.

    Raises:
        ConfigError: If any field violates its invariant.
    """

    variant: str
    n_heads: int
    head_dim: int
    n_kv_heads: Optional[int] = None
    window: int = 32
    n_buckets: int = 4
    n_rounds: int = 2
    latent_dim: Optional[int] = None
    feature_map: str = "relu_plus_one"
    tile_q: int = 64
    tile_kv: int = 64
    causal: bool = True

    def __post_init__(self):
        check_variant(self.variant)
        if self.n_kv_heads is None:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        if self.latent_dim is None:
            object.__setattr__(self, "latent_dim", max(1, self.n_heads * self.head_dim // 2))
        for name in ("n_heads", "head_dim", "n_kv_heads", "window", "n_rounds", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}.")
        if self.tile_q < 1 or self.tile_kv < 1:
            raise ConfigError("Flash tile sizes must be positive.")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_kv_heads={self.n_kv_heads} must divide n_heads={self.n_heads}."
            )
        if self.latent_dim > 2 * self.inner_dim:
            raise ConfigError(
                f"latent_dim={self.latent_dim} exceeds 2 * n_heads * head_dim = {2 * self.inner_dim}."
            )
        if self.n_buckets < 1 or (self.n_buckets > 1 and self.n_buckets % 2):
            raise ConfigError(
                f"n_buckets must be 1 or an even number, got {self.n_buckets}."
            )
        if self.n_buckets // 2 > self.head_dim:
            raise ConfigError(
                f"n_buckets / 2 = {self.n_buckets // 2} rotation columns exceed head_dim={self.head_dim}."
            )
        if self.feature_map != "relu_plus_one":
            raise ConfigError("The only supported feature map is 'relu_plus_one'.")
        if not self.causal:
            raise ConfigError("Only causal attention is supported.")

    @property
    def inner_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def d_model(self) -> int:
        return self.inner_dim

    def replace(self, **changes) -> "AttentionSpec":
        values = asdict(self)
        values.update(changes)
        return AttentionSpec(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "AttentionSpec":
        return cls(**values)


@dataclass
class AttentionWeights:
    """Projection matrices of one attention block.

    ``params`` are trained; ``buffers`` (the LSH rotations) are fixed.
    """

    params: Dict[str, Tensor]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def projection_shapes(spec: AttentionSpec, d_model: int) -> Dict[str, tuple]:
    """Shapes of the trainable matrices of ``spec``, in initialization order."""
    inner = spec.inner_dim
    if spec.variant == "baseline":
        return {"w_qkv": (d_model, 3 * inner), "w_o": (inner, d_model)}
    if spec.variant == "gqa":
        kv_inner = spec.n_kv_heads * spec.head_dim
        return {
            "w_q": (d_model, inner),
            "w_k": (d_model, kv_inner),
            "w_v": (d_model, kv_inner),
            "w_o": (inner, d_model),
        }
    if spec.variant == "mla":
        return {
            "w_q": (d_model, inner),
            "w_dkv": (d_model, spec.latent_dim),
            "w_uk": (spec.latent_dim, inner),
            "w_uv": (spec.latent_dim, inner),
            "w_o": (inner, d_model),
        }
    return {
        "w_q": (d_model, inner),
        "w_k": (d_model, inner),
        "w_v": (d_model, inner),
        "w_o": (inner, d_model),
    }


def lsh_rotations(spec: AttentionSpec, rng: np.random.Generator) -> np.ndarray:
    """Seeded random rotations of shape ``(n_rounds, head_dim, n_buckets // 2)``.

    Drawn from a unit Gaussian and column-orthonormalized with a QR decomposition.
    """
    half = spec.n_buckets // 2
    rotations = np.zeros((spec.n_rounds, spec.head_dim, half))
    for r in range(spec.n_rounds):
        gaussian = rng.standard_normal((spec.head_dim, half))
        q, upper = np.linalg.qr(gaussian)
        rotations[r] = q * np.sign(np.diag(upper))
    return rotations


def init_attention_weights(
    spec: AttentionSpec, d_model: int, rng: np.random.Generator, std: float = 0.02
) -> AttentionWeights:
    """Draw the weights of one attention block from ``Normal(0, std)``.

    Args:
        spec (AttentionSpec): The variant and its hyperparameters.
        d_model (int): Width of the residual stream.
        rng (np.random.Generator): Source of randomness, consumed in a fixed order.
        std (float, optional): Standard deviation of the weights. Defaults to 0.02.

    Raises:
        ConfigError: If ``n_heads * head_dim`` differs from ``d_model``.

    Returns:
        AttentionWeights: Fresh trainable weights (and LSH rotations).
    """
    if spec.inner_dim != d_model:
        raise ConfigError(
            f"n_heads * head_dim = {spec.inner_dim} must equal d_model = {d_model}."
        )
    params = {
        name: Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)
        for name, shape in projection_shapes(spec, d_model).items()
    }
    buffers = {}
    if spec.variant == "lsh" and spec.n_buckets > 1:
        buffers["rotations"] = lsh_rotations(spec, rng)
    return AttentionWeights(params=params, buffers=buffers)


def _check_input(x: Tensor, spec: AttentionSpec) -> None:
    if x.ndim != 3:
        raise DimensionError(f"Attention input must be (batch, n, d_model), got {x.shape}.")
    if x.shape[1] < 1:
        raise DimensionError("Attention needs at least one token.")
    if x.shape[2] != spec.inner_dim:
        raise DimensionError(
            f"Attention input width {x.shape[2]} does not match n_heads * head_dim = {spec.inner_dim}."
        )


def _split_heads(t: Tensor, heads: int) -> Tensor:
    batch, n, width = t.shape
    return tc.permute(tc.reshape(t, (batch, n, heads, width // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    batch, heads, n, head_dim = t.shape
    return tc.reshape(tc.permute(t, (0, 2, 1, 3)), (batch, n, heads * head_dim))


def causal_mask(n: int) -> np.ndarray:
    """Additive ``(n, n)`` mask: 0 on and below the diagonal, ``MASK_VALUE`` above."""
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def dense_causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Masked scaled dot-product attention on per-head tensors ``(..., n, head_dim)``.

    Materializes the full ``n x n`` score matrix.
    """
    n, head_dim = q.shape[-2], q.shape[-1]
    with tc.alloc_tag(SCORES_TAG):
        scores = tc.matmul(q, tc.transpose_last2(k))
        scores = tc.scale(scores, 1.0 / math.sqrt(head_dim))
        scores = tc.add(scores, Tensor(causal_mask(n)))
        probs = tc.softmax_lastdim(scores)
    return tc.matmul(probs, v)


def linear_causal_attention(q: Tensor, k: Tensor, v: Tensor, eps: float = LINEAR_EPS) -> Tensor:
    """Causal linear attention with the ``relu(u) + 1`` feature map.

    Computes ``S_t = sum_{s<=t} phi(k_s) v_s^T`` and ``z_t = sum_{s<=t} phi(k_s)``
    as prefix sums, then ``O_t = phi(q_t)^T S_t / (phi(q_t)^T z_t + eps)``.
    """
    *lead, n, head_dim = q.shape
    phi_q = tc.add(tc.relu(q), 1.0)
    phi_k = tc.add(tc.relu(k), 1.0)
    with tc.alloc_tag(SCORES_TAG):
        outer = tc.matmul(
            tc.reshape(phi_k, (*lead, n, head_dim, 1)),
            tc.reshape(v, (*lead, n, 1, head_dim)),
        )
        state = tc.cumsum(outer, axis=-3)
        numerator = tc.matmul(tc.reshape(phi_q, (*lead, n, 1, head_dim)), state)
    numerator = tc.reshape(numerator, (*lead, n, head_dim))
    normalizer = tc.cumsum(phi_k, axis=-2)
    denominator = tc.reduce_sum(tc.mul(phi_q, normalizer), axis=-1, keepdims=True)
    denominator = tc.add(denominator, eps)
    return tc.div(numerator, denominator)


def _project(x: Tensor, w: Tensor) -> Tensor:
    return tc.matmul(x, w)


def _dense_variant(x: Tensor, spec: AttentionSpec, q: Tensor, k: Tensor, v: Tensor, weights: AttentionWeights) -> Tensor:
    with tc.flop_scope(CORE_SCOPE):
        mixed = _merge_heads(dense_causal_attention(q, k, v))
    return _project(mixed, weights["w_o"])


def _separate_qkv(x: Tensor, spec: AttentionSpec, weights: AttentionWeights):
    q = _split_heads(_project(x, weights["w_q"]), spec.n_heads)
    k = _split_heads(_project(x, weights["w_k"]), spec.n_heads)
    v = _split_heads(_project(x, weights["w_v"]), spec.n_heads)
    return q, k, v


def attend_baseline(x: Tensor, spec: AttentionSpec, weights: AttentionWeights) -> Tensor:
    """GPT-2 style attention: one fused QKV projection, masked softmax, output projection."""
    _check_input(x, spec)
    inner = spec.inner_dim
    qkv = _project(x, weights["w_qkv"])
    q = _split_heads(tc.slice_axis(qkv, 0, inner), spec.n_heads)
    k = _split_heads(tc.slice_axis(qkv, inner, 2 * inner), spec.n_heads)
    v = _split_heads(tc.slice_axis(qkv, 2 * inner, 3 * inner), spec.n_heads)
    return _dense_variant(x, spec, q, k, v, weights)


def attend_sdpa(x: Tensor, spec: AttentionSpec, weights: AttentionWeights) -> Tensor:
    """Textbook scaled dot-product attention with three separate projections."""
    _check_input(x, spec)
    q, k, v = _separate_qkv(x, spec, weights)
    return _dense_variant(x, spec, q, k, v, weights)


def kv_head_map(spec: AttentionSpec) -> np.ndarray:
    """KV head used by each query head: ``h // (n_heads / n_kv_heads)``."""
    group = spec.n_heads // spec.n_kv_heads
    return np.arange(spec.n_heads) // group


def attend_gqa(x: Tensor, spec: AttentionSpec, weights: AttentionWeights) -> Tensor:
    """Grouped query attention: groups of query heads share one key/value head."""
    _check_input(x, spec)
    q = _split_heads(_project(x, weights["w_q"]), spec.n_heads)
    k = _split_heads(_project(x, weights["w_k"]), spec.n_kv_heads)
    v = _split_heads(_project(x, weights["w_v"]), spec.n_kv_heads)
    head_map = kv_head_map(spec)
    k = tc.take(k, head_map, axis=1)
    v = tc.take(v, head_map, axis=1)
    return _dense_variant(x, spec, q, k, v, weights)


def attend_linear(x: Tensor, spec: AttentionSpec, weights: AttentionWeights) -> Tensor:
    """Linear attention, cost linear in the sequence length."""
    _check_input(x, spec)
    q, k, v = _separate_qkv(x, spec, weights)
    with tc.flop_scope(CORE_SCOPE):
        mixed = _merge_heads(linear_causal_attention(q, k, v))
    return _project(mixed, weights["w_o"])


def sliding_window_attention(q: Tensor, k: Tensor, v: Tensor, window: int) -> Tensor:
    """Each position attends to itself and the ``window - 1`` positions before it.

    Keys and values are gathered into ``(..., n, window, head_dim)`` bands, so the
    cost is proportional to ``n * window``.
    """
    batch, heads, n, head_dim = q.shape
    width = min(window, n)
    positions = np.arange(n)[:, None] + np.arange(width)[None, :] - (width - 1)
    band_mask = np.where(positions >= 0, 0.0, MASK_VALUE)[:, None, :]
    positions = np.maximum(positions, 0)
    with tc.alloc_tag(SCORES_TAG):
        k_band = tc.take(k, positions, axis=2)
        v_band = tc.take(v, positions, axis=2)
        q_rows = tc.reshape(q, (batch, heads, n, 1, head_dim))
        scores = tc.matmul(q_rows, tc.transpose_last2(k_band))
        scores = tc.scale(scores, 1.0 / math.sqrt(head_dim))
        scores = tc.add(scores, Tensor(band_mask))
        probs = tc.softmax_lastdim(scores)
        mixed = tc.matmul(probs, v_band)
    return tc.reshape(mixed, (batch, heads, n, head_dim))


def attend_sliding_window(x: Tensor, spec: AttentionSpec, weights: AttentionWeights) -> Tensor:
    """Causal sliding-window attention over ``spec.window`` tokens including self."""
    _check_input(x, spec)
    q, k, v = _separate_qkv(x, spec, weights)
    with tc.flop_scope(CORE_SCOPE):
        mixed = _merge_heads(sliding_window_attention(q, k, v, spec.window))
    return _project(mixed, weights["w_o"])


def lsh_bucket_ids(k: Tensor, rotation: Optional[np.ndarray], n_buckets: int) -> np.ndarray:
    """Bucket of every key: ``argmax([R k; -R k])``, all zeros for a single bucket.

    Args:
        k (Tensor): Keys of shape ``(batch, heads, n, head_dim)``.
        rotation (Optional[np.ndarray]): ``(head_dim, n_buckets // 2)`` rotation.
        n_buckets (int): Number of buckets.

    Returns:
        np.ndarray: Integer bucket ids of shape ``(batch, heads, n)``.
    """
    if n_buckets == 1:
        return np.zeros(k.shape[:-1], dtype=np.int64)
    with tc.no_grad():
        rotated = tc.matmul(tc.detach(k), Tensor(rotation))
        logits = tc.concat_lastdim([rotated, tc.scale(rotated, -1.0)])
        return tc.argmax_lastdim(logits)


def _bucket_layout(buckets: np.ndarray, n_buckets: int):
    """Sort positions by (bucket, index) and lay buckets out in padded slots."""
    batch, heads, n = buckets.shape
    keys = buckets * n + np.arange(n)
    order = np.argsort(keys, axis=-1, kind="stable")
    counts = (buckets[..., None] == np.arange(n_buckets)).sum(axis=-2)
    capacity = int(counts.max())
    starts = np.cumsum(counts, axis=-1) - counts
    slots = np.arange(capacity)
    valid = slots < counts[..., None]
    sorted_index = np.where(valid, starts[..., None] + slots, 0)
    gather = np.take_along_axis(order, sorted_index.reshape(batch, heads, -1), axis=-1)
    rank = np.argsort(order, axis=-1, kind="stable")
    own_start = np.take_along_axis(starts, buckets, axis=-1)
    scatter = buckets * capacity + (rank - own_start)
    return gather, valid, scatter, capacity


def lsh_attention(
    q: Tensor, k: Tensor, v: Tensor, rotations: Optional[np.ndarray], n_buckets: int, n_rounds: int
) -> Tensor:
    """Causal attention restricted to pairs that share an LSH bucket, averaged over rounds.

    Buckets are laid out in padded slots of capacity ``max bucket occupancy``;
    within a bucket positions keep their original order, so the causal mask is
    lower-triangular in slot order.
    """
    batch, heads, n, head_dim = q.shape
    inst = tc.current_instrumentation()
    capacities: List[int] = []
    total = None
    for r in range(n_rounds):
        rotation = rotations[r] if rotations is not None else None
        buckets = lsh_bucket_ids(k, rotation, n_buckets)
        gather, valid, scatter, capacity = _bucket_layout(buckets, n_buckets)
        capacities.append(capacity)
        tril = np.tril(np.ones((capacity, capacity), dtype=bool))
        mask = np.where(valid[..., None, :] & tril, 0.0, MASK_VALUE)
        index = gather[..., None]
        shape = (batch, heads, n_buckets, capacity, head_dim)
        with tc.alloc_tag(SCORES_TAG):
            q_b = tc.reshape(tc.take_along_axis(q, index, axis=2), shape)
            k_b = tc.reshape(tc.take_along_axis(k, index, axis=2), shape)
            v_b = tc.reshape(tc.take_along_axis(v, index, axis=2), shape)
            scores = tc.matmul(q_b, tc.transpose_last2(k_b))
            scores = tc.scale(scores, 1.0 / math.sqrt(head_dim))
            scores = tc.add(scores, Tensor(mask))
            probs = tc.softmax_lastdim(scores)
            mixed = tc.matmul(probs, v_b)
        mixed = tc.reshape(mixed, (batch, heads, n_buckets * capacity, head_dim))
        out = tc.take_along_axis(mixed, scatter[..., None], axis=2)
        total = out if total is None else tc.add(total, out)
    if n_rounds > 1:
        total = tc.scale(total, 1.0 / n_rounds)
    if inst is not None:
        inst.notes["lsh_bucket_capacity"] = capacities
    return total


def attend_lsh(x: Tensor, spec: AttentionSpec, weights: AttentionWeights) -> Tensor:
    """LSH attention: random-rotation hashing of keys, attention within buckets."""
    _check_input(x, spec)
    q, k, v = _separate_qkv(x, spec, weights)
    with tc.flop_scope(CORE_SCOPE):
        mixed = _merge_heads(
            lsh_attention(
                q, k, v, weights.buffers.get("rotations"), spec.n_buckets, spec.n_rounds
            )
        )
    return _project(mixed, weights["w_o"])


def _tile_mask(q_start: int, q_stop: int, k_start: int, k_stop: int) -> np.ndarray:
    rows = np.arange(q_start, q_stop)[:, None]
    cols = np.arange(k_start, k_stop)[None, :]
    return np.where(cols > rows, MASK_VALUE, 0.0)


def flash_attention(q: Tensor, k: Tensor, v: Tensor, tile_q: int, tile_kv: int) -> Tensor:
    """Exact causal attention by tiled online softmax.

    Keeps a running row maximum ``m``, running denominator ``l`` and an output
    accumulator rescaled per key tile, so only ``tile_q x tile_kv`` scores are
    alive at a time. The backward pass recomputes tile scores from the saved
    log-sum-exp instead of storing probabilities.

    Args:
        q (Tensor): Queries ``(batch, heads, n, head_dim)``.
        k (Tensor): Keys, same shape.
        v (Tensor): Values, same shape.
        tile_q (int): Query rows per tile.
        tile_kv (int): Key columns per tile.

    Returns:
        Tensor: Attention output ``(batch, heads, n, head_dim)``.
    """
    batch, heads, n, head_dim = q.shape
    qd, kd, vd = q.data, k.data, v.data
    factor = 1.0 / math.sqrt(head_dim)
    lanes = batch * heads
    itemsize = qd.dtype.itemsize
    out = np.empty_like(qd)
    lse = np.empty(qd.shape[:-1], dtype=qd.dtype)

    for qs in range(0, n, tile_q):
        qe = min(n, qs + tile_q)
        rows = qe - qs
        q_tile = qd[..., qs:qe, :]
        m = np.full((batch, heads, rows), -np.inf, dtype=qd.dtype)
        l = np.zeros((batch, heads, rows), dtype=qd.dtype)
        acc = np.zeros((batch, heads, rows, head_dim), dtype=qd.dtype)
        for ks in range(0, n, tile_kv):
            ke = min(n, ks + tile_kv)
            cols = ke - ks
            with tc.scratch(2 * lanes * rows * cols * itemsize, SCORES_TAG):
                s = np.matmul(q_tile, np.swapaxes(kd[..., ks:ke, :], -1, -2)) * factor
                s = s + _tile_mask(qs, qe, ks, ke)
                m_new = np.maximum(m, s.max(axis=-1))
                p = np.exp(s - m_new[..., None])
                alpha = np.exp(m - m_new)
                l = alpha * l + p.sum(axis=-1)
                acc = acc * alpha[..., None] + np.matmul(p, vd[..., ks:ke, :])
                m = m_new
            tile = lanes * rows * cols
            tc.count_flops("matmul", 4 * tile * head_dim)
            tc.count_flops("elementwise", 2 * tile + lanes * rows * (5 + 2 * head_dim))
            tc.count_flops("softmax", 5 * tile)
        out[..., qs:qe, :] = acc / l[..., None]
        lse[..., qs:qe] = m + np.log(l)
    tc.count_flops("softmax", lanes * n * head_dim)
    tc.count_flops("elementwise", lanes * n)

    def _backward(grad, out_data):
        dq, dk, dv = np.zeros_like(qd), np.zeros_like(kd), np.zeros_like(vd)
        delta = (grad * out_data).sum(axis=-1)
        tc.count_flops("elementwise", 2 * lanes * n * head_dim)
        for qs in range(0, n, tile_q):
            qe = min(n, qs + tile_q)
            rows = qe - qs
            q_tile, g_tile = qd[..., qs:qe, :], grad[..., qs:qe, :]
            for ks in range(0, n, tile_kv):
                ke = min(n, ks + tile_kv)
                cols = ke - ks
                k_tile, v_tile = kd[..., ks:ke, :], vd[..., ks:ke, :]
                with tc.scratch(3 * lanes * rows * cols * itemsize, SCORES_TAG):
                    s = np.matmul(q_tile, np.swapaxes(k_tile, -1, -2)) * factor
                    s = s + _tile_mask(qs, qe, ks, ke)
                    p = np.exp(s - lse[..., qs:qe, None])
                    dv[..., ks:ke, :] += np.matmul(np.swapaxes(p, -1, -2), g_tile)
                    dp = np.matmul(g_tile, np.swapaxes(v_tile, -1, -2))
                    ds = p * (dp - delta[..., qs:qe, None]) * factor
                    dq[..., qs:qe, :] += np.matmul(ds, k_tile)
                    dk[..., ks:ke, :] += np.matmul(np.swapaxes(ds, -1, -2), q_tile)
                tile = lanes * rows * cols
                tc.count_flops("matmul", 10 * tile * head_dim)
                tc.count_flops("elementwise", 5 * tile)
                tc.count_flops("softmax", 2 * tile)
        return (
            dq if q.requires_grad else None,
            dk if k.requires_grad else None,
            dv if v.requires_grad else None,
        )

    return tc.fused(out, (q, k, v), _backward, "flash_attention")


def attend_flash(x: Tensor, spec: AttentionSpec, weights: AttentionWeights) -> Tensor:
    """Flash attention: same result as baseline, tiled online-softmax schedule."""
    _check_input(x, spec)
    q, k, v = _separate_qkv(x, spec, weights)
    with tc.flop_scope(CORE_SCOPE):
        mixed = _merge_heads(flash_attention(q, k, v, spec.tile_q, spec.tile_kv))
    return _project(mixed, weights["w_o"])


def attend_mla(x: Tensor, spec: AttentionSpec, weights: AttentionWeights) -> Tensor:
    """Multi-head latent attention: keys and values decoded from a shared latent."""
    _check_input(x, spec)
    q = _split_heads(_project(x, weights["w_q"]), spec.n_heads)
    latent = _project(x, weights["w_dkv"])
    k = _split_heads(_project(latent, weights["w_uk"]), spec.n_heads)
    v = _split_heads(_project(latent, weights["w_uv"]), spec.n_heads)
    return _dense_variant(x, spec, q, k, v, weights)


ATTENTION_FUNCTIONS: Dict[str, Callable[[Tensor, AttentionSpec, AttentionWeights], Tensor]] = {
    "baseline": attend_baseline,
    "sdpa": attend_sdpa,
    "gqa": attend_gqa,
    "linear": attend_linear,
    "sliding_window": attend_sliding_window,
    "lsh": attend_lsh,
    "flash": attend_flash,
    "mla": attend_mla,
}


def attend(x: Tensor, spec: AttentionSpec, weights: AttentionWeights) -> Tensor:
    """Dispatch to the ``attend_*`` function of ``spec.variant``."""
    return ATTENTION_FUNCTIONS[spec.variant](x, spec, weights)


def kv_cache_bytes_per_token(spec: AttentionSpec, bytes_per_element: int = 4) -> int:
    """Bytes a decoder would cache per past token for this variant.

    Linear attention keeps a fixed-size recurrent state instead, so it reports 0.
    """
    if spec.variant == "mla":
        return spec.latent_dim * bytes_per_element
    if spec.variant == "gqa":
        return 2 * spec.n_kv_heads * spec.head_dim * bytes_per_element
    if spec.variant == "linear":
        return 0
    return 2 * spec.inner_dim * bytes_per_element


def attention_flops_analytic(
    spec: AttentionSpec,
    n: int,
    batch: int = 1,
    include_projections: bool = True,
    bucket_capacity: Optional[Union[int, Sequence[int]]] = None,
) -> int:
    """Closed-form forward FLOPs of one attention block under the cost table.

    With ``d = n_heads * head_dim`` and ``h = n_heads``, per sequence:

    * projections: ``8nd^2`` (gqa: ``4nd^2 + 4nd*kv*head_dim``,
      mla: ``4nd^2 + 6nd*latent``)
    * baseline, sdpa, gqa, mla, flash core: ``4n^2 d + 7hn^2``
    * sliding window core (``w = min(window, n)``): ``4nwd + 7hnw``
    * linear core: ``5nd*head_dim + 8nd + nh``
    * lsh core per round with capacity ``M``: ``4hbM^2 head_dim + 7hbM^2`` plus
      hashing ``nd*b + 1.5*n*h*b`` when ``b = n_buckets > 1``; rounds are
      averaged at ``nd`` per extra round plus ``nd`` for the final scale.

    Flash is charged the baseline count; its instrumented count adds the online
    rescaling, which stays within 2% for tiles of 16 or more.

    Args:
        spec (AttentionSpec): Variant and hyperparameters.
        n (int): Sequence length.
        batch (int, optional): Number of sequences. Defaults to 1.
        include_projections (bool, optional): Add the projection matmuls. Defaults to True.
        bucket_capacity (Optional[Union[int, Sequence[int]]], optional): LSH slots per
            bucket, one value or one per round. Defaults to ``ceil(n / n_buckets)``.

    Returns:
        int: Expected FLOP count.
    """
    d = spec.inner_dim
    h = spec.n_heads
    hd = spec.head_dim
    variant = spec.variant

    projections = 8 * n * d * d
    if variant == "gqa":
        projections = 4 * n * d * d + 4 * n * d * spec.n_kv_heads * hd
    elif variant == "mla":
        projections = 4 * n * d * d + 6 * n * d * spec.latent_dim

    if variant == "linear":
        core = 5 * n * d * hd + 8 * n * d + n * h
    elif variant == "sliding_window":
        w = min(spec.window, n)
        core = 4 * n * w * d + 7 * h * n * w
    elif variant == "lsh":
        buckets = spec.n_buckets
        if bucket_capacity is None:
            bucket_capacity = math.ceil(n / buckets)
        if isinstance(bucket_capacity, int):
            capacities = [bucket_capacity] * spec.n_rounds
        else:
            capacities = list(bucket_capacity)
        core = 0
        for m in capacities:
            core += 4 * h * buckets * m * m * hd + 7 * h * buckets * m * m
            if buckets > 1:
                core += n * d * buckets + h * n * (buckets // 2) + h * n * buckets
        if spec.n_rounds > 1:
            core += (spec.n_rounds - 1) * n * d + n * d
    else:
        core = 4 * n * n * d + 7 * h * n * n

    total = core + (projections if include_projections else 0)
    return int(total * batch)


def _canonical_projections(weights: AttentionWeights, spec: AttentionSpec) -> Dict[str, np.ndarray]:
    if spec.variant == "baseline":
        w_q, w_k, w_v = np.split(weights["w_qkv"].data, 3, axis=1)
        return {"w_q": w_q, "w_k": w_k, "w_v": w_v, "w_o": weights["w_o"].data}
    if spec.variant == "mla":
        raise ConfigError("MLA weights cannot be converted back to separate projections.")
    if spec.variant == "gqa" and spec.n_kv_heads != spec.n_heads:
        raise ConfigError("Grouped weights convert only when n_kv_heads == n_heads.")
    return {name: weights[name].data for name in ("w_q", "w_k", "w_v", "w_o")}


def equivalent_weights(
    weights: AttentionWeights,
    source: AttentionSpec,
    target: AttentionSpec,
    rng: Optional[np.random.Generator] = None,
) -> AttentionWeights:
    """Re-express ``weights`` of ``source`` for ``target`` with identical mathematics.

    Covers fused/separate QKV projections, ungrouped GQA and the stacked MLA
    factorization (``latent_dim = 2 * n_heads * head_dim``, ``W_dkv = [Wk | Wv]``,
    ``W_uk``/``W_uv`` selecting the two halves).

    Args:
        weights (AttentionWeights): Weights of ``source``.
        source (AttentionSpec): Variant the weights belong to.
        target (AttentionSpec): Variant to convert to.
        rng (Optional[np.random.Generator], optional): Draws LSH rotations when the target needs them. Defaults to a generator seeded with 0.

    Raises:
        ConfigError: If no exact conversion exists.

    Returns:
        AttentionWeights: Weights for ``target``.
    """
    if source.inner_dim != target.inner_dim or source.n_heads != target.n_heads:
        raise ConfigError("Weights convert only between specs with equal head layout.")
    base = _canonical_projections(weights, source)
    if target.variant == "baseline":
        arrays = {
            "w_qkv": np.concatenate([base["w_q"], base["w_k"], base["w_v"]], axis=1),
            "w_o": base["w_o"],
        }
    elif target.variant == "gqa" and target.n_kv_heads != target.n_heads:
        raise ConfigError("Exact conversion to GQA needs n_kv_heads == n_heads.")
    elif target.variant == "mla":
        inner = target.inner_dim
        if target.latent_dim != 2 * inner:
            raise ConfigError("Exact conversion to MLA needs latent_dim == 2 * n_heads * head_dim.")
        eye, zero = np.eye(inner), np.zeros((inner, inner))
        arrays = {
            "w_q": base["w_q"],
            "w_dkv": np.concatenate([base["w_k"], base["w_v"]], axis=1),
            "w_uk": np.concatenate([eye, zero], axis=0),
            "w_uv": np.concatenate([zero, eye], axis=0),
            "w_o": base["w_o"],
        }
    else:
        arrays = dict(base)
    params = {name: Tensor(value, requires_grad=True) for name, value in arrays.items()}
    buffers = {}
    if target.variant == "lsh" and target.n_buckets > 1:
        buffers["rotations"] = lsh_rotations(target, rng or np.random.default_rng(0))
    return AttentionWeights(params=params, buffers=buffers)
