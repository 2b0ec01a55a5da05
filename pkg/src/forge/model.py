"""Decoder-only transformer: RMSNorm, SwiGLU, RoPE (with long-context
frequency interpolation), grouped-query attention, pre-norm residual stack.

All functions are pure over a parameter dict so the same code path serves
training (under a tape) and evaluation (tape-free). Shapes are per-sequence:
``forward`` maps T token ids to a T x vocab logit matrix; batching is a loop
at the call site, which is all desk-scale fixtures need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the production 11B layout."""

    n_layers: int = 50
    d_model: int = 4096
    n_heads: int = 32
    n_kv_heads: int = 8
    head_size: int = 128
    d_ff: int = 14336
    vocab_size: int = 32128
    rope_theta: float = 1e6
    native_ctx: int = 32768
    extended_ctx: int = 131072
    rmsnorm_eps: float = 1e-5

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if self.head_size % 2 != 0:
            raise ValueError(f"head_size must be even for rotary embedding, got {self.head_size}")
        if self.extended_ctx % self.native_ctx != 0:
            raise ValueError(
                f"extended_ctx ({self.extended_ctx}) must be a multiple of native_ctx ({self.native_ctx})"
            )
        for name in ("n_layers", "d_model", "d_ff", "vocab_size", "native_ctx"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def yarn_factor(self) -> int:
        return self.extended_ctx // self.native_ctx

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    """Named parameter tensors plus the config they instantiate."""

    config: ModelConfig
    params: dict[str, Tensor]
    format_version: int = 1


CHECKPOINT_FORMAT_VERSION = 1

_LAYER_SHAPES = {
    "attn_norm.g": lambda c: (c.d_model,),
    "attn.wq": lambda c: (c.d_model, c.n_heads * c.head_size),
    "attn.wk": lambda c: (c.d_model, c.n_kv_heads * c.head_size),
    "attn.wv": lambda c: (c.d_model, c.n_kv_heads * c.head_size),
    "attn.wo": lambda c: (c.n_heads * c.head_size, c.d_model),
    "ffn_norm.g": lambda c: (c.d_model,),
    "ffn.w_gate": lambda c: (c.d_model, c.d_ff),
    "ffn.w_up": lambda c: (c.d_model, c.d_ff),
    "ffn.w_down": lambda c: (c.d_ff, c.d_model),
}

_TOP_SHAPES = {
    "embed.tok": lambda c: (c.vocab_size, c.d_model),
    "final_norm.g": lambda c: (c.d_model,),
    "lm_head": lambda c: (c.d_model, c.vocab_size),
}


def expected_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """The exact parameter directory a config implies."""
    shapes = {name: fn(config) for name, fn in _TOP_SHAPES.items()}
    for i in range(config.n_layers):
        for suffix, fn in _LAYER_SHAPES.items():
            shapes[f"layers.{i}.{suffix}"] = fn(config)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form total parameter count (norm gains, projections, embeddings, head)."""
    c = config
    per_layer = (
        2 * c.d_model  # two norm gains
        + c.d_model * c.n_heads * c.head_size  # wq
        + 2 * c.d_model * c.n_kv_heads * c.head_size  # wk, wv
        + c.n_heads * c.head_size * c.d_model  # wo
        + 3 * c.d_model * c.d_ff  # gate, up, down
    )
    return 2 * c.vocab_size * c.d_model + c.d_model + c.n_layers * per_layer


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Checkpoint:
    """Fresh checkpoint: normal(0, 0.02) projections and embeddings, unit norm gains."""
    params: dict[str, Tensor] = {}
    for name, shape in expected_param_shapes(config).items():
        if name.endswith(".g"):
            data = np.ones(shape, dtype=dtype)
        else:
            data = (rng.standard_normal(shape) * 0.02).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return Checkpoint(config=config, params=params)


def validate_checkpoint(ckpt: Checkpoint) -> None:
    """Exact name/shape directory match and all-finite values, or ValueError."""
    expected = expected_param_shapes(ckpt.config)
    missing = sorted(set(expected) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(expected))
    if missing or extra:
        raise ValueError(f"checkpoint directory mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        got = ckpt.params[name].shape
        if tuple(got) != tuple(shape):
            raise ValueError(f"checkpoint tensor {name}: shape {got}, expected {shape}")
        if not np.all(np.isfinite(ckpt.params[name].data)):
            raise ValueError(f"checkpoint tensor {name} contains non-finite values")


# -- architectural pieces -------------------------------------------------------


def rms_norm(x: Tensor, g: Tensor, eps: float) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * g, mean over the last dimension."""
    if x.shape[-1] != g.shape[-1] or g.ndim != 1:
        raise T.ShapeError(f"rms_norm: feature dim {x.shape[-1]} vs gain shape {g.shape}")
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + eps).sqrt() * g


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """(silu(x W_gate) * (x W_up)) W_down."""
    return ((x @ w_gate).silu() * (x @ w_up)) @ w_down


@dataclass
class YarnParams:
    """NTK-by-parts frequency interpolation for context extension.

    factor: extension ratio (extended / native context).
    beta_fast / beta_slow: rotation-count thresholds bounding the ramp
    between pure extrapolation (high-frequency dims) and pure
    interpolation (low-frequency dims).
    """

    factor: float
    native_ctx: int
    beta_fast: float = 32.0
    beta_slow: float = 1.0


@dataclass
class RopeTables:
    """Pure-rotation cos/sin tables for a position list, plus the attention
    temperature multiplier (1.0 unless long-context interpolation is active)."""

    cos: np.ndarray  # (T, head_size/2)
    sin: np.ndarray  # (T, head_size/2)
    mscale: float = 1.0


def _correction_dim(n_rotations: float, head_size: int, theta: float, native_ctx: int) -> float:
    """Channel-pair index whose wavelength completes n_rotations over native_ctx."""
    return (head_size * math.log(native_ctx / (n_rotations * 2 * math.pi))) / (2 * math.log(theta))


def _ramp(low: float, high: float, n: int) -> np.ndarray:
    if low == high:
        high += 0.001  # avoid 0/0 when the band collapses
    ramp = (np.arange(n, dtype=np.float64) - low) / (high - low)
    return np.clip(ramp, 0.0, 1.0)


def rope_frequencies(
    head_size: int,
    theta: float,
    positions,
    yarn: YarnParams | None = None,
) -> RopeTables:
    """Rotation tables for the given positions.

    Base frequencies are theta^(-2i/head_size). With ``yarn`` set, each
    frequency is blended between its interpolated value (divided by the
    scale factor) and its original value: dims rotating at least beta_fast
    times over the native context keep their frequency, dims rotating at
    most beta_slow times are fully interpolated, and a linear ramp covers
    the band between. The logit temperature multiplier 0.1*ln(s)+1 is
    returned alongside; the tables themselves stay pure rotations.
    """
    if head_size % 2 != 0:
        raise ValueError(f"head_size must be even, got {head_size}")
    positions = np.asarray(positions, dtype=np.float64)
    half = head_size // 2
    inv_freq = theta ** (-2.0 * np.arange(half, dtype=np.float64) / head_size)
    mscale = 1.0
    if yarn is not None and yarn.factor != 1.0:
        low = math.floor(_correction_dim(yarn.beta_fast, head_size, theta, yarn.native_ctx))
        high = math.ceil(_correction_dim(yarn.beta_slow, head_size, theta, yarn.native_ctx))
        low, high = max(low, 0), min(high, half - 1)
        extrap_weight = 1.0 - _ramp(low, high, half)
        inv_freq = (inv_freq / yarn.factor) * (1.0 - extrap_weight) + inv_freq * extrap_weight
        mscale = 0.1 * math.log(yarn.factor) + 1.0
    angles = positions[:, None] * inv_freq[None, :]
    return RopeTables(cos=np.cos(angles), sin=np.sin(angles), mscale=mscale)


def apply_rope(q: Tensor, k: Tensor, tables: RopeTables) -> tuple[Tensor, Tensor]:
    """Rotate interleaved (even, odd) channel pairs of q and k by position.

    q and k have shape (..., T, head_size); tables cover exactly T positions.
    """
    half = tables.cos.shape[-1]
    for t in (q, k):
        if t.shape[-1] != 2 * half or t.shape[-2] != tables.cos.shape[0]:
            raise T.ShapeError(
                f"apply_rope: tensor shape {t.shape} vs tables {tables.cos.shape}"
            )
    dtype = q.dtype
    cos = tables.cos.astype(dtype)
    sin = tables.sin.astype(dtype)

    def rotate(x: Tensor) -> Tensor:
        even = x[..., 0::2]
        odd = x[..., 1::2]
        r_even = even * cos - odd * sin
        r_odd = even * sin + odd * cos
        # interleave back: (..., half, 2) -> (..., 2*half)
        stacked = T.concat(
            [r_even.reshape(*r_even.shape, 1), r_odd.reshape(*r_odd.shape, 1)], axis=-1
        )
        return stacked.reshape(*x.shape)

    return rotate(q), rotate(k)


def neg_inf_for(dtype) -> float:
    """Large negative logit standing in for -inf; keeps softmax gradients NaN-free."""
    return -1e30 if np.dtype(dtype) == np.float64 else -1e9


def gqa_attention(
    x: Tensor,
    weights: dict[str, Tensor],
    mask: np.ndarray,
    config: ModelConfig,
    tables: RopeTables | None = None,
) -> Tensor:
    """Grouped-query attention over one sequence.

    x: (T, d_model); weights holds wq/wk/wv/wo; mask is a (T, T) boolean
    where True marks attendable (key) positions and must never allow a
    future position. Each KV head serves n_heads/n_kv_heads query heads.
    Scores are scaled by mscale^2 / sqrt(head_size).
    """
    t_len, d = x.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (t_len, t_len):
        raise T.ShapeError(f"gqa_attention: mask shape {mask.shape}, expected {(t_len, t_len)}")
    if np.any(np.triu(mask, k=1)):
        raise ValueError("gqa_attention: mask allows attention to a future position")
    hs, nh, nkv = config.head_size, config.n_heads, config.n_kv_heads
    group = config.group_size

    q = (x @ weights["attn.wq"]).reshape(t_len, nh, hs).transpose(1, 0, 2)
    k = (x @ weights["attn.wk"]).reshape(t_len, nkv, hs).transpose(1, 0, 2)
    v = (x @ weights["attn.wv"]).reshape(t_len, nkv, hs).transpose(1, 0, 2)

    mscale = 1.0
    if tables is not None:
        q, k = apply_rope(q, k, tables)
        mscale = tables.mscale

    # group query heads over their shared KV head: (nkv, group, T, hs)
    q = q.reshape(nkv, group, t_len, hs)
    k_t = k.reshape(nkv, 1, t_len, hs).transpose(0, 1, 3, 2)
    scores = (q @ k_t) * (mscale * mscale / math.sqrt(hs))
    scores = T.where(mask, scores, Tensor(np.full_like(scores.data, neg_inf_for(scores.dtype))))
    attn = scores.softmax(axis=-1)
    out = attn @ v.reshape(nkv, 1, t_len, hs)  # (nkv, group, T, hs)
    out = out.transpose(2, 0, 1, 3).reshape(t_len, nh * hs)
    return out @ weights["attn.wo"]


def build_attention_mask(segment_ids: np.ndarray, dtype=bool) -> np.ndarray:
    """allow(i, j) iff same segment and j <= i."""
    seg = np.asarray(segment_ids)
    same = seg[:, None] == seg[None, :]
    causal = np.tril(np.ones((len(seg), len(seg)), dtype=bool))
    return (same & causal).astype(dtype)


def forward(
    ckpt: Checkpoint,
    tokens,
    segment_ids=None,
    positions=None,
    yarn: YarnParams | None = None,
) -> Tensor:
    """Logits (T, vocab) for one token sequence.

    Pre-norm residual stack: x += attn(norm(x)); x += ffn(norm(x)).
    The attention mask combines causality with segment equality, so packed
    sequences never attend across sample boundaries.
    """
    cfg = ckpt.config
    tokens = np.asarray(tokens, dtype=np.int64)
    t_len = len(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        bad = int(tokens.min()) if tokens.min() < 0 else int(tokens.max())
        raise ValueError(f"token id {bad} out of range for vocab of {cfg.vocab_size}")
    if segment_ids is None:
        segment_ids = np.zeros(t_len, dtype=np.int64)
    if positions is None:
        positions = np.arange(t_len)
    mask = build_attention_mask(segment_ids)
    tables = rope_frequencies(cfg.head_size, cfg.rope_theta, positions, yarn)

    p = ckpt.params
    x = T.embedding(p["embed.tok"], tokens)
    for i in range(cfg.n_layers):
        lw = {k: p[f"layers.{i}.{k}"] for k in _LAYER_SHAPES}
        h = rms_norm(x, lw["attn_norm.g"], cfg.rmsnorm_eps)
        x = x + gqa_attention(h, lw, mask, cfg, tables)
        h = rms_norm(x, lw["ffn_norm.g"], cfg.rmsnorm_eps)
        x = x + swiglu_ffn(h, lw["ffn.w_gate"], lw["ffn.w_up"], lw["ffn.w_down"])
    x = rms_norm(x, p["final_norm.g"], cfg.rmsnorm_eps)
    return x @ p["lm_head"]
