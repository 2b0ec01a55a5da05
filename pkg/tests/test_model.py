"""Transformer pieces vs hand values and independent numpy oracles."""

import math

import numpy as np
import pytest

from forge import tensor as T
from forge.model import (
    Checkpoint,
    ModelConfig,
    RopeTables,
    YarnParams,
    apply_rope,
    build_attention_mask,
    expected_param_shapes,
    forward,
    gqa_attention,
    init_params,
    param_count,
    rms_norm,
    rope_frequencies,
    swiglu_ffn,
    validate_checkpoint,
)
from forge.rng import named_rng
from forge.tensor import Graph, Tensor


def toy_config(**kw):
    base = dict(
        n_layers=2, d_model=8, n_heads=2, n_kv_heads=1, head_size=4,
        d_ff=16, vocab_size=11, rope_theta=10000.0, native_ctx=32,
        extended_ctx=128, rmsnorm_eps=1e-6,
    )
    base.update(kw)
    return ModelConfig(**base)


# -- rms_norm -------------------------------------------------------------------


def test_rms_norm_constant_vector():
    out = rms_norm(Tensor([2.0, 2.0]), Tensor([1.0, 1.0]), eps=0.0)
    np.testing.assert_allclose(out.numpy(), [1.0, 1.0], atol=1e-6)


def test_rms_norm_hand_value():
    out = rms_norm(Tensor([3.0, 4.0]), Tensor([1.0, 1.0]), eps=0.0)
    expected = np.array([3.0, 4.0]) / math.sqrt(12.5)
    np.testing.assert_allclose(out.numpy(), expected, rtol=1e-6)


def test_rms_norm_zero_input_finite():
    out = rms_norm(Tensor([0.0, 0.0]), Tensor([1.0, 1.0]), eps=1e-5)
    assert np.all(np.isfinite(out.numpy()))
    np.testing.assert_allclose(out.numpy(), [0.0, 0.0])


def test_rms_norm_dim_mismatch():
    with pytest.raises(T.ShapeError):
        rms_norm(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 1.0]), eps=0.0)


# -- swiglu ---------------------------------------------------------------------


def test_swiglu_zero_input():
    w = Tensor(np.ones((3, 5), dtype=np.float64))
    wd = Tensor(np.ones((5, 3), dtype=np.float64))
    out = swiglu_ffn(Tensor(np.zeros((2, 3), dtype=np.float64)), w, w, wd)
    np.testing.assert_allclose(out.numpy(), 0.0)


def test_swiglu_scalar_value():
    one = Tensor(np.ones((1, 1), dtype=np.float64))
    x = Tensor(np.array([[2.0]]))
    out = swiglu_ffn(x, one, one, one)
    expected = 2.0 / (1.0 + math.exp(-2.0)) * 2.0
    np.testing.assert_allclose(out.numpy(), [[expected]], rtol=1e-6)
    assert abs(expected - 3.5232) < 1e-4


def test_swiglu_gradient():
    rng = np.random.default_rng(0)
    p = {
        "x": Tensor(rng.standard_normal((3, 4)), requires_grad=True),
        "wg": Tensor(rng.standard_normal((4, 6)), requires_grad=True),
        "wu": Tensor(rng.standard_normal((4, 6)), requires_grad=True),
        "wd": Tensor(rng.standard_normal((6, 4)), requires_grad=True),
    }
    err = T.gradient_check(lambda q: swiglu_ffn(q["x"], q["wg"], q["wu"], q["wd"]).sum(), p)
    assert err < 1e-4


# -- rope -----------------------------------------------------------------------


def test_rope_position_zero_identity_tables():
    tables = rope_frequencies(8, 10000.0, [0])
    np.testing.assert_allclose(tables.cos, 1.0)
    np.testing.assert_allclose(tables.sin, 0.0)
    assert tables.mscale == 1.0


def test_rope_angles_hand_values():
    tables = rope_frequencies(4, 10000.0, [1])
    angles = np.arctan2(tables.sin, tables.cos)
    np.testing.assert_allclose(angles[0], [1.0, 0.01], rtol=1e-9)


def test_rope_odd_head_size_rejected():
    with pytest.raises(ValueError):
        rope_frequencies(5, 10000.0, [0])


def test_rope_apply_identity_at_zero():
    rng = np.random.default_rng(1)
    q = Tensor(rng.standard_normal((1, 8)))
    k = Tensor(rng.standard_normal((1, 8)))
    tables = rope_frequencies(8, 10000.0, [0])
    rq, rk = apply_rope(q, k, tables)
    np.testing.assert_allclose(rq.numpy(), q.numpy(), atol=1e-12)
    np.testing.assert_allclose(rk.numpy(), k.numpy(), atol=1e-12)


def test_rope_preserves_pair_norms():
    rng = np.random.default_rng(2)
    q = Tensor(rng.standard_normal((5, 8)))
    tables = rope_frequencies(8, 10000.0, np.arange(5))
    rq, _ = apply_rope(q, q, tables)
    before = q.numpy().reshape(5, 4, 2)
    after = rq.numpy().reshape(5, 4, 2)
    np.testing.assert_allclose(
        np.linalg.norm(before, axis=-1), np.linalg.norm(after, axis=-1), rtol=1e-6
    )


def test_rope_relative_offsets():
    """q.k after rotation depends only on the position difference."""
    rng = np.random.default_rng(3)
    hs = 8
    worst = 0.0
    for _ in range(100):
        q = rng.standard_normal(hs)
        k = rng.standard_normal(hs)
        p1, p2 = rng.integers(0, 500, size=2)
        shift = int(rng.integers(0, 500))

        def rotated_dot(a, b, pa, pb):
            tables = rope_frequencies(hs, 10000.0, [pa, pb])
            ra, rb = apply_rope(
                Tensor(np.stack([a, a])), Tensor(np.stack([b, b])), tables
            )
            return float(np.dot(ra.numpy()[0], rb.numpy()[1]))

        d1 = rotated_dot(q, k, p1, p2)
        d2 = rotated_dot(q, k, p1 + shift, p2 + shift)
        worst = max(worst, abs(d1 - d2) / max(abs(d1), 1.0))
    assert worst < 1e-6, f"relative-offset violation: {worst:.2e}"


def test_rope_table_tensor_mismatch():
    q = Tensor(np.zeros((3, 8)))
    tables = rope_frequencies(8, 10000.0, [0, 1])  # only 2 positions
    with pytest.raises(T.ShapeError):
        apply_rope(q, q, tables)


# -- yarn -----------------------------------------------------------------------


def test_yarn_factor_one_is_noop():
    pos = np.arange(6)
    plain = rope_frequencies(16, 10000.0, pos)
    scaled = rope_frequencies(16, 10000.0, pos, YarnParams(factor=1.0, native_ctx=32))
    np.testing.assert_array_equal(plain.cos, scaled.cos)
    np.testing.assert_array_equal(plain.sin, scaled.sin)
    assert scaled.mscale == 1.0


def _inv_freq_from_tables(head_size, theta, yarn=None):
    tables = rope_frequencies(head_size, theta, [1], yarn)
    return np.arctan2(tables.sin, tables.cos)[0]


def test_yarn_blends_between_original_and_interpolated():
    hs, theta, native, factor = 128, 1e6, 32768, 4
    orig = _inv_freq_from_tables(hs, theta)
    mixed = _inv_freq_from_tables(hs, theta, YarnParams(factor=factor, native_ctx=native))
    ratio = mixed / orig
    assert np.all(ratio <= 1.0 + 1e-12) and np.all(ratio >= 1.0 / factor - 1e-12)
    # band edges for these constants: full extrapolation below dim 23,
    # full interpolation above dim 40
    np.testing.assert_allclose(ratio[:24], 1.0, atol=1e-9)
    np.testing.assert_allclose(ratio[40:], 1.0 / factor, rtol=1e-9)
    assert np.all(np.diff(ratio) <= 1e-12)  # monotone ramp


def test_yarn_temperature_multiplier():
    tables = rope_frequencies(
        128, 1e6, [0], YarnParams(factor=4.0, native_ctx=32768)
    )
    assert abs(tables.mscale - (0.1 * math.log(4.0) + 1.0)) < 1e-12


# -- gqa attention ----------------------------------------------------------------


def mha_oracle(x, wq, wk, wv, wo, mask, hs, tables=None):
    """Plain numpy multi-head attention, one KV head per query head."""
    t_len = x.shape[0]
    nh = wq.shape[1] // hs
    q = (x @ wq).reshape(t_len, nh, hs).transpose(1, 0, 2)
    k = (x @ wk).reshape(t_len, nh, hs).transpose(1, 0, 2)
    v = (x @ wv).reshape(t_len, nh, hs).transpose(1, 0, 2)
    mscale = 1.0
    if tables is not None:
        def rot(t):
            e, o = t[..., 0::2], t[..., 1::2]
            out = np.empty_like(t)
            out[..., 0::2] = e * tables.cos - o * tables.sin
            out[..., 1::2] = e * tables.sin + o * tables.cos
            return out
        q, k = rot(q), rot(k)
        mscale = tables.mscale
    scores = q @ k.transpose(0, 2, 1) * (mscale * mscale / math.sqrt(hs))
    scores = np.where(mask, scores, -1e30)
    w = np.exp(scores - scores.max(-1, keepdims=True))
    w = w / w.sum(-1, keepdims=True)
    out = (w @ v).transpose(1, 0, 2).reshape(t_len, nh * hs)
    return out @ wo


def test_gqa_group_one_equals_mha():
    cfg = toy_config(n_heads=2, n_kv_heads=2)
    rng = np.random.default_rng(4)
    t_len, d, hs = 6, cfg.d_model, cfg.head_size
    x = rng.standard_normal((t_len, d))
    weights = {
        "attn.wq": Tensor(rng.standard_normal((d, cfg.n_heads * hs))),
        "attn.wk": Tensor(rng.standard_normal((d, cfg.n_kv_heads * hs))),
        "attn.wv": Tensor(rng.standard_normal((d, cfg.n_kv_heads * hs))),
        "attn.wo": Tensor(rng.standard_normal((cfg.n_heads * hs, d))),
    }
    mask = np.tril(np.ones((t_len, t_len), dtype=bool))
    for tables in (None, rope_frequencies(hs, cfg.rope_theta, np.arange(t_len))):
        ours = gqa_attention(Tensor(x), weights, mask, cfg, tables).numpy()
        ref = mha_oracle(
            x, *(weights[f"attn.w{n}"].numpy() for n in "qkvo"), mask, hs, tables
        )
        np.testing.assert_allclose(ours, ref, atol=1e-9)


def test_gqa_single_token_attends_to_itself():
    cfg = toy_config()
    rng = np.random.default_rng(5)
    d, hs = cfg.d_model, cfg.head_size
    x = rng.standard_normal((1, d))
    weights = {
        "attn.wq": Tensor(rng.standard_normal((d, cfg.n_heads * hs))),
        "attn.wk": Tensor(rng.standard_normal((d, cfg.n_kv_heads * hs))),
        "attn.wv": Tensor(rng.standard_normal((d, cfg.n_kv_heads * hs))),
        "attn.wo": Tensor(rng.standard_normal((cfg.n_heads * hs, d))),
    }
    out = gqa_attention(Tensor(x), weights, np.ones((1, 1), dtype=bool), cfg).numpy()
    # softmax over a single key is exactly 1, so output = V row through wo
    v = (x @ weights["attn.wv"].numpy()).reshape(1, cfg.n_kv_heads, hs)
    v_full = np.repeat(v, cfg.group_size, axis=1).reshape(1, cfg.n_heads * hs)
    np.testing.assert_allclose(out, v_full @ weights["attn.wo"].numpy(), atol=1e-9)


def test_gqa_masked_weights_are_zero():
    cfg = toy_config()
    rng = np.random.default_rng(6)
    t_len, d, hs = 5, cfg.d_model, cfg.head_size
    x = Tensor(rng.standard_normal((t_len, d)))
    weights = {
        "attn.wq": Tensor(rng.standard_normal((d, cfg.n_heads * hs))),
        "attn.wk": Tensor(rng.standard_normal((d, cfg.n_kv_heads * hs))),
        "attn.wv": Tensor(rng.standard_normal((d, cfg.n_kv_heads * hs))),
        "attn.wo": Tensor(rng.standard_normal((cfg.n_heads * hs, d))),
    }
    # recompute the attention weights the way gqa_attention does
    mask = np.tril(np.ones((t_len, t_len), dtype=bool))
    q = (x.numpy() @ weights["attn.wq"].numpy()).reshape(t_len, 2, hs).transpose(1, 0, 2)
    k = (x.numpy() @ weights["attn.wk"].numpy()).reshape(t_len, 1, hs).transpose(1, 0, 2)
    scores = (q.reshape(1, 2, t_len, hs) @ k.reshape(1, 1, t_len, hs).transpose(0, 1, 3, 2)) / math.sqrt(hs)
    scores = np.where(mask, scores, -1e30)
    w = np.exp(scores - scores.max(-1, keepdims=True))
    w = w / w.sum(-1, keepdims=True)
    assert np.all(w[..., ~mask] < 1e-12)


def test_gqa_rejects_future_mask():
    cfg = toy_config()
    x = Tensor(np.zeros((3, cfg.d_model)))
    weights = {
        "attn.wq": Tensor(np.zeros((cfg.d_model, cfg.n_heads * cfg.head_size))),
        "attn.wk": Tensor(np.zeros((cfg.d_model, cfg.n_kv_heads * cfg.head_size))),
        "attn.wv": Tensor(np.zeros((cfg.d_model, cfg.n_kv_heads * cfg.head_size))),
        "attn.wo": Tensor(np.zeros((cfg.n_heads * cfg.head_size, cfg.d_model))),
    }
    bad = np.ones((3, 3), dtype=bool)  # allows j > i
    with pytest.raises(ValueError):
        gqa_attention(x, weights, bad, cfg)
    with pytest.raises(T.ShapeError):
        gqa_attention(x, weights, np.tril(np.ones((4, 4), dtype=bool)), cfg)


def test_heads_divisibility_enforced():
    with pytest.raises(ValueError):
        toy_config(n_heads=3, n_kv_heads=2)


# -- forward ---------------------------------------------------------------------


def test_forward_logits_shape_and_range_check():
    cfg = toy_config()
    ckpt = init_params(cfg, named_rng(0, "init"))
    logits = forward(ckpt, [1, 2, 3, 4])
    assert logits.shape == (4, cfg.vocab_size)
    with pytest.raises(ValueError):
        forward(ckpt, [0, cfg.vocab_size])


def test_forward_zero_weights_zero_logits():
    cfg = toy_config()
    ckpt = init_params(cfg, named_rng(0, "init"))
    for name, p in ckpt.params.items():
        ckpt.params[name] = Tensor(np.zeros_like(p.data))
    logits = forward(ckpt, [1, 2, 3])
    np.testing.assert_allclose(logits.numpy(), 0.0)


def test_forward_causality():
    cfg = toy_config()
    ckpt = init_params(cfg, named_rng(1, "init"), dtype=np.float64)
    base = forward(ckpt, [1, 2, 3, 4, 5, 6]).numpy()
    for t in range(6):
        toks = [1, 2, 3, 4, 5, 6]
        toks[t] = (toks[t] + 3) % cfg.vocab_size
        diff = np.abs(forward(ckpt, toks).numpy() - base).max(axis=1)
        assert np.all(diff[:t] == 0.0), f"perturbing token {t} leaked backward"
        assert diff[t] > 0.0


def test_forward_segment_isolation():
    """Packed segments get identical logits to separate forward passes."""
    cfg = toy_config()
    ckpt = init_params(cfg, named_rng(2, "init"), dtype=np.float64)
    a, b = [1, 2, 3], [4, 5]
    packed_logits = forward(
        ckpt,
        a + b,
        segment_ids=[0, 0, 0, 1, 1],
        positions=[0, 1, 2, 0, 1],
    ).numpy()
    la = forward(ckpt, a).numpy()
    lb = forward(ckpt, b).numpy()
    np.testing.assert_allclose(packed_logits[:3], la, atol=1e-9)
    np.testing.assert_allclose(packed_logits[3:], lb, atol=1e-9)


def test_param_count_matches_shapes():
    for cfg in (toy_config(), toy_config(n_layers=3, d_ff=12), ModelConfig()):
        shapes = expected_param_shapes(cfg)
        total = sum(int(np.prod(s)) for s in shapes.values())
        assert param_count(cfg) == total


def test_production_config_is_11b():
    assert abs(param_count(ModelConfig()) / 1e9 - 11.2) < 0.2


def test_full_model_gradient_check():
    """End-to-end gradient vs finite differences on total cross-entropy."""
    cfg = toy_config()
    ckpt = init_params(cfg, named_rng(3, "init"), dtype=np.float64)
    tokens = np.array([1, 5, 2, 9, 4])
    targets = np.array([5, 2, 9, 4, 7])
    onehot = np.eye(cfg.vocab_size, dtype=np.float64)[targets]

    def loss(params):
        logits = forward(Checkpoint(config=cfg, params=params), tokens)
        return -(logits.log_softmax(-1) * onehot).sum()

    err = T.gradient_check(loss, ckpt.params)
    assert err < 1e-3, f"full-model gradient error {err:.2e}"


# -- attention mask helper ---------------------------------------------------------


def test_build_attention_mask():
    mask = build_attention_mask([0, 0, 1, 1, 1])
    expected = np.array([
        [1, 0, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 1, 0],
        [0, 0, 1, 1, 1],
    ], dtype=bool)
    np.testing.assert_array_equal(mask, expected)


# -- checkpoint validation ----------------------------------------------------------


def test_validate_checkpoint_accepts_fresh_init():
    ckpt = init_params(toy_config(), named_rng(4, "init"))
    validate_checkpoint(ckpt)


def test_validate_checkpoint_missing_and_extra():
    ckpt = init_params(toy_config(), named_rng(5, "init"))
    del ckpt.params["final_norm.g"]
    with pytest.raises(ValueError, match="missing"):
        validate_checkpoint(ckpt)
    ckpt = init_params(toy_config(), named_rng(5, "init"))
    ckpt.params["stray"] = Tensor(np.zeros(3))
    with pytest.raises(ValueError, match="extra"):
        validate_checkpoint(ckpt)


def test_validate_checkpoint_rejects_nonfinite():
    ckpt = init_params(toy_config(), named_rng(6, "init"))
    ckpt.params["embed.tok"].data[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        validate_checkpoint(ckpt)
