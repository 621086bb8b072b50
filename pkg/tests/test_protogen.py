import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcp.autodiff import ContractError, DegenerateInputError, DimensionError, Tensor
from fcp.model import ModelConfig, init_params, proto_params
from fcp.protogen import (
    Projection,
    build_query_prototypes,
    build_support_prototypes,
    cross_attention_step,
    guide_features,
    mask_average_pool,
    mask_average_pool_expand,
    masked_cross_attention_step,
    pooled_over_shots,
    token_cross_attention,
)


def dense_masked_attention(tokens, keys, values, mask, wq, wk, wv):
    """Reference with -inf logits on masked pixels and an explicit softmax loop."""
    c, h, w = keys.shape
    k = wk.T @ keys.reshape(c, -1)
    v = wv.T @ values.reshape(c, -1)
    q = tokens @ wq
    logits = q @ k / np.sqrt(c)
    if mask is not None:
        logits = np.where(mask.reshape(1, -1) > 0, logits, -np.inf)
    out = np.zeros((tokens.shape[0], c))
    weights = np.zeros_like(logits)
    for n in range(tokens.shape[0]):
        row = logits[n]
        e = np.exp(row - row.max())
        weights[n] = e / e.sum()
        out[n] = v @ weights[n]
    return out, weights.reshape(-1, h, w)


def random_attention_case(rng, n=4, c=8, h=5, w=6, masked=True):
    tokens = rng.standard_normal((n, c))
    keys = rng.standard_normal((c, h, w))
    values = rng.standard_normal((c, h, w))
    mask = None
    if masked:
        mask = (rng.random((h, w)) > 0.5).astype(float)
        mask[rng.integers(h), rng.integers(w)] = 1.0
    proj = [rng.standard_normal((c, c)) for _ in range(3)]
    return tokens, keys, values, mask, proj


def test_masked_attention_matches_dense_oracle():
    worst = 0.0
    for seed in range(100):
        t, k, v, m, (wq, wk, wv) = random_attention_case(np.random.default_rng(seed))
        out, weights = masked_cross_attention_step(t, k, v, m, Projection(Tensor(wq), Tensor(wk), Tensor(wv)))
        ref_out, ref_w = dense_masked_attention(t, k, v, m, wq, wk, wv)
        worst = max(worst, np.abs(out.data - ref_out).max(), np.abs(weights.data - ref_w).max())
    assert worst < 1e-9


def test_unmasked_attention_matches_dense_oracle():
    for seed in range(20):
        t, k, v, _, (wq, wk, wv) = random_attention_case(np.random.default_rng(seed), masked=False)
        out, weights = cross_attention_step(t, k, v, Projection(Tensor(wq), Tensor(wk), Tensor(wv)))
        ref_out, ref_w = dense_masked_attention(t, k, v, None, wq, wk, wv)
        np.testing.assert_allclose(out.data, ref_out, atol=1e-10)
        np.testing.assert_allclose(weights.data, ref_w, atol=1e-12)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_attention_rows_sum_to_one_and_masked_pixels_are_zero(seed):
    t, k, v, m, (wq, wk, wv) = random_attention_case(np.random.default_rng(seed))
    _, weights = masked_cross_attention_step(t, k, v, m, Projection(Tensor(wq), Tensor(wk), Tensor(wv)))
    w = weights.data
    np.testing.assert_allclose(w.sum(axis=(1, 2)), 1.0, atol=1e-9)
    assert np.all(w[:, m == 0] == 0.0)


def test_attention_shape_errors():
    rng = np.random.default_rng(0)
    t, k, v, m, proj = random_attention_case(rng)
    p = Projection(*map(Tensor, proj))
    with pytest.raises(DimensionError):
        masked_cross_attention_step(t[:, :4], k, v, m, p)
    with pytest.raises(DimensionError):
        masked_cross_attention_step(t, k, v[:, :2], m, p)
    with pytest.raises(DimensionError):
        masked_cross_attention_step(t, k, v, m[:2], p)
    with pytest.raises(DegenerateInputError):
        masked_cross_attention_step(t, k, v, np.zeros_like(m), p)


def test_token_cross_attention_single_key_degenerates_to_value():
    rng = np.random.default_rng(1)
    wq, wk, wv = (rng.standard_normal((5, 5)) for _ in range(3))
    kv = rng.standard_normal((1, 5))
    out, w = token_cross_attention(rng.standard_normal((3, 5)), kv, Projection(Tensor(wq), Tensor(wk), Tensor(wv)))
    np.testing.assert_allclose(w.data, 1.0)
    np.testing.assert_allclose(out.data, np.repeat(kv @ wv, 3, axis=0), atol=1e-12)


# -- pooling and guiding -------------------------------------------------------

def test_mask_average_pool_matches_loop():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((4, 3, 3))
    m = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 0]], dtype=float)
    ref = sum(f[:, i, j] for i in range(3) for j in range(3) if m[i, j]) / 3
    np.testing.assert_allclose(mask_average_pool(f, m).data, ref)
    ex = mask_average_pool_expand(f, m).data
    assert ex.shape == f.shape
    np.testing.assert_allclose(ex[:, 2, 0], ref)
    with pytest.raises(DegenerateInputError):
        mask_average_pool(f, np.zeros((3, 3)))


def test_pooled_over_shots_weights_by_pixel_count():
    rng = np.random.default_rng(3)
    f1, f2 = rng.standard_normal((2, 2, 4, 4))
    m1 = np.zeros((4, 4))
    m1[0, 0] = 1
    m2 = np.zeros((4, 4))
    m2[1:3, 1:3] = 1
    ref = (f1[:, 0, 0] + f2[:, 1:3, 1:3].sum(axis=(1, 2))) / 5
    np.testing.assert_allclose(pooled_over_shots([f1, f2], [m1, m2]).data[:, 3, 3], ref)


def test_guide_features_is_conv_over_concat():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((3, 2, 2))
    m = rng.random((2, 2))
    pooled = rng.standard_normal((3, 2, 2))
    w, b = rng.standard_normal((3, 7)), rng.standard_normal(3)
    out = guide_features(f, m, pooled, w, b).data
    x = np.concatenate([f, m[None], pooled])
    np.testing.assert_allclose(out, np.einsum("oc,chw->ohw", w, x) + b[:, None, None])
    with pytest.raises(DimensionError):
        guide_features(f, m[:1], pooled, w, b)


# -- prototypes ----------------------------------------------------------------

CFG = ModelConfig(channels=8, n_tokens=4, steps=3, hidden=4)


@pytest.fixture
def parts():
    rng = np.random.default_rng(5)
    params = init_params(CFG, rng)
    pp = proto_params(params, CFG)

    def unit(shape):
        x = rng.standard_normal(shape)
        return x / np.linalg.norm(x, axis=0, keepdims=True)

    m = np.zeros((6, 6))
    m[1:4, 2:5] = 1
    return pp, unit((8, 6, 6)), unit((8, 6, 6)), m, unit


def test_support_prototypes_structure(parts):
    pp, g, f, m, _ = parts
    tokens, records, g_bar, f_bar = build_support_prototypes(g, f, m, pp, 3)
    assert tokens.shape == (4, 8)
    assert [r.step for r in records] == [1, 2, 3]
    for r in records:
        np.testing.assert_allclose(r.weights.data.sum(axis=(1, 2)), 1.0, atol=1e-9)
        assert np.all(r.weights.data[:, m == 0] == 0.0)


def test_support_prototypes_ignore_background_features(parts):
    pp, g, f, m, unit = parts
    base, *_ = build_support_prototypes(g, f, m, pp, 3)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        g2, f2 = g.copy(), f.copy()
        g2[:, m == 0] = 50.0 * rng.standard_normal((8, int((m == 0).sum())))
        f2[:, m == 0] = -30.0 * rng.standard_normal((8, int((m == 0).sum())))
        moved, *_ = build_support_prototypes(g2, f2, m, pp, 3)
        assert np.abs(moved.data - base.data).max() <= 1e-9


def test_single_step_support_uses_backbone_values(parts):
    pp, g, f, m, _ = parts
    tokens, records, g_bar, f_bar = build_support_prototypes(g, f, m, pp, 1, residual=False)
    w = records[0].weights.data.reshape(4, -1)
    expected = w @ (pp.support_proj[0].wv.data.T @ f_bar.data.reshape(8, -1)).T
    np.testing.assert_allclose(tokens.data, expected, atol=1e-12)


def test_support_errors(parts):
    pp, g, f, m, _ = parts
    with pytest.raises(DegenerateInputError):
        build_support_prototypes(g, f, np.zeros_like(m), pp, 3)
    with pytest.raises(ContractError):
        build_support_prototypes(g, f, m, pp, 4)
    with pytest.raises(ContractError):
        build_support_prototypes(g, f, m, pp, 0)


def test_query_prototypes_structure(parts):
    pp, g, f, m, unit = parts
    gq, fq = unit((8, 6, 6)), unit((8, 6, 6))
    qp = build_query_prototypes(gq, fq, g, f, m, pp, 3)
    assert qp.tokens.shape == (4, 8)
    assert len(qp.records) == 3 and len(qp.attn_masks) == 2
    for r in qp.records:
        np.testing.assert_allclose(r.weights.data.sum(axis=(1, 2)), 1.0, atol=1e-9)
    for am in qp.attn_masks:
        assert am.data.max() == pytest.approx(1.0) and am.data.min() >= 0.0
    assert qp.pseudo.min() >= 0.0 and qp.pseudo.max() <= 1.0


def test_query_guide_mask_choice_changes_only_the_last_step(parts):
    pp, g, f, m, unit = parts
    gq, fq = unit((8, 6, 6)), unit((8, 6, 6))
    a = build_query_prototypes(gq, fq, [g], [f], [m], pp, 3, guide_mask="attention")
    b = build_query_prototypes(gq, fq, [g], [f], [m], pp, 3, guide_mask="conventional")
    for ra, rb in zip(a.records[:2], b.records[:2]):
        assert np.array_equal(ra.weights.data, rb.weights.data)
    assert not np.allclose(a.guided_backbone.data, b.guided_backbone.data)


def test_query_errors(parts):
    pp, g, f, m, unit = parts
    gq, fq = unit((8, 6, 6)), unit((8, 6, 6))
    with pytest.raises(ContractError):
        build_query_prototypes(gq, fq, g, f, m, pp, 1)
    with pytest.raises(ContractError):
        build_query_prototypes(gq, fq, g, f, m, pp, 3, guide_mask="oracle")
