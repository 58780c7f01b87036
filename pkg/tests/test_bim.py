import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denet import ops
from denet.bim import (BIM, BimOptions, CoAttentionFusion, LocalAttention, MergedAttentionFusion, Projections,
                       _split_heads, attention_weights, bim_forward, cross_attention, global_self_attention,
                       local_self_attention, pairwise_sq_dist)
from denet.gradcheck import check_case
from denet.nn import Conv1x1
from denet.tensor import Tensor


def _w(value):
    return Tensor(np.asarray(value, dtype=np.float64))


def _attention_parts(rng, c=8, width=8, h=3, w=3):
    proj = Projections(c, width, rng)
    out = Conv1x1(width, c, rng)
    x = Tensor(rng.normal(size=(c, h, w)))
    return proj, out, x, Tensor(pairwise_sq_dist(h, w))


# -- local attention ------------------------------------------------------------------

def test_local_attention_saturated_gate_is_depthwise():
    rng = np.random.default_rng(0)
    la = LocalAttention(4, rng)
    la.gate.bias.data[:] = 50.0
    la.gate.weight.data[...] = 0.0
    x = Tensor(rng.normal(size=(4, 5, 5)))
    np.testing.assert_allclose(local_self_attention(x, la).data, ops.depthwise_conv2d(x, la.dw.weight).data,
                               atol=1e-12)


def test_local_attention_zero_in_zero_out():
    la = LocalAttention(3, np.random.default_rng(1))
    assert np.all(local_self_attention(Tensor(np.zeros((3, 4, 4))), la).data == 0.0)


def test_local_attention_gradient():
    rng = np.random.default_rng(2)
    la = LocalAttention(2, rng)
    x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    assert check_case([x] + list(la.parameters().values()), lambda: local_self_attention(x, la), rng) < 1e-4


def test_local_attention_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        local_self_attention(Tensor(np.zeros((3, 4, 4))), LocalAttention(2, np.random.default_rng(0)))


# -- distance table ---------------------------------------------------------------------

def test_pairwise_sq_dist_examples():
    assert pairwise_sq_dist(1, 1).tolist() == [[0.0]]
    assert pairwise_sq_dist(2, 2).tolist() == [[0, 1, 1, 2], [1, 0, 2, 1], [1, 2, 0, 1], [2, 1, 1, 0]]
    d = pairwise_sq_dist(3, 5)
    assert d.shape == (15, 15)
    assert np.array_equal(d, d.T) and np.all(np.diag(d) == 0)


def test_pairwise_sq_dist_rejects_empty_grid():
    with pytest.raises(ValueError):
        pairwise_sq_dist(0, 3)


# -- global attention ------------------------------------------------------------------

def _unbiased_attention(x, proj, out, heads):
    q, k, v = proj.q(x), proj.k(x), proj.v(x)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = ops.matmul(qh, ops.swap_last(kh))
    a = ops.softmax_rows(ops.scale(logits, 1.0 / math.sqrt(qh.shape[-1])))
    z = ops.matmul(a, vh)
    h, w = x.shape[-2:]
    return out(ops.reshape(ops.swap_last(z), (heads * z.shape[-1], h, w)))


def test_global_attention_w_zero_is_unbiased_bitwise():
    rng = np.random.default_rng(3)
    proj, out, x, d2 = _attention_parts(rng)
    biased = global_self_attention(x, proj, out, _w(0.0), d2, 2).data
    assert np.array_equal(biased, _unbiased_attention(x, proj, out, 2).data)


def test_global_attention_single_position():
    rng = np.random.default_rng(4)
    proj, out, x, d2 = _attention_parts(rng, h=1, w=1)
    a = attention_weights(proj.q(x), proj.k(x), _w(0.3), d2, 2)
    assert np.all(a.data == 1.0)
    np.testing.assert_array_equal(global_self_attention(x, proj, out, _w(0.3), d2, 2).data,
                                  out(proj.v(x)).data)


def test_large_w_concentrates_on_self():
    rng = np.random.default_rng(5)
    proj, _, x, d2 = _attention_parts(rng, h=2, w=2)
    a = attention_weights(proj.q(x), proj.k(x), _w(1e4), d2, 2).data
    diag = np.diagonal(a, axis1=-2, axis2=-1)
    assert np.all(diag >= 1 - 1e-6)


def test_distance_table_size_mismatch():
    rng = np.random.default_rng(6)
    proj, out, x, _ = _attention_parts(rng)
    with pytest.raises(ValueError, match="distance"):
        global_self_attention(x, proj, out, _w(0.1), Tensor(pairwise_sq_dist(2, 2)), 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 50.0), st.floats(0.1, 20.0))
def test_attention_rows_sum_to_one(seed, w, scale):
    rng = np.random.default_rng(seed)
    q = Tensor(rng.normal(size=(2, 8, 3, 3)) * scale)
    k = Tensor(rng.normal(size=(2, 8, 3, 3)) * scale)
    a = attention_weights(q, k, _w(w), Tensor(pairwise_sq_dist(3, 3)), 4).data
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_gaussian_bias_monotone_in_distance():
    zeros = Tensor(np.zeros((4, 3, 4)))
    d2 = pairwise_sq_dist(3, 4)
    a = attention_weights(zeros, zeros, _w(0.2), Tensor(d2), 2).data[0]
    for i in range(d2.shape[0]):
        order = np.argsort(d2[i], kind="stable")
        assert np.all(np.diff(a[i][order]) <= 0)
        closer = d2[i][:, None] < d2[i][None, :]
        assert np.all((a[i][:, None] > a[i][None, :])[closer])


# -- cross attention -----------------------------------------------------------------

def test_cross_attention_degenerates_to_self_attention():
    rng = np.random.default_rng(8)
    proj, out, x, d2 = _attention_parts(rng)
    a = cross_attention(x, x, proj, proj, out, _w(0.1), d2, 2).data
    assert np.array_equal(a, global_self_attention(x, proj, out, _w(0.1), d2, 2).data)


def test_cross_attention_zero_values_give_zero():
    rng = np.random.default_rng(9)
    qp, kvp = Projections(8, 8, rng), Projections(16, 8, rng)
    kvp.v.weight.data[...] = 0.0
    restore = Conv1x1(8, 8, rng)
    xq, xkv = Tensor(rng.normal(size=(8, 3, 3))), Tensor(rng.normal(size=(16, 3, 3)))
    out = cross_attention(xq, xkv, qp, kvp, restore, _w(0.1), Tensor(pairwise_sq_dist(3, 3)), 2)
    assert np.all(out.data == 0.0)


def test_cross_attention_direction_mirror():
    rng = np.random.default_rng(10)
    m = BIM(8, 8, 8, 2, np.random.default_rng(11))
    mirror = BIM(8, 8, 8, 2, np.random.default_rng(11))
    mirror.cross_e, mirror.cross_s = m.cross_s, m.cross_e
    mirror.proj_e, mirror.proj_s = m.proj_s, m.proj_e
    a, b = Tensor(rng.normal(size=(8, 3, 3))), Tensor(rng.normal(size=(8, 3, 3)))
    d2, w = Tensor(pairwise_sq_dist(3, 3)), _w(0.1)
    assert np.array_equal(m.cross(a, b, "e_from_s", w, d2).data, mirror.cross(b, a, "s_from_e", w, d2).data)


def test_cross_attention_spatial_mismatch():
    rng = np.random.default_rng(12)
    p = Projections(4, 4, rng)
    with pytest.raises(ValueError, match="spatial"):
        cross_attention(Tensor(np.zeros((4, 2, 2))), Tensor(np.zeros((4, 3, 3))), p, p,
                        Conv1x1(4, 4, rng), _w(0.1), Tensor(pairwise_sq_dist(2, 2)), 2)


# -- full module --------------------------------------------------------------------

def test_bim_forward_reference_shape():
    rng = np.random.default_rng(13)
    m = BIM(128, 512, 128, 4, rng, dtype=np.float32)
    out = bim_forward(Tensor(rng.normal(size=(128, 8, 8)).astype(np.float32)),
                      Tensor(rng.normal(size=(512, 8, 8)).astype(np.float32)), m)
    assert out.shape == (128, 8, 8)


def test_zero_cross_values_reduce_to_global_streams():
    rng = np.random.default_rng(14)
    m = BIM(8, 16, 8, 2, rng)
    m.cross_e.v.weight.data[...] = 0.0
    m.cross_s.v.weight.data[...] = 0.0
    fe, fs = Tensor(rng.normal(size=(8, 3, 3))), Tensor(rng.normal(size=(16, 3, 3)))
    xe, xs, _, _ = m.streams(fe, fs)
    expected = m.fuse(ops.concat_channels(m.out_local_e(xe), m.out_local_s(xs))).data
    assert np.array_equal(m(fe, fs).data, expected)


def test_bim_gradient_shrunken():
    rng = np.random.default_rng(15)
    m = BIM(8, 64, 8, 2, rng)
    fe = Tensor(rng.normal(size=(8, 2, 2)), requires_grad=True)
    fs = Tensor(rng.normal(size=(64, 2, 2)), requires_grad=True)
    assert check_case([fe, fs] + list(m.parameters().values()), lambda: m(fe, fs), rng) < 1e-3


def test_path_isolation_before_fusion():
    rng = np.random.default_rng(16)
    m = BIM(8, 16, 8, 2, rng)
    fe = Tensor(rng.normal(size=(8, 3, 3)))
    xe_a, _, _, _ = m.streams(fe, Tensor(rng.normal(size=(16, 3, 3))))
    xe_b, _, _, _ = m.streams(fe, Tensor(rng.normal(size=(16, 3, 3)) * 100))
    assert np.array_equal(xe_a.data, xe_b.data)


def test_transpose_covariance():
    rng = np.random.default_rng(17)
    m = BIM(8, 8, 8, 2, rng)
    for la in (m.local_e, m.local_s, m.out_local_e, m.out_local_s):
        k = la.dw.weight.data
        la.dw.weight.data = 0.5 * (k + k.transpose(0, 2, 1))
    fe, fs = rng.normal(size=(8, 3, 4)), rng.normal(size=(8, 3, 4))
    a = m(Tensor(fe), Tensor(fs)).data
    b = m(Tensor(fe.transpose(0, 2, 1).copy()), Tensor(fs.transpose(0, 2, 1).copy())).data
    np.testing.assert_allclose(b, a.transpose(0, 2, 1), atol=1e-12)


@pytest.mark.parametrize("opts", [BimOptions(use_local=False), BimOptions(use_global=False),
                                  BimOptions(gaussian_bias=False), BimOptions(share_local=True)])
def test_ablation_variants_run(opts):
    rng = np.random.default_rng(18)
    m = BIM(8, 16, 8, 2, rng, opts)
    out = m(Tensor(rng.normal(size=(8, 3, 3))), Tensor(rng.normal(size=(16, 3, 3))))
    assert out.shape == (8, 3, 3)
    if not opts.gaussian_bias:
        assert m.bias_scale(np.float64).data == 0.0


def test_bias_scale_is_softplus_of_raw():
    m = BIM(8, 8, 8, 2, np.random.default_rng(19))
    np.testing.assert_allclose(m.bias_scale(np.float64).data, 0.1, atol=1e-12)
    m.w_raw.data = np.asarray(-30.0)
    assert m.bias_scale(np.float64).data >= 0


@pytest.mark.parametrize("cls", [CoAttentionFusion, MergedAttentionFusion])
def test_baseline_fusions_shape(cls):
    rng = np.random.default_rng(20)
    m = cls(8, 16, 8, 2, rng)
    assert m(Tensor(rng.normal(size=(8, 3, 3))), Tensor(rng.normal(size=(16, 3, 3)))).shape == (8, 3, 3)
