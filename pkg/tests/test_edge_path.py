import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from denet import ops
from denet.edge import (ChannelGate, EdgeRefinerStage, MultiEdgeRefiner, SpatialGate, channel_attention,
                        gated_input, multi_er_forward, sobel_seed, spatial_attention, taylor_update)
from denet.gradcheck import check_case, finite_diff_grad, relative_error
from denet.tensor import Tensor


def _zero_all(module):
    for p in module.parameters().values():
        p.data[...] = 0.0


# -- sobel seed -------------------------------------------------------------------

def test_sobel_constant_image_is_exactly_zero():
    assert np.all(sobel_seed(Tensor(np.full((1, 7, 9), 0.37))).data == 0.0)


def test_sobel_ramp_interior_is_8():
    ramp = np.tile(np.arange(8.0), (6, 1))[None]
    out = sobel_seed(Tensor(ramp)).data
    # the zero-anchoring offset moves nonzero magnitudes by at most sqrt(eps) = 1e-6
    np.testing.assert_allclose(out[0, 1:-1, 1:-1], 8.0, rtol=0, atol=1.01e-6)


def test_sobel_transpose_equivariance():
    x = np.random.default_rng(0).random((1, 6, 9))
    a = sobel_seed(Tensor(x)).data
    b = sobel_seed(Tensor(x.transpose(0, 2, 1).copy())).data
    np.testing.assert_allclose(b, a.transpose(0, 2, 1), atol=1e-12)


def test_sobel_translation_equivariance_interior():
    x = np.random.default_rng(1).random((1, 10, 10))
    shifted = np.roll(x, 1, axis=2)
    a = sobel_seed(Tensor(x)).data
    b = sobel_seed(Tensor(shifted)).data
    np.testing.assert_allclose(b[0, 1:-1, 3:-1], a[0, 1:-1, 2:-2], atol=1e-12)


def test_sobel_too_small():
    with pytest.raises(ValueError, match="smaller"):
        sobel_seed(Tensor(np.zeros((1, 2, 5))))


# -- gates ------------------------------------------------------------------------

def test_spatial_attention_range_zero_and_saturated():
    rng = np.random.default_rng(2)
    gate = SpatialGate(6, 4, rng)
    t, e = Tensor(rng.normal(size=(4, 5, 5)) * 5), Tensor(rng.normal(size=(2, 5, 5)))
    a = spatial_attention(t, e, gate).data
    assert a.shape == (1, 5, 5) and np.all((a > 0) & (a < 1))
    _zero_all(gate)
    assert np.all(spatial_attention(t, e, gate).data == 0.5)
    gate.conv2.bias.data[:] = 10.0
    assert np.all(spatial_attention(t, e, gate).data > 0.9999)


def test_spatial_attention_mismatch():
    gate = SpatialGate(2, 4, np.random.default_rng(0))
    with pytest.raises(ValueError, match="spatial"):
        spatial_attention(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 5, 4))), gate)


def test_channel_attention_single_channel_and_uniform():
    rng = np.random.default_rng(3)
    assert channel_attention(Tensor(rng.normal(size=(1, 4, 4))), ChannelGate(1, 4, rng)).data.tolist() == [1.0]
    gate = ChannelGate(6, 4, rng)
    _zero_all(gate)
    np.testing.assert_allclose(channel_attention(Tensor(rng.normal(size=(6, 3, 3))), gate).data, 1 / 6)


def test_channel_attention_permutation_equivariant():
    rng = np.random.default_rng(4)
    c = 5
    gate = ChannelGate(c, c, rng)
    gate.fc1.weight.data = 0.7 * np.eye(c) - 0.1
    gate.fc1.bias.data[:] = 0.2
    gate.fc2.weight.data = 1.3 * np.eye(c) + 0.05
    gate.fc2.bias.data[:] = -0.1
    x = rng.normal(size=(c, 4, 4))
    perm = rng.permutation(c)
    a = channel_attention(Tensor(x), gate).data
    b = channel_attention(Tensor(x[perm]), gate).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 3, 3), elements=st.floats(-100, 100)))
def test_channel_attention_is_on_simplex(x):
    gate = ChannelGate(4, 4, np.random.default_rng(5))
    b = channel_attention(Tensor(x), gate).data
    assert np.all(b >= 0)
    np.testing.assert_allclose(b.sum(axis=-1), 1.0, atol=1e-6)


# -- gated input --------------------------------------------------------------------

def _stage(seed=6, channels=2):
    return EdgeRefinerStage(1, channels, 2, np.random.default_rng(seed))


def test_gated_input_zero_spatial_gate_gives_zero():
    stage = _stage()
    stage.spatial_gate.conv2.weight.data[...] = 0.0
    stage.spatial_gate.conv2.bias.data[:] = -1e4
    stage.align_proj.bias.data[:] = 0.0
    rng = np.random.default_rng(7)
    out = gated_input(Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.random((1, 4, 4))), stage)
    assert np.all(out.data == 0.0)


def test_gated_input_uniform_channel_gate_full_spatial_gate():
    stage = _stage()
    stage.spatial_gate.conv2.weight.data[...] = 0.0
    stage.spatial_gate.conv2.bias.data[:] = 1e4
    _zero_all(stage.channel_gate)
    rng = np.random.default_rng(8)
    t, e = Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.random((1, 4, 4)))
    out = gated_input(t, e, stage).data
    z = ops.concat_channels(t, stage.filter(e))
    expected = stage.align_proj(ops.scale(z, 1.0 / z.shape[0])).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_gated_input_gradient_wrt_t_next():
    stage = _stage(9)
    rng = np.random.default_rng(10)
    t0 = rng.normal(size=(2, 4, 4))
    e = Tensor(rng.random((1, 4, 4)))
    cot = rng.normal(size=(2, 4, 4))
    t = Tensor(t0, requires_grad=True)
    ops.sum(gated_input(t, e, stage) * Tensor(cot)).backward()
    num = finite_diff_grad(lambda v: float(np.sum(gated_input(Tensor(v), e, stage).data * cot)), t0)
    assert relative_error(t.grad, num) < 1e-4


def test_gated_input_resolution_mismatch():
    with pytest.raises(ValueError, match="resolution"):
        gated_input(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 5, 5))), _stage())


# -- taylor update ----------------------------------------------------------------------

def test_taylor_examples():
    n = Tensor(np.random.default_rng(11).normal(size=(2, 3, 3)))
    assert np.array_equal(taylor_update(Tensor(np.zeros((2, 3, 3))), n, n).data, n.data)
    out = taylor_update(Tensor(np.array(0.5)), Tensor(np.array(2.0)), Tensor(np.array(1.0)))
    assert out.data == -0.5


def test_taylor_linearity():
    rng = np.random.default_rng(12)
    g, n, p = (rng.normal(size=(3, 4, 4)) for _ in range(3))
    alpha = 2.0  # a power of two keeps both sides exact
    lhs = taylor_update(Tensor(alpha * g), Tensor(alpha * n), Tensor(alpha * p)).data
    rhs = alpha * taylor_update(Tensor(g), Tensor(n), Tensor(p)).data
    assert np.array_equal(lhs, rhs)


def test_taylor_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        taylor_update(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


# -- cascade -----------------------------------------------------------------------------

def _features(rng, size=64, ch=(64, 128, 128)):
    return {"f2": Tensor(rng.normal(size=(ch[0], size // 2, size // 2))),
            "f4": Tensor(rng.normal(size=(ch[1], size // 4, size // 4))),
            "f8": Tensor(rng.normal(size=(ch[2], size // 8, size // 8)))}


def test_stage_dims_follow_the_cascade():
    ref = MultiEdgeRefiner((64, 128, 128), 128, 3, 1, np.random.default_rng(0))
    assert [(s.channels, s.divisor) for s in ref.stages] == [(64, 2), (128, 4), (128, 8)]


def test_multi_er_output_shape_and_zero_weight_edge_map():
    rng = np.random.default_rng(13)
    ref = MultiEdgeRefiner((64, 128, 128), 128, 3, 1, rng)
    image = Tensor(rng.random((1, 64, 64)))
    out, edge_map = multi_er_forward(_features(rng), image, ref)
    assert out.shape == (128, 8, 8)
    assert edge_map.shape == (1, 64, 64)
    _zero_all(ref)
    _, edge_map = multi_er_forward(_features(rng), image, ref)
    assert np.all(edge_map.data == 0.5)


@pytest.mark.parametrize("n_stages", [0, 1, 2, 3])
def test_cascade_depths_share_output_contract(n_stages):
    rng = np.random.default_rng(14)
    ref = MultiEdgeRefiner((4, 8, 8), 8, n_stages, 1, rng)
    out, edge_map = multi_er_forward(_features(rng, 16, (4, 8, 8)), Tensor(rng.random((1, 16, 16))), ref)
    assert out.shape == (8, 2, 2) and edge_map.shape == (1, 16, 16)


def test_multi_er_rejects_non_divisible_input():
    rng = np.random.default_rng(15)
    ref = MultiEdgeRefiner((4, 8, 8), 8, 3, 1, rng)
    with pytest.raises(ValueError, match="divisible"):
        multi_er_forward(_features(rng, 16, (4, 8, 8)), Tensor(rng.random((1, 20, 20))), ref)


def test_multi_er_end_to_end_gradient_on_input_patch():
    rng = np.random.default_rng(16)
    ref = MultiEdgeRefiner((4, 8, 8), 8, 3, 1, rng)
    feats = _features(rng, 16, (4, 8, 8))
    image = Tensor(rng.random((1, 16, 16)), requires_grad=True)
    f2 = Tensor(feats["f2"].data, requires_grad=True)

    def fn():
        out, edge_map = multi_er_forward({"f2": f2, "f4": feats["f4"], "f8": feats["f8"]}, image, ref)
        return ops.concat([ops.reshape(out, (-1,)), ops.reshape(edge_map, (-1,))], axis=0)

    assert check_case([image, f2], fn, rng) < 1e-3


def test_gradients_reach_every_stage_parameter():
    rng = np.random.default_rng(17)
    ref = MultiEdgeRefiner((4, 8, 8), 8, 3, 1, rng)
    feats = _features(rng, 16, (4, 8, 8))
    out, edge_map = multi_er_forward(feats, Tensor(rng.random((1, 16, 16))), ref)
    (ops.sum(out * Tensor(rng.normal(size=out.shape))) + ops.sum(edge_map)).backward()
    dead = [name for name, p in ref.parameters().items() if not np.any(p.grad)]
    assert dead == []
