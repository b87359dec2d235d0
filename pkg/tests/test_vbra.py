"""Region partition, coarse routing, token gather and routed attention."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volmark import tensor as T
from volmark.gradcheck import grad_check
from volmark.nn import ConvParams, MlpParams, NormParams
from volmark.tensor import ShapeError, Tensor
from volmark.vbra import (AttentionParams, BlockParams, RoutingIndex, VbraConfig, coarse_route, dense_attention,
                          dense_attention_reference, fine_attention, gather_tokens, partition_regions,
                          region_descriptors, unpartition_regions, vbra_attention, vbra_block)


def _params(c, rng, dtype=np.float64):
    return AttentionParams(*(Tensor(rng.standard_normal((c, c)) / np.sqrt(c), dtype=dtype) for _ in range(4)))


def _block_params(c, rng, zero=False):
    def w(*shape):
        return Tensor(np.zeros(shape) if zero else rng.standard_normal(shape) * 0.3)
    return BlockParams(ConvParams(w(3, 3, 3, c), w(c)), NormParams(Tensor(np.ones(c)), Tensor(np.zeros(c))),
                       AttentionParams(w(c, c), w(c, c), w(c, c), w(c, c)),
                       NormParams(Tensor(np.ones(c)), Tensor(np.zeros(c))),
                       MlpParams(w(c, 2 * c), w(2 * c), w(2 * c, c), w(c)))


def test_partition_counts():
    q, part = partition_regions(Tensor(np.zeros((8, 8, 8, 3))), VbraConfig((4, 4, 4), 1, 1, 3))
    assert q.shape == (8, 64, 3)
    assert (part.num_regions, part.tokens_per_region) == (8, 64)


def test_partition_full_volume_is_one_region():
    q, part = partition_regions(Tensor(np.zeros((4, 2, 6, 2))), VbraConfig((4, 2, 6), 1, 1, 2))
    assert q.shape == (1, 48, 2)


def test_partition_is_row_major_within_regions():
    x = np.arange(4 * 4 * 2, dtype=float).reshape(4, 4, 2, 1)
    q, part = partition_regions(Tensor(x), VbraConfig((2, 2, 2), 1, 1, 1))
    np.testing.assert_array_equal(q.data[0, :, 0], x[:2, :2, :2, 0].ravel())
    np.testing.assert_array_equal(q.data[1, :, 0], x[:2, 2:, :2, 0].ravel())
    np.testing.assert_array_equal(part.token_ids[0], x[:2, :2, :2, 0].ravel().astype(int))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([(1, 1, 1), (2, 2, 2), (2, 4, 1), (4, 4, 2)]), st.integers(0, 2 ** 16))
def test_partition_roundtrip_is_exact(region, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((4, 4, 2, 3)))
    q, part = partition_regions(x, VbraConfig(region, 1, 1, 3))
    back = unpartition_regions(q, part)
    assert np.array_equal(back.data, x.data)


def test_partition_rejects_ragged_axis():
    with pytest.raises(ShapeError, match="axis 1"):
        partition_regions(Tensor(np.zeros((4, 6, 4, 1))), VbraConfig((2, 4, 2), 1, 1, 1))


def test_zero_pad_policy_marks_padding():
    x = Tensor(np.ones((3, 4, 4, 1)))
    q, part = partition_regions(x, VbraConfig((2, 2, 2), 1, 1, 1, padding_policy="zero_pad_mask"))
    assert part.padded_dims == (4, 4, 4)
    assert part.valid.sum() == 3 * 4 * 4
    np.testing.assert_array_equal(unpartition_regions(q, part).data, x.data)


def test_descriptor_of_identical_tokens():
    t = np.array([1.0, -2.0, 0.5])
    q = Tensor(np.tile(t, (2, 4, 1)))
    qp, kp = region_descriptors(q, q)
    np.testing.assert_allclose(qp.data, np.tile(t, (2, 1)))


def test_descriptor_is_mean():
    q = Tensor(np.array([[[0.0, 0.0], [2.0, 4.0]]]))
    qp, _ = region_descriptors(q, q)
    np.testing.assert_array_equal(qp.data, [[1.0, 2.0]])


def test_descriptor_permutation_invariant():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((3, 5, 2))
    perm = q[:, rng.permutation(5)]
    np.testing.assert_allclose(region_descriptors(Tensor(q), Tensor(q))[0].data,
                               region_descriptors(Tensor(perm), Tensor(perm))[0].data, atol=1e-15)


def test_route_all_regions_when_k_equals_r():
    rng = np.random.default_rng(1)
    r = coarse_route(rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), 5, 4)
    for row in r.selected:
        assert set(row.tolist()) == set(range(5))


def test_route_hand_affinities():
    # scores equal log of the wanted affinities, so softmax returns them exactly
    kp = np.diag(np.log([0.5, 0.3, 0.2]))
    qp = np.ones((3, 3))
    r = coarse_route(qp, kp, 2, head_dim=1)
    np.testing.assert_allclose(r.affinity[0], [0.5, 0.3, 0.2])
    assert set(r.selected[0].tolist()) == {0, 1}


def test_route_orthogonal_descriptors_tie_to_region_zero():
    qp = np.array([[0.0, 0.0, 1.0]])
    kp = np.eye(3)[:2]
    r = coarse_route(np.vstack([qp, qp]), kp, 1, head_dim=3)
    np.testing.assert_allclose(r.affinity[0], [0.5, 0.5])
    assert r.selected[0].tolist() == [0]


def test_route_rejects_k_beyond_regions():
    with pytest.raises(ValueError, match="top_k"):
        coarse_route(np.zeros((2, 2)), np.zeros((2, 2)), 3, 2)


def test_gather_all_regions_is_permutation():
    rng = np.random.default_rng(2)
    k = rng.standard_normal((3, 4, 2))
    routing = coarse_route(rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), 3, 2)
    ks, vs, mask = gather_tokens(Tensor(k), Tensor(k), routing)
    assert mask is None
    for row in ks.data:
        np.testing.assert_array_equal(np.sort(row.ravel()), np.sort(k.ravel()))


def test_gather_own_region_is_local():
    k = np.random.default_rng(3).standard_normal((2, 4, 2))
    qp = np.array([[1.0, 0.0], [0.0, 1.0]]) * 50
    routing = coarse_route(qp, qp, 1, 2)
    ks, _, _ = gather_tokens(Tensor(k), Tensor(k), routing)
    np.testing.assert_array_equal(ks.data, k)


def test_gather_rejects_bad_index():
    routing = RoutingIndex(np.array([[0], [5]]), np.zeros((2, 2)))
    with pytest.raises(IndexError):
        gather_tokens(Tensor(np.zeros((2, 3, 1))), Tensor(np.zeros((2, 3, 1))), routing)


def test_gather_gradient_counts_uses():
    k = Tensor(np.random.default_rng(4).standard_normal((3, 2, 2)), requires_grad=True)
    routing = RoutingIndex(np.array([[0, 1], [0, 1], [0, 2]]), np.zeros((3, 3)))
    ks, _, _ = gather_tokens(k, k, routing)
    (g,) = T.grad(ks.sum(), [k])
    np.testing.assert_array_equal(g[:, 0, 0], [3.0, 2.0, 1.0])


def test_single_token_attention_passes_projected_value():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 1, 1, 4))
    p = _params(4, rng)
    out, _ = vbra_attention(Tensor(x), p, VbraConfig((1, 1, 1), 1, 1, 4))
    np.testing.assert_allclose(out.data.ravel(), x.ravel() @ p.wv.data @ p.wo.data, atol=1e-12)


def test_identical_values_ignore_logits():
    rng = np.random.default_rng(6)
    v = np.tile(rng.standard_normal(4), (1, 3, 1))
    q = Tensor(rng.standard_normal((1, 2, 4)))
    k = Tensor(rng.standard_normal((1, 3, 4)))
    out = fine_attention(q, k, Tensor(v), Tensor(np.eye(4)), heads=2)
    np.testing.assert_allclose(out.data[0], np.tile(v[0, 0], (2, 1)), atol=1e-12)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
@pytest.mark.parametrize("region,k", [((4, 4, 4), 1), ((1, 1, 1), 64), ((2, 2, 2), 8)])
def test_full_routing_matches_dense_oracle(dtype, tol, region, k):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 4, 4, 8))
    p = _params(8, rng, dtype)
    out, _ = vbra_attention(Tensor(x, dtype=dtype), p, VbraConfig(region, k, 2, 8))
    ref = dense_attention_reference(x.reshape(-1, 8), p.wq, p.wk, p.wv, p.wo, 2).reshape(x.shape)
    assert np.abs(out.data - ref).max() < tol


def test_dense_attention_matches_reference():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 2, 4))
    p = _params(4, rng)
    ref = dense_attention_reference(x.reshape(-1, 4), p.wq, p.wk, p.wv, p.wo, 2).reshape(x.shape)
    np.testing.assert_allclose(dense_attention(Tensor(x), p, 2).data, ref, atol=1e-12)


def test_reference_single_token_passthrough():
    rng = np.random.default_rng(9)
    x, ws = rng.standard_normal((1, 4)), [rng.standard_normal((4, 4)) for _ in range(4)]
    np.testing.assert_allclose(dense_attention_reference(x, *ws, heads=2), x @ ws[2] @ ws[3], atol=1e-12)


def test_routing_weights_are_row_stochastic():
    rng = np.random.default_rng(10)
    _, routing = vbra_attention(Tensor(rng.standard_normal((4, 4, 4, 4))), _params(4, rng),
                                VbraConfig((2, 2, 2), 3, 2, 4))
    np.testing.assert_allclose(routing.affinity.sum(axis=-1), 1.0, atol=1e-6)
    assert routing.keys_per_query() == 24


def test_padded_attention_matches_dense_when_routing_is_full():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4, 2, 4))
    p = _params(4, rng)
    out, _ = vbra_attention(Tensor(x), p, VbraConfig((2, 2, 2), 4, 2, 4, padding_policy="zero_pad_mask"))
    ref = dense_attention_reference(x.reshape(-1, 4), p.wq, p.wk, p.wv, p.wo, 2).reshape(x.shape)
    np.testing.assert_allclose(out.data, ref, atol=1e-10)


def test_block_with_zero_weights_is_identity():
    x = np.random.default_rng(12).standard_normal((4, 4, 4, 4))
    out = vbra_block(Tensor(x), _block_params(4, None, zero=True), VbraConfig((2, 2, 2), 2, 2, 4))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("region,k", [((2, 2, 2), 1), ((4, 2, 2), 2), ((4, 4, 4), 1)])
def test_block_preserves_shape(region, k):
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((2, 4, 4, 4, 4)))
    assert vbra_block(x, _block_params(4, rng), VbraConfig(region, k, 2, 4)).shape == x.shape


def test_block_grad_check():
    rng = np.random.default_rng(14)
    bp = _block_params(4, rng)
    cfg = VbraConfig((2, 2, 2), 2, 2, 4)
    r = Tensor(rng.standard_normal((4, 4, 4, 4)))
    x = rng.standard_normal((4, 4, 4, 4))
    assert grad_check(lambda t: (vbra_block(t, bp, cfg) * r).sum(), [x], max_checks=40) < 1e-4


def test_channel_mismatch_is_rejected():
    with pytest.raises(ShapeError, match="channels"):
        vbra_attention(Tensor(np.zeros((2, 2, 2, 4))), _params(4, np.random.default_rng(0)),
                       VbraConfig((2, 2, 2), 1, 2, 8))
