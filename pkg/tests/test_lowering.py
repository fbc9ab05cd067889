import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_avgpool1d, naive_conv1d

from conformal_layers.homogeneous import HomVector, SparseOperator, spmv
from conformal_layers.lowering import (
    ConvConfig,
    LoweringError,
    avgpool_matrix,
    conv_matrix,
    conv_matrix_monolithic,
    cross_correlation_tensor,
    dilated_kernel,
    dilation_matrix,
    dropout_matrix,
    flatten_matrix,
    lower_layer,
    padding_matrix,
    probe_extract_U,
    stride_matrix,
)
from conformal_layers.netspec import LayerSpec, ShapeSpec
from conformal_layers.reference import FeatureVolume, direct_avgpool, direct_conv, direct_flatten


def ones_at(M: SparseOperator):
    """1-based coordinates of the stored entries, for comparison with hand tables."""
    r, c, v = M.triples()
    assert np.all(v == 1.0)
    return sorted(zip((r + 1).tolist(), (c + 1).tolist()))


def apply(M, data, homo=1.0):
    return spmv(M, HomVector.from_parts(data, homo)).coeffs


def assert_passthrough(M):
    d = M.to_dense()
    assert d[-1, -1] == 1.0
    assert not d[-1, :-1].any() and not d[:-1, -1].any()


# -- padding ----------------------------------------------------------------------

def test_padding_example():
    P = padding_matrix(2, 1)
    np.testing.assert_array_equal(P.to_dense(), [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0], [0, 0, 1]])
    np.testing.assert_array_equal(apply(P, (4.0, 5.0), 2.0), [0, 4, 5, 0, 2])


def test_padding_zero_is_identity():
    assert padding_matrix(4, 0).equals(SparseOperator.identity(5))


def test_padding_wide():
    P = padding_matrix(1, 2)
    assert P.shape == (6, 2)
    assert ones_at(P) == [(3, 1), (6, 2)]


@given(st.integers(1, 40), st.integers(0, 5))
def test_padding_structure(d_x, pad):
    P = padding_matrix(d_x, pad)
    assert P.shape == (d_x + 2 * pad + 1, d_x + 1)
    assert P.nnz == d_x + 1
    assert_passthrough(P)


# -- dilation ---------------------------------------------------------------------

def test_dilation_example():
    D = dilation_matrix(2, 2)
    np.testing.assert_array_equal(D.to_dense(), [[1, 0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    np.testing.assert_array_equal(dilated_kernel((2.0, 3.0), 2), [2.0, 0.0, 3.0, 1.0])


def test_dilation_one_is_identity():
    assert dilation_matrix(4, 1).equals(SparseOperator.identity(5))


def test_dilation_three_by_three():
    # recomputed from the index rule: size 4 x ((3-1)*3 + 2) = 4 x 8
    D = dilation_matrix(3, 3)
    assert D.shape == (4, 8)
    assert ones_at(D) == [(1, 1), (2, 4), (3, 7), (4, 8)]


# -- stride -----------------------------------------------------------------------

def test_stride_example():
    S = stride_matrix(5, 2, 0, 1, 2)
    assert S.shape == (3, 5)
    assert ones_at(S) == [(1, 1), (2, 3), (3, 5)]
    np.testing.assert_array_equal(apply(S, (1.0, 2.0, 3.0, 4.0), 9.0), [1, 3, 9])


def test_stride_one_keeps_valid_positions():
    S = stride_matrix(6, 3, 0, 1, 1)
    assert S.rows == S.cols
    assert S.equals(SparseOperator.identity(5))


def test_stride_then_conv_example():
    cfg = ConvConfig(4, (1.0, 1.0), stride=2)
    np.testing.assert_array_equal(apply(conv_matrix(cfg), (1, 2, 3, 4)), [3, 7, 1])
    np.testing.assert_array_equal(naive_conv1d([1, 2, 3, 4], [1, 1]), [3, 5, 7])


# -- cross-correlation tensor -------------------------------------------------------

def test_cross_correlation_shape():
    assert cross_correlation_tensor(3, 2, 0, 1).shape == (3, 3, 4)


@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 2), st.integers(1, 3))
def test_cross_correlation_shape_formula(d_x, d_w, pad, dil):
    span = (d_w - 1) * dil
    if d_x + 2 * pad < span + 1:
        with pytest.raises(LoweringError):
            cross_correlation_tensor(d_x, d_w, pad, dil)
        return
    C = cross_correlation_tensor(d_x, d_w, pad, dil)
    assert C.shape == (span + 2, d_x - span + 2 * pad + 1, d_x + 2 * pad + 1)


def test_cross_correlation_contractions():
    C = cross_correlation_tensor(3, 2, 0, 1)
    sel = C.contract((1.0, 0.0, 1.0))
    np.testing.assert_array_equal(apply(sel, (5.0, 6.0, 7.0), 2.0), [5, 6, 2])
    M = C.contract((1.0, 2.0, 1.0))
    np.testing.assert_array_equal(apply(M, (1, 0, 0)), [1, 0, 1])
    np.testing.assert_array_equal(apply(M, (0, 1, 0)), [2, 1, 1])


def test_cross_correlation_contract_length_check():
    with pytest.raises(LoweringError):
        cross_correlation_tensor(3, 2, 0, 1).contract((1.0, 2.0))


# -- convolution / pooling ----------------------------------------------------------

def test_conv_example():
    a, b, c = 1.25, -0.5, 3.0
    np.testing.assert_allclose(apply(conv_matrix(ConvConfig(3, (1.0, 2.0))), (a, b, c)), [a + 2 * b, b + 2 * c, 1])


@pytest.mark.parametrize("pad, stride", [(0, 1), (2, 1), (1, 2), (2, 3)])
def test_unit_kernel_reindexes(pad, stride):
    x = np.arange(1.0, 8.0)
    out = apply(conv_matrix(ConvConfig(7, (1.0,), pad, 1, stride)), x)[:-1]
    expected = np.concatenate([np.zeros(pad), x, np.zeros(pad)])[::stride]
    np.testing.assert_array_equal(out, expected)


def test_avgpool_examples():
    np.testing.assert_array_equal(apply(avgpool_matrix(3, 2), (1, 3, 5)), [2, 4, 1])
    assert avgpool_matrix(5, 1).equals(SparseOperator.identity(6))
    np.testing.assert_array_equal(apply(avgpool_matrix(4, 2, stride=2), (1, 3, 5, 7)), [2, 6, 1])


def test_degenerate_output_is_an_error():
    with pytest.raises(LoweringError, match="degenerate output length"):
        ConvConfig(3, (1.0,) * 5)
    with pytest.raises(LoweringError):
        ConvConfig(3, ())
    with pytest.raises(LoweringError):
        ConvConfig(3, (np.nan,))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 20), st.integers(1, 5), st.integers(0, 2), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_conv_matrix_matches_naive(d_x, d_w, pad, dil, stride, seed):
    if d_x + 2 * pad - dil * (d_w - 1) - 1 < 0:
        return
    rng = np.random.default_rng(seed)
    w, x, h = rng.standard_normal(d_w), rng.standard_normal(d_x), rng.uniform(0.5, 2)
    cfg = ConvConfig(d_x, tuple(w), pad, dil, stride)
    M = conv_matrix(cfg)
    Y = apply(M, x, h)
    np.testing.assert_allclose(Y[:-1] / Y[-1], naive_conv1d(x / h, w, pad, dil, stride), rtol=0, atol=1e-12)
    assert M.equals(conv_matrix_monolithic(cfg))
    assert_passthrough(M)
    if dil == 1:
        A = avgpool_matrix(d_x, d_w, pad, stride)
        np.testing.assert_allclose(apply(A, x)[:-1], naive_avgpool1d(x, d_w, pad, stride), rtol=0, atol=1e-12)
        np.testing.assert_allclose(A.csr.data[:-1], 1.0 / d_w, rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 2), st.integers(1, 3), st.integers(1, 3))
def test_index_matrices_are_binary(d_x, d_w, pad, dil, stride):
    if d_x + 2 * pad - dil * (d_w - 1) - 1 < 0:
        return
    for M in (padding_matrix(d_x, pad), dilation_matrix(d_w, dil), stride_matrix(d_x, d_w, pad, dil, stride)):
        assert set(np.unique(M.to_dense())) <= {0.0, 1.0}
        assert M.to_dense()[-1, -1] == 1.0


# -- dropout ------------------------------------------------------------------------

def test_dropout_rate_zero_is_identity():
    assert dropout_matrix(5, 0.0, rng=np.random.default_rng(0)).equals(SparseOperator.identity(6))


def test_dropout_mask():
    np.testing.assert_array_equal(dropout_matrix(3, 0.5, mask=(1, 0, 1)).to_dense(), np.diag([1, 0, 1, 1]))


def test_dropout_errors():
    with pytest.raises(LoweringError):
        dropout_matrix(3, 1.0)
    with pytest.raises(LoweringError):
        dropout_matrix(3, 0.5, mask=(1, 0))


@pytest.mark.parametrize("rate", [0.1, 0.5, 0.8])
def test_dropout_sampling_rate(rate):
    D = dropout_matrix(100_000, rate, rng=np.random.default_rng(7))
    diag = D.csr.diagonal()
    assert diag[-1] == 1.0
    assert abs((1.0 - diag[:-1]).mean() - rate) <= 0.01


# -- flatten ------------------------------------------------------------------------

def test_flatten_1d_is_identity():
    assert flatten_matrix(ShapeSpec((5,))).equals(SparseOperator.identity(6))


def test_flatten_row_major_2d_is_identity():
    assert flatten_matrix(ShapeSpec((2, 2), 1)).equals(SparseOperator.identity(5))


def test_flatten_two_channel_permutation_by_probe():
    shape = ShapeSpec((2,), 2)
    # storage is channel-major (c0p0, c0p1, c1p0, c1p1); target is position-major
    F = flatten_matrix(shape, "channel-major", "channel-last")
    expected = np.zeros((5, 5))
    for out, src in enumerate([0, 2, 1, 3]):
        expected[out, src] = 1
    expected[4, 4] = 1
    np.testing.assert_array_equal(F.to_dense(), expected)
    probed = probe_extract_U(lambda v: direct_flatten(v, "channel-last"), shape, "channel-major")
    assert F.equals(probed)
    assert flatten_matrix(shape, "channel-last", "channel-last").equals(SparseOperator.identity(5))


@pytest.mark.parametrize("order", ["channel-major", "channel-last"])
@pytest.mark.parametrize("target", ["channel-major", "channel-last"])
def test_flatten_is_permutation(order, target):
    F = flatten_matrix(ShapeSpec((3, 2), 3), order, target).to_dense()
    assert (F.sum(axis=0) == 1).all() and (F.sum(axis=1) == 1).all()
    lowered = lower_layer(LayerSpec("flatten", target_order=target), ShapeSpec((3, 2), 3), order, "probe")
    np.testing.assert_array_equal(lowered.to_dense(), F)


# -- probing ----------------------------------------------------------------------

def test_probe_conv_matches_formula():
    shape = ShapeSpec((6,))
    U = probe_extract_U(lambda v: direct_conv(v, (1.0, 2.0)), shape)
    assert U.equals(conv_matrix(ConvConfig(6, (1.0, 2.0))))


def test_probe_identity():
    shape = ShapeSpec((3, 2), 2)
    U = probe_extract_U(lambda v: v, shape)
    assert U.equals(SparseOperator.identity(13))


def test_probe_2d_avgpool_rows_sum_to_one():
    U = probe_extract_U(lambda v: direct_avgpool(v, (3, 3)), ShapeSpec((4, 4)))
    assert U.shape == (5, 17)
    np.testing.assert_allclose(U.to_dense()[:-1].sum(axis=1), 1.0, rtol=1e-15)
    assert_passthrough(U)


def test_probe_non_uniform_operator():
    shape = ShapeSpec((4,))

    def op(v):
        k = 1 if v.n == 1 else 2
        return direct_conv(v, np.ones(k))

    with pytest.raises(LoweringError, match="non-uniform operator"):
        probe_extract_U(op, shape, chunk=2)


def test_probe_rejects_affine_operator():
    shape = ShapeSpec((3,))
    with pytest.raises(LoweringError, match="not linear"):
        probe_extract_U(lambda v: FeatureVolume(v.shape, v.values + 1.0, v.order), shape)


def test_probe_chunking_is_irrelevant():
    shape = ShapeSpec((3, 3), 2)
    w = np.random.default_rng(0).standard_normal((2, 2, 2, 2))
    a = probe_extract_U(lambda v: direct_conv(v, w, pad=1), shape, chunk=1)
    b = probe_extract_U(lambda v: direct_conv(v, w, pad=1), shape, chunk=1024)
    assert a.equals(b)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 2), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_probe_equals_formula_exactly(d_x, d_w, pad, dil, stride, seed):
    if d_x + 2 * pad - dil * (d_w - 1) - 1 < 0:
        return
    w = np.random.default_rng(seed).standard_normal(d_w)
    conv = LayerSpec("conv1d", weights=w, pad=pad, dilation=dil, stride=stride)
    shape = ShapeSpec((d_x,))
    assert lower_layer(conv, shape, method="probe").equals(lower_layer(conv, shape, method="formula"))
    if dil == 1:
        pool = LayerSpec("avgpool1d", kernel=d_w, pad=pad, stride=stride)
        assert lower_layer(pool, shape, method="probe").equals(lower_layer(pool, shape, method="formula"))


# -- lower_layer -------------------------------------------------------------------

def test_lower_layer_dropout_inference():
    shape = ShapeSpec((2, 2), 2)
    assert lower_layer(LayerSpec("dropout", rate=0.4), shape).equals(SparseOperator.identity(9))
    mask = np.array([1, 0, 1, 1, 0, 0, 1, 1.0])
    U = lower_layer(LayerSpec("dropout", rate=0.4, mask=mask), shape)
    np.testing.assert_array_equal(U.csr.diagonal(), np.append(mask, 1))


def test_lower_layer_errors():
    with pytest.raises(LoweringError, match="not a linear layer"):
        lower_layer(LayerSpec("respro"), ShapeSpec((3,)))
    with pytest.raises(LoweringError, match="no closed form"):
        lower_layer(LayerSpec("conv2d", weights=np.ones((1, 1, 2, 2))), ShapeSpec((3, 3)), method="formula")
    with pytest.raises(LoweringError):
        lower_layer(LayerSpec("flatten"), ShapeSpec((3,)), method="magic")


def test_lower_2d_multichannel_conv_passthrough():
    rng = np.random.default_rng(5)
    shape = ShapeSpec((4, 3), 2)
    w = rng.standard_normal((3, 2, 2, 2))
    layer = LayerSpec("conv2d", weights=w, pad=(1, 0), stride=(2, 1))
    U = lower_layer(layer, shape, "channel-last")
    assert_passthrough(U)
    x = rng.standard_normal(shape.size)
    direct = direct_conv(FeatureVolume.from_flat(x, shape, "channel-last"), w, (1, 0), 1, (2, 1)).flat()[0]
    np.testing.assert_allclose(apply(U, x)[:-1], direct, rtol=0, atol=1e-13)
