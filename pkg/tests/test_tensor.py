import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchdesc.errors import DimensionError
from patchdesc.tensor import (
    as_tensor, col2im, conv_output_size, get_dtype, im2col, matmul, precision, set_precision,
)


def naive_im2col(x, k, s, p):
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    out = np.zeros((C * k * k, Ho * Wo), dtype=x.dtype)
    for c in range(C):
        for i in range(k):
            for j in range(k):
                for oy in range(Ho):
                    for ox in range(Wo):
                        out[(c * k + i) * k + j, oy * Wo + ox] = xp[c, oy * s + i, ox * s + j]
    return out


def test_matmul_shapes():
    a = np.arange(6.0).reshape(2, 3)
    b = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(matmul(a, b), a @ b)
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 3\)"):
        matmul(a, b.T)


def test_conv_output_size_floor_and_error():
    assert conv_output_size(64, 3, 1, 1) == 64
    assert conv_output_size(16, 3, 3, 0) == 5
    assert conv_output_size(7, 2, 2, 0) == 3
    with pytest.raises(DimensionError):
        conv_output_size(2, 5, 1, 0)


def test_im2col_column_is_receptive_field():
    x = np.arange(16.0).reshape(1, 4, 4)
    cols = im2col(x, 3, 1, 0)
    assert cols.shape == (9, 4)
    np.testing.assert_array_equal(cols[:, 0], x[0, :3, :3].ravel())
    np.testing.assert_array_equal(cols[:, 3], x[0, 1:, 1:].ravel())


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 0), (5, 1, 2), (2, 2, 0), (3, 3, 1)])
def test_im2col_matches_loops(rng, k, s, p):
    x = rng.standard_normal((2, 7, 8))
    np.testing.assert_array_equal(im2col(x, k, s, p), naive_im2col(x, k, s, p))
    batch = rng.standard_normal((3, 2, 7, 8))
    cols = im2col(batch, k, s, p)
    for b in range(3):
        np.testing.assert_array_equal(cols[b], naive_im2col(batch[b], k, s, p))


@settings(max_examples=40, deadline=None)
@given(
    C=st.integers(1, 3), H=st.integers(3, 9), W=st.integers(3, 9),
    k=st.integers(1, 3), s=st.integers(1, 3), p=st.integers(0, 2), seed=st.integers(0, 2**16),
)
def test_col2im_is_adjoint_of_im2col(C, H, W, k, s, p, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, C, H, W))
    cols = im2col(x, k, s, p)
    c = r.standard_normal(cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * col2im(c, x.shape, k, s, p))
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


def test_col2im_counts_overlaps():
    ones = np.ones((9, 16))
    img = col2im(ones, (1, 6, 6), 3, 1, 0)
    # corner pixel is covered by one window, the centre ones by nine
    assert img[0, 0, 0] == 1 and img[0, 2, 2] == 9


def test_col2im_rejects_bad_geometry():
    with pytest.raises(DimensionError):
        col2im(np.zeros((9, 15)), (1, 6, 6), 3, 1, 0)


def test_precision_context_restores():
    assert get_dtype() == np.float32
    with precision("float64"):
        assert as_tensor([1, 2]).dtype == np.float64
    assert as_tensor([1, 2]).dtype == np.float32
    with pytest.raises(ValueError):
        set_precision("float16")


def test_row_major_layout():
    t = as_tensor(np.arange(24).reshape(2, 3, 4))
    assert t.flags.c_contiguous
    assert t.ravel()[1] == t[0, 0, 1]
    assert t.size == np.prod(t.shape)
