"""Backend equivalence: the numba kernels must match the numpy reference."""

import numpy as np
import pytest

from attnreg.kernels import numba_impl, numpy_impl

RTOL = 1e-5
ATOL = 1e-6


def _conv_case(rng, d):
    spatial = (7, 6) if d == 2 else (6, 5, 4)
    x = rng.standard_normal((3,) + spatial).astype(np.float32)
    w = rng.standard_normal((4, 3) + (3,) * d).astype(np.float32)
    return x, w, (1,) * d, (1,) * d


@pytest.mark.parametrize("d", [2, 3])
def test_conv_forward_backends_agree(rng, d):
    x, w, stride, pad = _conv_case(rng, d)
    a = numpy_impl.conv_forward(x, w, stride, pad)
    b = numba_impl.conv_forward(x, w, stride, pad)
    np.testing.assert_allclose(a, b, rtol=RTOL, atol=ATOL)


@pytest.mark.parametrize("d", [2, 3])
def test_conv_backward_backends_agree(rng, d):
    x, w, stride, pad = _conv_case(rng, d)
    g = rng.standard_normal(numpy_impl.conv_forward(x, w, stride, pad).shape).astype(
        np.float32
    )
    np.testing.assert_allclose(
        numpy_impl.conv_backward_w(g, x, w.shape, stride, pad),
        numba_impl.conv_backward_w(g, x, w.shape, stride, pad),
        rtol=RTOL,
        atol=1e-5,
    )
    np.testing.assert_allclose(
        numpy_impl.conv_backward_x(g, w, x.shape, stride, pad),
        numba_impl.conv_backward_x(g, w, x.shape, stride, pad),
        rtol=RTOL,
        atol=1e-5,
    )


@pytest.mark.parametrize("d", [2, 3])
def test_grid_sample_backends_agree(rng, d):
    spatial = (8, 7) if d == 2 else (6, 5, 4)
    img = rng.standard_normal((2,) + spatial).astype(np.float32)
    n = 50
    # include out-of-domain coordinates to exercise the clamping path
    coords = rng.uniform(-2, max(spatial) + 2, size=(d, n)).astype(np.float32)
    a = numpy_impl.grid_sample_forward(img, coords)
    b = numba_impl.grid_sample_forward(img, coords)
    np.testing.assert_allclose(a, b, rtol=RTOL, atol=ATOL)
    g = rng.standard_normal(a.shape).astype(np.float32)
    ga_img, ga_c = numpy_impl.grid_sample_backward(g, img, coords)
    gb_img, gb_c = numba_impl.grid_sample_backward(g, img, coords)
    np.testing.assert_allclose(ga_img, gb_img, rtol=RTOL, atol=ATOL)
    np.testing.assert_allclose(ga_c, gb_c, rtol=RTOL, atol=ATOL)


def test_grid_sample_exact_at_integer_coords(rng):
    img = rng.standard_normal((1, 5, 5)).astype(np.float32)
    ii, jj = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel()]).astype(np.float32)
    for impl in (numpy_impl, numba_impl):
        out = impl.grid_sample_forward(img, np.ascontiguousarray(coords))
        np.testing.assert_array_equal(out.reshape(1, 5, 5), img)


def test_backend_switching():
    import attnreg

    original = attnreg.backend_name()
    try:
        attnreg.set_backend("numpy")
        assert attnreg.backend_name() == "numpy"
        attnreg.set_backend("numba")
        assert attnreg.backend_name() == "numba"
    finally:
        attnreg.set_backend(original)
    assert set(attnreg.available_backends()) == {"numba", "numpy"}


def test_unknown_backend_rejected():
    import attnreg

    with pytest.raises(ValueError, match="unknown backend"):
        attnreg.set_backend("cuda")
