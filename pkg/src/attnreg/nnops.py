"""Structured Var operations backed by the kernel layer.

All spatial data is channels-first: images and feature maps are
``[C, *spatial]`` with 2 or 3 spatial axes.  Coordinates are voxel
units; interpolation is multi-linear with clamp-to-border.

Resolution transfer convention (fixed package-wide): ``upsample2`` uses
the cell-center (align-corners-false) alignment.  Along each axis,
fine sample 2i sits a quarter cell below coarse sample i and fine
sample 2i+1 a quarter cell above, so

    out[2i]   = 0.75*in[i] + 0.25*in[i-1]      (in[-1] := in[0])
    out[2i+1] = 0.75*in[i] + 0.25*in[i+1]      (in[n]  := in[n-1])

``downsample2`` is plain factor-2 average pooling.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .autodiff import Var, as_var
from .errors import InputError, ParamError, ShapeError


def _spatial_ndim(x):
    d = x.ndim - 1
    if d not in (2, 3):
        raise ShapeError(f"expected [C, *spatial] with 2 or 3 spatial axes, got {x.shape}")
    return d


def conv(x, w, stride=1, padding=None):
    """Cross-correlation with zero padding, differentiable in x and w.

    x: [C_in, *spatial], w: [C_out, C_in, *kernel].  ``padding=None``
    means 'same' (kernel//2 per axis); kernels must be odd-sized.
    """
    x, w = as_var(x), as_var(w)
    d = _spatial_ndim(x)
    if w.ndim != d + 2:
        raise ShapeError(f"kernel rank {w.ndim} does not match input {x.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[0]} channels, kernel expects {w.shape[1]}"
        )
    kshape = w.shape[2:]
    if any(k % 2 == 0 for k in kshape):
        raise ParamError(f"kernel extents must be odd, got {kshape}")
    stride = (stride,) * d if np.isscalar(stride) else tuple(stride)
    if padding is None:
        pad = tuple(k // 2 for k in kshape)
    else:
        pad = (padding,) * d if np.isscalar(padding) else tuple(padding)
    out = kernels.conv_forward(x.data, w.data, stride, pad)

    def bw(g):
        g = np.ascontiguousarray(g)
        return (
            (x, kernels.conv_backward_x(g, w.data, x.shape, stride, pad)),
            (w, kernels.conv_backward_w(g, x.data, w.shape, stride, pad)),
        )

    return Var._from_op(out, (x, w), bw)


def downsample2(x):
    """Factor-2 average pooling over the spatial axes (extents must be even)."""
    x = as_var(x)
    d = _spatial_ndim(x)
    spatial = x.shape[1:]
    if any(s < 2 or s % 2 for s in spatial):
        raise ShapeError(f"downsample2 needs even spatial extents >= 2, got {spatial}")
    C = x.shape[0]
    if d == 2:
        r = x.data.reshape(C, spatial[0] // 2, 2, spatial[1] // 2, 2)
        out = r.mean(axis=(2, 4))
    else:
        r = x.data.reshape(
            C, spatial[0] // 2, 2, spatial[1] // 2, 2, spatial[2] // 2, 2
        )
        out = r.mean(axis=(2, 4, 6))
    n = 2**d

    def bw(g):
        gx = np.repeat(g / n, 2, axis=1)
        for ax in range(2, d + 1):
            gx = np.repeat(gx, 2, axis=ax)
        return ((x, gx.astype(x.dtype, copy=False)),)

    return Var._from_op(out.astype(x.dtype, copy=False), (x,), bw)


def _up1d_axis(a, axis):
    """Double one axis with the cell-center linear rule (numpy array in/out)."""
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    lo = a[np.maximum(np.arange(n) - 1, 0)]
    hi = a[np.minimum(np.arange(n) + 1, n - 1)]
    out = np.empty((2 * n,) + a.shape[1:], dtype=a.dtype)
    out[0::2] = 0.75 * a + 0.25 * lo
    out[1::2] = 0.75 * a + 0.25 * hi
    return np.moveaxis(out, 0, axis)


def _up1d_axis_t(g, axis):
    """Transpose (adjoint) of _up1d_axis."""
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0] // 2
    ge = g[0::2]
    go = g[1::2]
    out = 0.75 * (ge + go)
    # clamped edge taps fold back onto the first/last cell
    out[: n - 1] += 0.25 * ge[1:n]
    out[0] += 0.25 * ge[0]
    out[1:n] += 0.25 * go[: n - 1]
    out[n - 1] += 0.25 * go[n - 1]
    return np.moveaxis(out, 0, axis)


def upsample2(x):
    """Factor-2 linear upsampling (cell-center convention, see module doc)."""
    x = as_var(x)
    d = _spatial_ndim(x)
    out = x.data
    for ax in range(1, d + 1):
        out = _up1d_axis(out, ax)

    def bw(g):
        gx = g
        for ax in range(1, d + 1):
            gx = _up1d_axis_t(gx, ax)
        return ((x, gx.astype(x.dtype, copy=False)),)

    return Var._from_op(np.ascontiguousarray(out), (x,), bw)


def grid_sample(img, coords):
    """Sample img [C, *spatial] at coords [d, *out_spatial] (voxel units).

    Linear interpolation; out-of-domain coordinates clamp to the border
    (zero gradient to the clamped coordinate there).  Differentiable in
    both img and coords.
    """
    img, coords = as_var(img), as_var(coords)
    d = _spatial_ndim(img)
    if coords.shape[0] != d:
        raise ShapeError(
            f"coords must have {d} channels for a {d}-d image, got {coords.shape}"
        )
    if np.isnan(coords.data).any():
        raise InputError("sampling coordinates contain NaN")
    out_spatial = coords.shape[1:]
    flat = np.ascontiguousarray(coords.data.reshape(d, -1))
    out = kernels.grid_sample_forward(img.data, flat)

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(img.shape[0], -1))
        gimg, gcoords = kernels.grid_sample_backward(g2, img.data, flat)
        return ((img, gimg), (coords, gcoords.reshape(coords.shape)))

    return Var._from_op(out.reshape((img.shape[0],) + out_spatial), (img, coords), bw)


def sample_points(field, points):
    """Interpolate field [C, *spatial] at float points [P, d] -> [C, P].

    Differentiable w.r.t. the field only; the points are fixed data.
    """
    field = as_var(field)
    pts = np.asarray(points, dtype=field.dtype)
    coords = Var(np.ascontiguousarray(pts.T), dtype=field.dtype)
    return grid_sample(field, coords)
