"""Pure-numpy reference kernels.

These are the fallback path used when numba is unavailable or disabled
via ``ATTNREG_BACKEND=numpy``.  They are vectorized but allocate more
than the jitted loops; both backends must agree to ~1e-6.

Layouts: images/features are channels-first ``[C, *spatial]``; sampling
coordinates are ``[d, N]`` flattened voxel-unit positions.  Convolution
is cross-correlation with zero padding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_forward(x, w, stride, pad):
    d = x.ndim - 1
    pad_width = [(0, 0)] + [(pad[i], pad[i]) for i in range(d)]
    xp = np.pad(x, pad_width, mode="constant")
    win = sliding_window_view(xp, w.shape[2:], axis=tuple(range(1, d + 1)))
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
    if d == 2:
        return np.einsum("oikl,ihwkl->ohw", w, win, optimize=True)
    return np.einsum("oiklm,ihwdklm->ohwd", w, win, optimize=True)


def conv_backward_w(g, x, w_shape, stride, pad):
    d = x.ndim - 1
    pad_width = [(0, 0)] + [(pad[i], pad[i]) for i in range(d)]
    xp = np.pad(x, pad_width, mode="constant")
    win = sliding_window_view(xp, w_shape[2:], axis=tuple(range(1, d + 1)))
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
    if d == 2:
        return np.einsum("ohw,ihwkl->oikl", g, win, optimize=True)
    return np.einsum("ohwd,ihwdklm->oiklm", g, win, optimize=True)


def conv_backward_x(g, w, x_shape, stride, pad):
    d = len(x_shape) - 1
    spatial = x_shape[1:]
    gxp = np.zeros(
        (x_shape[0],) + tuple(spatial[i] + 2 * pad[i] for i in range(d)),
        dtype=g.dtype,
    )
    kshape = w.shape[2:]
    out_spatial = g.shape[1:]
    # scatter one kernel tap at a time; k^d vectorized adds
    for koff in np.ndindex(*kshape):
        tap = w[(slice(None), slice(None)) + koff]  # [Cout, Cin]
        contrib = np.tensordot(tap, g, axes=(0, 0))  # [Cin, *out_spatial]
        sl = tuple(
            slice(koff[i], koff[i] + out_spatial[i] * stride[i], stride[i])
            for i in range(d)
        )
        gxp[(slice(None),) + sl] += contrib
    core = tuple(slice(pad[i], pad[i] + spatial[i]) for i in range(d))
    return np.ascontiguousarray(gxp[(slice(None),) + core])


def _corner_data(coords, spatial):
    d = coords.shape[0]
    lo, frac = [], []
    for i in range(d):
        c = np.clip(coords[i], 0.0, spatial[i] - 1)
        f = np.floor(c)
        f = np.minimum(f, spatial[i] - 2) if spatial[i] > 1 else np.zeros_like(f)
        lo.append(f.astype(np.int64))
        frac.append(c - f)
    return lo, frac


def grid_sample_forward(img, coords):
    """Multi-linear interpolation of img at float positions, clamped border.

    img: [C, *spatial], coords: [d, N] -> out [C, N].
    """
    d = img.ndim - 1
    spatial = img.shape[1:]
    lo, frac = _corner_data(coords, spatial)
    out = np.zeros((img.shape[0], coords.shape[1]), dtype=img.dtype)
    for corner in np.ndindex(*((2,) * d)):
        wgt = np.ones(coords.shape[1], dtype=img.dtype)
        idx = []
        for i in range(d):
            wgt = wgt * (frac[i] if corner[i] else (1.0 - frac[i]))
            idx.append(np.minimum(lo[i] + corner[i], spatial[i] - 1))
        out += img[(slice(None),) + tuple(idx)] * wgt
    return out


def grid_sample_backward(g, img, coords):
    d = img.ndim - 1
    spatial = img.shape[1:]
    C = img.shape[0]
    lo, frac = _corner_data(coords, spatial)
    inside = [
        (coords[i] > 0.0) & (coords[i] < spatial[i] - 1) for i in range(d)
    ]  # clamp has zero derivative outside
    gimg = np.zeros_like(img)
    gcoords = np.zeros_like(coords)
    flat = gimg.reshape(C, -1)
    strides = np.ones(d, dtype=np.int64)
    for i in range(d - 2, -1, -1):
        strides[i] = strides[i + 1] * spatial[i + 1]
    for corner in np.ndindex(*((2,) * d)):
        wgt = np.ones(coords.shape[1], dtype=img.dtype)
        idx_flat = np.zeros(coords.shape[1], dtype=np.int64)
        for i in range(d):
            wgt = wgt * (frac[i] if corner[i] else (1.0 - frac[i]))
            idx_flat += np.minimum(lo[i] + corner[i], spatial[i] - 1) * strides[i]
        vals = img.reshape(C, -1)[:, idx_flat]  # [C, N]
        for c in range(C):
            np.add.at(flat[c], idx_flat, g[c] * wgt)
        # d(out)/d(coord_i): replace weight factor i by +-1
        gsum = (g * vals).sum(axis=0)  # [N]
        for i in range(d):
            w_i = np.ones(coords.shape[1], dtype=img.dtype)
            for j in range(d):
                if j == i:
                    continue
                w_i = w_i * (frac[j] if corner[j] else (1.0 - frac[j]))
            sign = 1.0 if corner[i] else -1.0
            gcoords[i] += gsum * w_i * sign * inside[i]
    return gimg, gcoords
