"""Numba-jitted hot kernels (serial loops, deterministic reductions).

Same contracts as numpy_impl; first call per dtype pays a compile cost
that is cached on disk (cache=True).
"""

import numpy as np
from numba import njit


# -- convolution, 2d -------------------------------------------------------


@njit(cache=True, inline="always")
def _valid_range(k, pad, stride, size_in, size_out):
    """Output indices whose input index (o*stride - pad + k) is in bounds."""
    lo = -((k - pad) // stride) if k < pad else 0
    hi = (size_in - 1 + pad - k) // stride
    if lo < 0:
        lo = 0
    if hi > size_out - 1:
        hi = size_out - 1
    return lo, hi + 1


@njit(cache=True)
def _conv2d_fwd(x, w, sh, sw, ph, pw):
    Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((Cout, Ho, Wo), dtype=x.dtype)
    for o in range(Cout):
        for i in range(Cin):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, ph, sh, H, Ho)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, pw, sw, W, Wo)
                    wv = w[o, i, ky, kx]
                    for oy in range(ylo, yhi):
                        yy = oy * sh - ph + ky
                        for ox in range(xlo, xhi):
                            out[o, oy, ox] += wv * x[i, yy, ox * sw - pw + kx]
    return out


@njit(cache=True)
def _conv2d_bwd_w(g, x, kh, kw, sh, sw, ph, pw):
    Cin, H, W = x.shape
    Cout, Ho, Wo = g.shape
    gw = np.zeros((Cout, Cin, kh, kw), dtype=x.dtype)
    for o in range(Cout):
        for i in range(Cin):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, ph, sh, H, Ho)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, pw, sw, W, Wo)
                    acc = gw[o, i, ky, kx]
                    for oy in range(ylo, yhi):
                        yy = oy * sh - ph + ky
                        for ox in range(xlo, xhi):
                            acc += g[o, oy, ox] * x[i, yy, ox * sw - pw + kx]
                    gw[o, i, ky, kx] = acc
    return gw


@njit(cache=True)
def _conv2d_bwd_x(g, w, H, W, sh, sw, ph, pw):
    Cout, Ho, Wo = g.shape
    Cin = w.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    gx = np.zeros((Cin, H, W), dtype=g.dtype)
    for o in range(Cout):
        for i in range(Cin):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, ph, sh, H, Ho)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, pw, sw, W, Wo)
                    wv = w[o, i, ky, kx]
                    for oy in range(ylo, yhi):
                        yy = oy * sh - ph + ky
                        for ox in range(xlo, xhi):
                            gx[i, yy, ox * sw - pw + kx] += g[o, oy, ox] * wv
    return gx


# -- convolution, 3d -------------------------------------------------------


@njit(cache=True)
def _conv3d_fwd(x, w, sh, sw, sd, ph, pw, pd):
    Cin, H, W, D = x.shape
    Cout, _, kh, kw, kd = w.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    Do = (D + 2 * pd - kd) // sd + 1
    out = np.zeros((Cout, Ho, Wo, Do), dtype=x.dtype)
    for o in range(Cout):
        for i in range(Cin):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, ph, sh, H, Ho)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, pw, sw, W, Wo)
                    for kz in range(kd):
                        zlo, zhi = _valid_range(kz, pd, sd, D, Do)
                        wv = w[o, i, ky, kx, kz]
                        for oy in range(ylo, yhi):
                            yy = oy * sh - ph + ky
                            for ox in range(xlo, xhi):
                                xx = ox * sw - pw + kx
                                for oz in range(zlo, zhi):
                                    out[o, oy, ox, oz] += wv * x[i, yy, xx, oz * sd - pd + kz]
    return out


@njit(cache=True)
def _conv3d_bwd_w(g, x, kh, kw, kd, sh, sw, sd, ph, pw, pd):
    Cin, H, W, D = x.shape
    Cout, Ho, Wo, Do = g.shape
    gw = np.zeros((Cout, Cin, kh, kw, kd), dtype=x.dtype)
    for o in range(Cout):
        for i in range(Cin):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, ph, sh, H, Ho)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, pw, sw, W, Wo)
                    for kz in range(kd):
                        zlo, zhi = _valid_range(kz, pd, sd, D, Do)
                        acc = gw[o, i, ky, kx, kz]
                        for oy in range(ylo, yhi):
                            yy = oy * sh - ph + ky
                            for ox in range(xlo, xhi):
                                xx = ox * sw - pw + kx
                                for oz in range(zlo, zhi):
                                    acc += g[o, oy, ox, oz] * x[i, yy, xx, oz * sd - pd + kz]
                        gw[o, i, ky, kx, kz] = acc
    return gw


@njit(cache=True)
def _conv3d_bwd_x(g, w, H, W, D, sh, sw, sd, ph, pw, pd):
    Cout, Ho, Wo, Do = g.shape
    Cin = w.shape[1]
    kh, kw, kd = w.shape[2], w.shape[3], w.shape[4]
    gx = np.zeros((Cin, H, W, D), dtype=g.dtype)
    for o in range(Cout):
        for i in range(Cin):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, ph, sh, H, Ho)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, pw, sw, W, Wo)
                    for kz in range(kd):
                        zlo, zhi = _valid_range(kz, pd, sd, D, Do)
                        wv = w[o, i, ky, kx, kz]
                        for oy in range(ylo, yhi):
                            yy = oy * sh - ph + ky
                            for ox in range(xlo, xhi):
                                xx = ox * sw - pw + kx
                                for oz in range(zlo, zhi):
                                    gx[i, yy, xx, oz * sd - pd + kz] += g[o, oy, ox, oz] * wv
    return gx


def conv_forward(x, w, stride, pad):
    if x.ndim == 3:
        return _conv2d_fwd(x, w, stride[0], stride[1], pad[0], pad[1])
    return _conv3d_fwd(x, w, stride[0], stride[1], stride[2], pad[0], pad[1], pad[2])


def conv_backward_w(g, x, w_shape, stride, pad):
    if x.ndim == 3:
        return _conv2d_bwd_w(g, x, w_shape[2], w_shape[3], stride[0], stride[1], pad[0], pad[1])
    return _conv3d_bwd_w(
        g, x, w_shape[2], w_shape[3], w_shape[4],
        stride[0], stride[1], stride[2], pad[0], pad[1], pad[2],
    )


def conv_backward_x(g, w, x_shape, stride, pad):
    if len(x_shape) == 3:
        return _conv2d_bwd_x(g, w, x_shape[1], x_shape[2], stride[0], stride[1], pad[0], pad[1])
    return _conv3d_bwd_x(
        g, w, x_shape[1], x_shape[2], x_shape[3],
        stride[0], stride[1], stride[2], pad[0], pad[1], pad[2],
    )


# -- grid sampling ----------------------------------------------------------


@njit(cache=True)
def _gs2d_fwd(img, coords):
    C, H, W = img.shape
    N = coords.shape[1]
    out = np.zeros((C, N), dtype=img.dtype)
    for n in range(N):
        cy = min(max(coords[0, n], 0.0), H - 1.0)
        cx = min(max(coords[1, n], 0.0), W - 1.0)
        y0 = min(int(np.floor(cy)), H - 2) if H > 1 else 0
        x0 = min(int(np.floor(cx)), W - 2) if W > 1 else 0
        fy = cy - y0
        fx = cx - x0
        y1 = min(y0 + 1, H - 1)
        x1 = min(x0 + 1, W - 1)
        for c in range(C):
            out[c, n] = (
                img[c, y0, x0] * (1 - fy) * (1 - fx)
                + img[c, y0, x1] * (1 - fy) * fx
                + img[c, y1, x0] * fy * (1 - fx)
                + img[c, y1, x1] * fy * fx
            )
    return out


@njit(cache=True)
def _gs2d_bwd(g, img, coords):
    C, H, W = img.shape
    N = coords.shape[1]
    gimg = np.zeros_like(img)
    gcoords = np.zeros_like(coords)
    for n in range(N):
        cy = min(max(coords[0, n], 0.0), H - 1.0)
        cx = min(max(coords[1, n], 0.0), W - 1.0)
        in_y = 0.0 < coords[0, n] < H - 1.0
        in_x = 0.0 < coords[1, n] < W - 1.0
        y0 = min(int(np.floor(cy)), H - 2) if H > 1 else 0
        x0 = min(int(np.floor(cx)), W - 2) if W > 1 else 0
        fy = cy - y0
        fx = cx - x0
        y1 = min(y0 + 1, H - 1)
        x1 = min(x0 + 1, W - 1)
        gy = 0.0
        gx = 0.0
        for c in range(C):
            gv = g[c, n]
            gimg[c, y0, x0] += gv * (1 - fy) * (1 - fx)
            gimg[c, y0, x1] += gv * (1 - fy) * fx
            gimg[c, y1, x0] += gv * fy * (1 - fx)
            gimg[c, y1, x1] += gv * fy * fx
            gy += gv * (
                -(1 - fx) * img[c, y0, x0]
                - fx * img[c, y0, x1]
                + (1 - fx) * img[c, y1, x0]
                + fx * img[c, y1, x1]
            )
            gx += gv * (
                -(1 - fy) * img[c, y0, x0]
                + (1 - fy) * img[c, y0, x1]
                - fy * img[c, y1, x0]
                + fy * img[c, y1, x1]
            )
        if in_y:
            gcoords[0, n] = gy
        if in_x:
            gcoords[1, n] = gx
    return gimg, gcoords


@njit(cache=True)
def _gs3d_fwd(img, coords):
    C, H, W, D = img.shape
    N = coords.shape[1]
    out = np.zeros((C, N), dtype=img.dtype)
    for n in range(N):
        cy = min(max(coords[0, n], 0.0), H - 1.0)
        cx = min(max(coords[1, n], 0.0), W - 1.0)
        cz = min(max(coords[2, n], 0.0), D - 1.0)
        y0 = min(int(np.floor(cy)), H - 2) if H > 1 else 0
        x0 = min(int(np.floor(cx)), W - 2) if W > 1 else 0
        z0 = min(int(np.floor(cz)), D - 2) if D > 1 else 0
        fy = cy - y0
        fx = cx - x0
        fz = cz - z0
        y1 = min(y0 + 1, H - 1)
        x1 = min(x0 + 1, W - 1)
        z1 = min(z0 + 1, D - 1)
        for c in range(C):
            c00 = img[c, y0, x0, z0] * (1 - fz) + img[c, y0, x0, z1] * fz
            c01 = img[c, y0, x1, z0] * (1 - fz) + img[c, y0, x1, z1] * fz
            c10 = img[c, y1, x0, z0] * (1 - fz) + img[c, y1, x0, z1] * fz
            c11 = img[c, y1, x1, z0] * (1 - fz) + img[c, y1, x1, z1] * fz
            c0 = c00 * (1 - fx) + c01 * fx
            c1 = c10 * (1 - fx) + c11 * fx
            out[c, n] = c0 * (1 - fy) + c1 * fy
    return out


@njit(cache=True)
def _gs3d_bwd(g, img, coords):
    C, H, W, D = img.shape
    N = coords.shape[1]
    gimg = np.zeros_like(img)
    gcoords = np.zeros_like(coords)
    for n in range(N):
        cy = min(max(coords[0, n], 0.0), H - 1.0)
        cx = min(max(coords[1, n], 0.0), W - 1.0)
        cz = min(max(coords[2, n], 0.0), D - 1.0)
        in_y = 0.0 < coords[0, n] < H - 1.0
        in_x = 0.0 < coords[1, n] < W - 1.0
        in_z = 0.0 < coords[2, n] < D - 1.0
        y0 = min(int(np.floor(cy)), H - 2) if H > 1 else 0
        x0 = min(int(np.floor(cx)), W - 2) if W > 1 else 0
        z0 = min(int(np.floor(cz)), D - 2) if D > 1 else 0
        fy = cy - y0
        fx = cx - x0
        fz = cz - z0
        y1 = min(y0 + 1, H - 1)
        x1 = min(x0 + 1, W - 1)
        z1 = min(z0 + 1, D - 1)
        wy = (1 - fy, fy)
        wx = (1 - fx, fx)
        wz = (1 - fz, fz)
        ys = (y0, y1)
        xs = (x0, x1)
        zs = (z0, z1)
        gy = 0.0
        gx = 0.0
        gz = 0.0
        for c in range(C):
            gv = g[c, n]
            for a in range(2):
                for b in range(2):
                    for e in range(2):
                        v = img[c, ys[a], xs[b], zs[e]]
                        gimg[c, ys[a], xs[b], zs[e]] += gv * wy[a] * wx[b] * wz[e]
                        sy = 1.0 if a == 1 else -1.0
                        sx = 1.0 if b == 1 else -1.0
                        sz = 1.0 if e == 1 else -1.0
                        gy += gv * v * sy * wx[b] * wz[e]
                        gx += gv * v * wy[a] * sx * wz[e]
                        gz += gv * v * wy[a] * wx[b] * sz
        if in_y:
            gcoords[0, n] = gy
        if in_x:
            gcoords[1, n] = gx
        if in_z:
            gcoords[2, n] = gz
    return gimg, gcoords


def grid_sample_forward(img, coords):
    if img.ndim == 3:
        return _gs2d_fwd(img, coords)
    return _gs3d_fwd(img, coords)


def grid_sample_backward(g, img, coords):
    if img.ndim == 3:
        return _gs2d_bwd(g, img, coords)
    return _gs3d_bwd(g, img, coords)
