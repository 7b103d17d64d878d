"""Differentiable similarity and regularity terms.

All losses return scalar Vars and pass finite-difference gradient
checks at f64.  Stability constants are fixed here so tests can be
bit-exact: NCC and Dice use eps=1e-5, MI uses eps=1e-10 inside logs.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import as_var, constant
from .errors import InputError, ParamError, ShapeError

NCC_EPS = 1e-5
DICE_EPS = 1e-5
MI_EPS = 1e-10


def _as_image(x):
    x = as_var(x)
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape)
    if x.ndim == 3:
        # [1, H, W] is a channeled 2d image; anything else is a bare volume
        return x if x.shape[0] == 1 else ad.reshape(x, (1,) + x.shape)
    if x.ndim == 4 and x.shape[0] == 1:
        return x
    raise ShapeError(f"expected a single-channel image, got {x.shape}")


def _boxsum(x, window):
    d = x.ndim - 1
    kernel = constant(np.ones((1, 1) + (window,) * d, dtype=x.dtype))
    return nnops.conv(x, kernel)


def ncc_loss(img_f, img_w, window=9):
    """Negative mean local normalized cross correlation.

    Window sums use zero padding with per-voxel window counts, so border
    windows are smaller but correctly normalized.  Perfect local linear
    agreement (positive slope) gives -1.
    """
    f = _as_image(img_f)
    w = _as_image(img_w)
    if f.shape != w.shape:
        raise ShapeError(f"image shape mismatch: {f.shape} vs {w.shape}")
    if window % 2 == 0:
        raise ParamError(f"window must be odd, got {window}")
    if any(window > s for s in f.shape[1:]):
        raise ParamError(f"window {window} exceeds image extents {f.shape[1:]}")
    eps = NCC_EPS
    ones = constant(np.ones(f.shape, dtype=f.dtype))
    n = _boxsum(ones, window)
    sum_f = _boxsum(f, window)
    sum_w = _boxsum(w, window)
    sum_ff = _boxsum(f * f, window)
    sum_ww = _boxsum(w * w, window)
    sum_fw = _boxsum(f * w, window)
    mu_f = sum_f / n
    mu_w = sum_w / n
    cross = sum_fw - mu_f * sum_w
    var_f = ad.relu(sum_ff - mu_f * sum_f)
    var_w = ad.relu(sum_ww - mu_w * sum_w)
    cc = (cross + eps) / (ad.sqrt(var_f * var_w) + eps)
    return -ad.vmean(cc)


def mi_loss(img_f, img_w, bins=32):
    """Negative mutual information via a soft-binned joint histogram.

    Intensities must lie in [0, 1].  Samples are assigned to bins with a
    triangular kernel of width one bin, normalized per sample, which
    keeps the estimator differentiable.
    """
    f = _as_image(img_f)
    w = _as_image(img_w)
    if f.shape != w.shape:
        raise ShapeError(f"image shape mismatch: {f.shape} vs {w.shape}")
    if bins < 2:
        raise ParamError(f"bins must be >= 2, got {bins}")
    for name, img in (("first", f), ("second", w)):
        lo, hi = float(img.data.min()), float(img.data.max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise InputError(
                f"{name} image intensities must be normalized to [0,1], "
                f"got range [{lo:.4g}, {hi:.4g}]"
            )

    def soft_weights(img):
        n = img.size
        v = ad.reshape(img, (n, 1))
        centers = constant(
            ((np.arange(bins) + 0.5) / bins).reshape(1, bins).astype(img.dtype)
        )
        dist = ad.vabs(v - centers) * float(bins)
        wgt = ad.relu(1.0 - dist)
        return wgt / ad.vsum(wgt, axis=1, keepdims=True)

    wf = soft_weights(f)
    ww = soft_weights(w)
    n = f.size
    pj = ad.matmul(ad.transpose(wf, (1, 0)), ww) * (1.0 / n)
    pf = ad.vsum(pj, axis=1, keepdims=True)
    pw = ad.vsum(pj, axis=0, keepdims=True)
    mi = ad.vsum(
        pj * (ad.log(pj + MI_EPS) - ad.log(pf + MI_EPS) - ad.log(pw + MI_EPS))
    )
    return -mi


def diffusion_reg(u):
    """Mean squared forward-difference gradient of a displacement field.

    Normalization: the squared differences are averaged per axis and the
    axis means are averaged, so a unit ramp along one of d axes scores 1/d.
    """
    u = as_var(u)
    d = u.ndim - 1
    total = None
    for ax in range(1, d + 1):
        fwd = (slice(None),) * ax + (slice(1, None),)
        bck = (slice(None),) * ax + (slice(None, -1),)
        diff = u[fwd] - u[bck]
        term = ad.vmean(diff * diff)
        total = term if total is None else total + term
    return total * (1.0 / d)


def mse_loss(img_f, img_w):
    """Mean squared intensity difference."""
    f, w = as_var(img_f), as_var(img_w)
    if f.shape != w.shape:
        raise ShapeError(f"image shape mismatch: {f.shape} vs {w.shape}")
    diff = f - w
    return ad.vmean(diff * diff)


def dice_loss(labels_f, labels_w):
    """Soft Dice loss over one-hot (or linearly warped one-hot) channels."""
    a, b = as_var(labels_f), as_var(labels_w)
    if a.shape != b.shape:
        raise ShapeError(
            f"label class/shape mismatch: {a.shape} vs {b.shape}"
        )
    axes = tuple(range(1, a.ndim))
    inter = ad.vsum(a * b, axis=axes)
    sizes = ad.vsum(a, axis=axes) + ad.vsum(b, axis=axes)
    dice = (2.0 * inter + DICE_EPS) / (sizes + DICE_EPS)
    return 1.0 - ad.vmean(dice)


def tre_loss(phi, keypoints):
    """Mean Euclidean landmark error in millimeters, differentiable in phi.

    phi is sampled at the fixed-image keypoints and compared against the
    paired moving-image keypoints, scaled by the voxel spacing.
    """
    fixed = np.asarray(keypoints.fixed_points, dtype=np.float64)
    moving = np.asarray(keypoints.moving_points, dtype=np.float64)
    spacing = np.asarray(keypoints.spacing, dtype=np.float64)
    d = phi.ndim
    limits = np.array(phi.spatial, dtype=np.float64) - 1
    bad = np.where((fixed < 0).any(axis=1) | (fixed > limits).any(axis=1))[0]
    if bad.size:
        raise InputError(
            f"keypoints outside the fixed-image domain at rows {bad.tolist()}"
        )
    phi_at = nnops.sample_points(phi.grid(), fixed)  # [d, P]
    target = constant(moving.T.astype(str(phi.dtype)))
    scale = constant(spacing.reshape(d, 1).astype(str(phi.dtype)))
    diff = (phi_at - target) * scale
    sq = ad.vsum(diff * diff, axis=0)
    return ad.vmean(ad.sqrt(sq + 1e-12))
