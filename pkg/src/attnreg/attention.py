"""Parameter-free feature matching and location retrieval.

Each fixed-image feature vector is compared (inner product or cosine)
against the moving-image features in a small odd window around the same
voxel.  The softmax-normalized similarities weight a fixed value matrix
whose rows are the window offset vectors, turning feature similarity
directly into a sub-voxel displacement.  The value matrix carries no
gradient; gradients flow to both feature maps.

Sign convention: the candidate feature at offset ``k`` is paired with
the output vector ``+k``, so that for a moving map equal to the fixed
map translated by ``s`` the retrieved displacement ``u = s`` satisfies
``warp(M, u + identity) == F`` under this package's warping semantics.
``radial_value_matrix`` provides the negated (center-pointing) variant
for inspection.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, as_var, constant
from .errors import InputError, ParamError, ShapeError


@dataclass(frozen=True)
class AttentionConfig:
    """Settings for the matching step.

    temperature: positive float, or "sqrt_dk" for sqrt(channel count).
    similarity: "inner_product" or "cosine".
    window: odd extent per axis (>= 3).
    """

    temperature: object = "sqrt_dk"
    similarity: str = "inner_product"
    window: int = 3

    def __post_init__(self):
        if self.window % 2 == 0 or self.window < 3:
            raise ParamError(f"window must be odd and >= 3, got {self.window}")
        if self.similarity not in ("inner_product", "cosine"):
            raise ParamError(f"unknown similarity {self.similarity!r}")
        if self.temperature != "sqrt_dk" and float(self.temperature) <= 0:
            raise ParamError(f"temperature must be positive, got {self.temperature}")

    def resolve_temperature(self, channels):
        if self.temperature == "sqrt_dk":
            return float(np.sqrt(channels))
        return float(self.temperature)


def window_offsets(ndim, window=3):
    """Offset vectors k, lexicographic over {-r..r}^ndim; shape [w^ndim, ndim]."""
    r = window // 2
    return np.array(
        list(itertools.product(range(-r, r + 1), repeat=ndim)), dtype=np.float64
    )


def value_matrix(ndim, window=3, dtype=np.float32):
    """Rows hold the offset vector +k for each window candidate.

    Row for k=0 is the zero vector, each row's norm equals |k|, and the
    rows sum to zero (central symmetry).
    """
    return window_offsets(ndim, window).astype(dtype)


def radial_value_matrix(ndim, window=3, dtype=np.float32):
    """Negated variant: rows point from each candidate back to the center."""
    return -value_matrix(ndim, window, dtype)


def extract_windows(m, window=3):
    """Sliding-window candidate features: [C, *spatial] -> [N, w^d, C].

    Row order matches ``window_offsets``; borders replicate-pad so every
    voxel sees a full candidate set.
    """
    m = as_var(m)
    if window % 2 == 0:
        raise ParamError(f"window must be odd, got {window}")
    d = m.ndim - 1
    if d not in (2, 3):
        raise ShapeError(f"expected [C, *spatial] with 2 or 3 spatial axes, got {m.shape}")
    r = window // 2
    spatial = m.shape[1:]
    n = int(np.prod(spatial))
    padded = ad.pad_replicate(m, [(0, 0)] + [(r, r)] * d)
    offs = [tuple(int(v) + r for v in row) for row in window_offsets(d, window)]
    wd = len(offs)
    C = m.shape[0]

    p = padded  # gather from the padded map; backward scatters per offset
    out = np.empty((n, wd, C), dtype=m.dtype)
    for j, off in enumerate(offs):
        sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, spatial))
        out[:, j, :] = p.data[sl].reshape(C, n).T

    def bw(g):
        gp = np.zeros(p.shape, dtype=p.dtype)
        for j, off in enumerate(offs):
            sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, spatial))
            gp[sl] += g[:, j, :].T.reshape((C,) + spatial)
        return ((p, gp),)

    return Var._from_op(out, (p,), bw)


def field_attention(f, m, cfg=None, return_weights=False):
    """Match f against windowed candidates of m; retrieve a displacement field.

    f, m: [C, *spatial] feature maps of identical shape.  Returns a
    d-channel displacement Var (and optionally the attention weights as
    a [N, w^d] numpy array).  The value matrix is a constant; gradients
    reach f and m only.
    """
    cfg = cfg or AttentionConfig()
    f, m = as_var(f), as_var(m)
    if f.shape != m.shape:
        raise ShapeError(f"feature shape mismatch: {f.shape} vs {m.shape}")
    d = f.ndim - 1
    C = f.shape[0]
    spatial = f.shape[1:]
    n = int(np.prod(spatial))

    q = ad.reshape(f, (C, n))
    q = ad.transpose(q, (1, 0))
    q = ad.reshape(q, (n, 1, C))
    k = extract_windows(m, cfg.window)

    if cfg.similarity == "cosine":
        eps = 1e-8
        qn = ad.sqrt(ad.vsum(q * q, axis=-1, keepdims=True) + eps)
        kn = ad.sqrt(ad.vsum(k * k, axis=-1, keepdims=True) + eps)
        q = q / qn
        k = k / kn
        t = cfg.resolve_temperature(1)  # cosine scores are already unit-scale
    else:
        t = cfg.resolve_temperature(C)

    scores = ad.matmul(q, ad.swapaxes(k, 1, 2))  # [n, 1, w^d]
    weights = ad.softmax(scores, axis=-1, temperature=t)
    r = constant(value_matrix(d, cfg.window, f.dtype))
    u = ad.matmul(weights, r)  # [n, 1, d]
    u = ad.reshape(u, (n, d))
    u = ad.transpose(u, (1, 0))
    u = ad.reshape(u, (d,) + spatial)
    if return_weights:
        return u, weights.data.reshape(n, -1)
    return u


def sparsity_report(weights):
    """Mean per-voxel max attention weight, in (0, 1]."""
    w = weights.data if isinstance(weights, Var) else np.asarray(weights)
    w = w.reshape(-1, w.shape[-1])
    sums = w.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise InputError("attention rows do not sum to 1; not a softmax output")
    return float(w.max(axis=-1).mean())
