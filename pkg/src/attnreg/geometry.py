"""Transforms and the differentiable operations that consume them.

A dense transform is represented by its displacement part only
(:class:`TransformGrid` stores ``disp``); the absolute sampling grid is
``disp + identity`` and is materialized on demand.  Keeping the
identity implicit makes the displacement/transform conversion an exact
(bitwise) round trip and makes the identity transform exact by
construction.

Coordinates are voxel units throughout; physical spacing enters only in
the evaluation metrics.  Warping semantics: ``warp(img, phi)(x) =
img(phi(x))``, and ``compose(a, b)(x) = b(a(x))`` so that warping by
``compose(a, b)`` equals warping by ``b`` first and then sampling the
result through ``a``.
"""

from __future__ import annotations

import numpy as np

from . import nnops
from .autodiff import Var, as_var, constant
from .errors import InputError, ParamError, ShapeError


def identity_coords(spatial, dtype=np.float32):
    """Numpy identity grid [d, *spatial] holding each voxel's own index."""
    d = len(spatial)
    grids = np.meshgrid(*[np.arange(s, dtype=dtype) for s in spatial], indexing="ij")
    return np.stack(grids, axis=0).astype(dtype)


class TransformGrid:
    """Absolute sampling locations, stored as displacement + implicit identity."""

    __slots__ = ("disp",)

    def __init__(self, disp):
        disp = as_var(disp)
        if disp.shape[0] != disp.ndim - 1:
            raise ShapeError(
                f"transform needs d channels over a d-dim grid, got {disp.shape}"
            )
        self.disp = disp

    @property
    def spatial(self):
        return self.disp.shape[1:]

    @property
    def ndim(self):
        return len(self.spatial)

    @property
    def dtype(self):
        return self.disp.dtype

    def grid(self):
        """Materialize absolute coordinates phi = disp + identity as a Var."""
        ident = constant(identity_coords(self.spatial, self.disp.dtype))
        return self.disp + ident

    def values(self):
        """Absolute coordinates as a plain numpy array."""
        return self.grid().data

    def __repr__(self):
        return f"TransformGrid(spatial={self.spatial}, dtype={self.dtype.name})"


def identity_grid(spatial, dtype=np.float32):
    """The transform mapping every voxel to itself."""
    if any(s <= 0 for s in spatial):
        raise ShapeError(f"extents must be positive, got {spatial}")
    return TransformGrid(constant(np.zeros((len(spatial),) + tuple(spatial), dtype)))


def to_transform(u):
    """Displacement field -> transform (exact; shares the buffer)."""
    return TransformGrid(u)


def to_displacement(phi):
    """Transform -> displacement field (exact inverse of to_transform)."""
    return phi.disp


def warp(img, phi):
    """Resample img at phi: out(x) = img(phi(x)).  Differentiable in both."""
    img = as_var(img)
    if phi.spatial != img.shape[1:] and phi.ndim != img.ndim - 1:
        raise ShapeError(f"transform rank {phi.ndim} does not match image {img.shape}")
    if not np.isfinite(phi.disp.data).all():
        raise InputError("transform contains NaN/Inf values")
    return nnops.grid_sample(img, phi.grid())


def compose(phi_a, phi_b):
    """compose(a, b)(x) = phi_b(phi_a(x)); warp-equivalent to b-then-a sampling."""
    if phi_a.spatial != phi_b.spatial:
        raise ShapeError(
            f"compose shape mismatch: {phi_a.spatial} vs {phi_b.spatial}"
        )
    u_b_at_a = nnops.grid_sample(phi_b.disp, phi_a.grid())
    return TransformGrid(phi_a.disp + u_b_at_a)


def upsample_transform(phi):
    """Double the grid extents, preserving physical correspondence.

    The displacement part is linearly upsampled and scaled by 2 (one
    coarse voxel equals two fine voxels); the identity stays implicit.
    """
    return TransformGrid(nnops.upsample2(phi.disp) * 2.0)


def downsample_transform(phi):
    """Halve the grid extents (average-pool displacement, scale by 1/2)."""
    return TransformGrid(nnops.downsample2(phi.disp) * 0.5)


def scaling_and_squaring(v, steps=7):
    """Integrate a stationary velocity field by repeated self-composition.

    phi <- identity + v / 2**steps, then phi <- phi(phi) ``steps`` times.
    """
    v = as_var(v)
    steps = int(steps)
    if steps < 1:
        raise ParamError(f"steps must be >= 1, got {steps}")
    phi = TransformGrid(v * float(2.0**-steps))
    for _ in range(steps):
        phi = compose(phi, phi)
    return phi


def apply_beta(u, beta):
    """phi = beta * u + identity, differentiable in u and beta."""
    u = as_var(u)
    beta = as_var(beta)
    return TransformGrid(u * beta)
