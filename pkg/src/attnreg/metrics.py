"""Non-differentiable evaluation of transforms and label overlap.

Conventions pinned for bit-exact tests:
  * HD95 uses the nearest-rank percentile on the pooled symmetric
    surface-distance multiset; boundary voxels are foreground voxels
    with at least one background face-neighbor.
  * Jacobian determinants use central differences on interior voxels;
    non-diffeomorphic percentages are over interior voxels.
  * Folded volume decomposes each grid cell into 2 triangles (2d) or 6
    tetrahedra (3d, Kuhn decomposition with a fixed diagonal) and sums
    the absolute volume of negatively oriented simplices; percentages
    are over the total cell count.
  * SDLogJ clamps determinants at 1e-6 before the log.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import InputError, ShapeError, UsageError

JAC_CLAMP = 1e-6


@dataclass
class KeypointSet:
    """Paired fixed/moving landmark coordinates in voxel units."""

    fixed_points: np.ndarray
    moving_points: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.fixed_points = np.atleast_2d(np.asarray(self.fixed_points, dtype=np.float64))
        self.moving_points = np.atleast_2d(np.asarray(self.moving_points, dtype=np.float64))
        if self.fixed_points.shape != self.moving_points.shape:
            raise InputError(
                f"keypoint lists differ in shape: {self.fixed_points.shape} "
                f"vs {self.moving_points.shape}"
            )
        if not (
            np.isfinite(self.fixed_points).all() and np.isfinite(self.moving_points).all()
        ):
            raise InputError("keypoint coordinates must be finite")
        self.spacing = tuple(float(s) for s in self.spacing)

    def __len__(self):
        return self.fixed_points.shape[0]


def _phi_values(phi):
    """Accept a TransformGrid or a raw [d, *spatial] coordinate array."""
    if hasattr(phi, "values"):
        return np.asarray(phi.values(), dtype=np.float64)
    arr = np.asarray(phi, dtype=np.float64)
    if arr.shape[0] != arr.ndim - 1:
        raise ShapeError(f"expected [d, *spatial] transform values, got {arr.shape}")
    return arr


# -- overlap ---------------------------------------------------------------


def dice_score(labels_a, labels_b):
    """Per-class and mean Dice; classes absent from both maps are skipped."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ShapeError(f"label map shape mismatch: {a.shape} vs {b.shape}")
    classes = sorted(set(np.unique(a)) | set(np.unique(b)))
    per_class = {}
    for cls in classes:
        if cls == 0:
            continue  # background is reserved
        ma = a == cls
        mb = b == cls
        na, nb = int(ma.sum()), int(mb.sum())
        if na == 0 and nb == 0:
            continue
        per_class[int(cls)] = 2.0 * int((ma & mb).sum()) / (na + nb)
    mean = float(np.mean(list(per_class.values()))) if per_class else math.nan
    return per_class, mean


def _boundary_voxels(mask):
    """Indices of foreground voxels with a background face-neighbor."""
    d = mask.ndim
    boundary = np.zeros_like(mask)
    for ax in range(d):
        for shift in (-1, 1):
            neigh = np.full(mask.shape, False)
            src = [slice(None)] * d
            dst = [slice(None)] * d
            if shift == 1:
                src[ax] = slice(1, None)
                dst[ax] = slice(None, -1)
            else:
                src[ax] = slice(None, -1)
                dst[ax] = slice(1, None)
            neigh[tuple(dst)] = mask[tuple(src)]
            # voxels at the array edge count as having a background neighbor
            boundary |= mask & ~neigh
    return np.argwhere(boundary)


def hd95(labels_a, labels_b, cls, spacing=None):
    """Nearest-rank 95th percentile of pooled symmetric surface distances (mm).

    Returns NaN when the class is missing from either map.
    """
    a = np.asarray(labels_a) == cls
    b = np.asarray(labels_b) == cls
    if a.shape != b.shape:
        raise ShapeError(f"label map shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return math.nan
    spacing = np.ones(a.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    pa = _boundary_voxels(a) * spacing
    pb = _boundary_voxels(b) * spacing
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    rank = max(1, math.ceil(0.95 * pooled.size))
    return float(pooled[rank - 1])


# -- transform regularity -----------------------------------------------------


def jacobian_determinant(phi):
    """Central-difference Jacobian determinant on interior voxels.

    Returns an array with every spatial extent reduced by 2.
    """
    vals = _phi_values(phi)
    d = vals.shape[0]
    spatial = vals.shape[1:]
    if any(s < 3 for s in spatial):
        raise ShapeError(f"need extents >= 3 per axis, got {spatial}")
    interior = tuple(slice(1, -1) for _ in range(d))
    jac = np.empty(tuple(s - 2 for s in spatial) + (d, d))
    for c in range(d):
        for ax in range(d):
            hi = [slice(1, -1)] * d
            lo = [slice(1, -1)] * d
            hi[ax] = slice(2, None)
            lo[ax] = slice(None, -2)
            jac[..., c, ax] = (vals[c][tuple(hi)] - vals[c][tuple(lo)]) / 2.0
    return np.linalg.det(jac)


def nd_voxels(phi):
    """(count, percentage) of interior voxels with nonpositive determinant."""
    det = jacobian_determinant(phi)
    count = int((det <= 0).sum())
    return count, 100.0 * count / det.size


def sdlogj(phi):
    """Standard deviation of log(max(det, 1e-6)) over interior voxels."""
    det = jacobian_determinant(phi)
    return float(np.std(np.log(np.maximum(det, JAC_CLAMP))))


def _cell_corners(vals):
    """Corner value arrays of every grid cell, keyed by corner offset."""
    d = vals.shape[0]
    corners = {}
    for off in itertools.product((0, 1), repeat=d):
        sl = tuple(slice(o, s - 1 + o) for o, s in zip(off, vals.shape[1:]))
        corners[off] = np.stack([vals[c][sl] for c in range(d)], axis=-1)
    return corners


def nd_volume(phi):
    """(folded volume, percentage) under simplex decomposition of each cell."""
    vals = _phi_values(phi)
    d = vals.shape[0]
    corners = _cell_corners(vals)
    total_cells = corners[(0,) * d][..., 0].size
    folded = 0.0
    if d == 2:
        p00, p10 = corners[(0, 0)], corners[(1, 0)]
        p01, p11 = corners[(0, 1)], corners[(1, 1)]
        for a, b, c in ((p00, p10, p11), (p00, p11, p01)):
            u = b - a
            v = c - a
            area = 0.5 * (u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0])
            folded += float(np.abs(area[area < 0]).sum())
    else:
        base = corners[(0, 0, 0)]
        apex = corners[(1, 1, 1)]
        eye = np.eye(3, dtype=int)
        for perm in itertools.permutations(range(3)):
            parity = 1.0
            p = list(perm)
            for i in range(3):
                for j in range(i + 1, 3):
                    if p[i] > p[j]:
                        parity = -parity
            o1 = tuple(eye[perm[0]])
            o2 = tuple(eye[perm[0]] + eye[perm[1]])
            e1 = corners[o1] - base
            e2 = corners[o2] - base
            e3 = apex - base
            det = (
                e1[..., 0] * (e2[..., 1] * e3[..., 2] - e2[..., 2] * e3[..., 1])
                - e1[..., 1] * (e2[..., 0] * e3[..., 2] - e2[..., 2] * e3[..., 0])
                + e1[..., 2] * (e2[..., 0] * e3[..., 1] - e2[..., 1] * e3[..., 0])
            )
            vol = parity * det / 6.0
            folded += float(np.abs(vol[vol < 0]).sum())
    return folded, 100.0 * folded / total_cells


# -- landmarks ---------------------------------------------------------------


def tre(phi, keypoints):
    """(per-point distances, mean) in millimeters."""
    vals = _phi_values(phi)
    mapped = kernels.grid_sample_forward(
        np.ascontiguousarray(vals),
        np.ascontiguousarray(keypoints.fixed_points.T),
    )  # [d, P]
    spacing = np.asarray(keypoints.spacing).reshape(-1, 1)
    diff = (mapped - keypoints.moving_points.T) * spacing
    dists = np.sqrt((diff * diff).sum(axis=0))
    return dists, float(dists.mean())


def tre30(case_means):
    """Mean of the lowest 30% of per-case mean TREs (count = ceil(0.3 n))."""
    means = np.asarray(list(case_means), dtype=np.float64)
    if means.size == 0:
        raise UsageError("tre30 requires at least one case")
    k = math.ceil(0.3 * means.size)
    return float(np.sort(means)[:k].mean())


def warp_labels_nearest(labels, phi):
    """Warp an integer label map by nearest-neighbor sampling of phi."""
    vals = _phi_values(phi)
    d = vals.shape[0]
    spatial = np.asarray(labels.shape)
    coords = np.rint(vals).astype(np.int64)
    for ax in range(d):
        coords[ax] = np.clip(coords[ax], 0, spatial[ax] - 1)
    return labels[tuple(coords[i] for i in range(d))]


# -- reporting ----------------------------------------------------------------

METRIC_COLUMNS = [
    "case",
    "dsc",
    "hd95_mm",
    "nd_voxel_count",
    "nd_voxel_pct",
    "nd_volume",
    "nd_volume_pct",
    "sdlogj",
    "tre_mm",
]


def write_metrics_csv(path, rows):
    """One row per case; missing values serialize as empty fields.

    Column order is fixed (METRIC_COLUMNS); a final summary row carries
    the tre30 aggregate in the tre_mm column when TRE values exist.
    """
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        tre_means = []
        for row in rows:
            out = {k: row.get(k, "") for k in METRIC_COLUMNS}
            for k, v in out.items():
                if isinstance(v, float) and math.isnan(v):
                    out[k] = ""
            writer.writerow(out)
            if isinstance(row.get("tre_mm"), (int, float)) and not math.isnan(
                row["tre_mm"]
            ):
                tre_means.append(row["tre_mm"])
        if tre_means:
            writer.writerow(
                {"case": "tre30", "tre_mm": tre30(tre_means)}
                | {k: "" for k in METRIC_COLUMNS if k not in ("case", "tre_mm")}
            )
