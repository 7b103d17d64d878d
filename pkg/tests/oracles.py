"""Independent brute-force implementations used as test oracles.

Everything here is written as plainly as possible (explicit loops, no
shared helpers with the package) so that agreement with the package
implementations is meaningful.
"""

import itertools
import math

import numpy as np


def dice_oracle(a, b):
    per_class = {}
    for cls in sorted(set(a.ravel().tolist()) | set(b.ravel().tolist())):
        if cls == 0:
            continue
        na = nb = ninter = 0
        for x, y in zip(a.ravel(), b.ravel()):
            na += x == cls
            nb += y == cls
            ninter += x == cls and y == cls
        if na + nb == 0:
            continue
        per_class[int(cls)] = 2.0 * ninter / (na + nb)
    mean = sum(per_class.values()) / len(per_class) if per_class else math.nan
    return per_class, mean


def _surface_oracle(mask):
    pts = []
    for idx in np.ndindex(mask.shape):
        if not mask[idx]:
            continue
        for ax in range(mask.ndim):
            for step in (-1, 1):
                n = list(idx)
                n[ax] += step
                if not (0 <= n[ax] < mask.shape[ax]) or not mask[tuple(n)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return np.array(pts, dtype=np.float64)


def hd95_oracle(a, b, cls, spacing=None):
    ma, mb = a == cls, b == cls
    if not ma.any() or not mb.any():
        return math.nan
    spacing = np.ones(a.ndim) if spacing is None else np.asarray(spacing, float)
    pa = _surface_oracle(ma) * spacing
    pb = _surface_oracle(mb) * spacing
    dists = []
    for p in pa:
        dists.append(min(math.dist(p, q) for q in pb))
    for q in pb:
        dists.append(min(math.dist(p, q) for p in pa))
    dists.sort()
    rank = max(1, math.ceil(0.95 * len(dists)))
    return dists[rank - 1]


def jacobian_oracle(vals):
    """Central-difference Jacobian determinants, explicit loops."""
    d = vals.shape[0]
    spatial = vals.shape[1:]
    out = np.empty(tuple(s - 2 for s in spatial))
    for idx in np.ndindex(out.shape):
        center = tuple(i + 1 for i in idx)
        jac = np.empty((d, d))
        for c in range(d):
            for ax in range(d):
                hi = list(center)
                lo = list(center)
                hi[ax] += 1
                lo[ax] -= 1
                jac[c, ax] = (vals[(c,) + tuple(hi)] - vals[(c,) + tuple(lo)]) / 2.0
        if d == 2:
            det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
        else:
            det = (
                jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
                - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
                + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
            )
        out[idx] = det
    return out


def nd_voxels_oracle(vals):
    det = jacobian_oracle(vals)
    count = int(sum(1 for v in det.ravel() if v <= 0))
    return count, 100.0 * count / det.size


def sdlogj_oracle(vals):
    det = jacobian_oracle(vals)
    logs = [math.log(max(v, 1e-6)) for v in det.ravel()]
    mean = sum(logs) / len(logs)
    return math.sqrt(sum((v - mean) ** 2 for v in logs) / len(logs))


def _tri_area(a, b, c):
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def _tet_volume(a, b, c, d):
    e1, e2, e3 = b - a, c - a, d - a
    return float(np.dot(e1, np.cross(e2, e3))) / 6.0


def nd_volume_oracle(vals):
    d = vals.shape[0]
    spatial = vals.shape[1:]
    folded = 0.0
    cells = 0
    for idx in np.ndindex(tuple(s - 1 for s in spatial)):
        cells += 1
        corner = {}
        for off in itertools.product((0, 1), repeat=d):
            pos = tuple(i + o for i, o in zip(idx, off))
            corner[off] = np.array([vals[(c,) + pos] for c in range(d)])
        if d == 2:
            simplices = [
                _tri_area(corner[(0, 0)], corner[(1, 0)], corner[(1, 1)]),
                _tri_area(corner[(0, 0)], corner[(1, 1)], corner[(0, 1)]),
            ]
        else:
            simplices = []
            base, apex = corner[(0, 0, 0)], corner[(1, 1, 1)]
            eye = np.eye(3, dtype=int)
            for perm in itertools.permutations(range(3)):
                inv = sum(
                    1
                    for i in range(3)
                    for j in range(i + 1, 3)
                    if perm[i] > perm[j]
                )
                sign = -1.0 if inv % 2 else 1.0
                p1 = corner[tuple(eye[perm[0]])]
                p2 = corner[tuple(eye[perm[0]] + eye[perm[1]])]
                simplices.append(sign * _tet_volume(base, p1, p2, apex))
        folded += sum(abs(v) for v in simplices if v < 0)
    return folded, 100.0 * folded / cells


def interp_oracle(field, point):
    """Multi-linear interpolation of field [C, *spatial] at one point."""
    d = field.ndim - 1
    spatial = field.shape[1:]
    corners = []
    weights = []
    base = []
    frac = []
    for ax in range(d):
        c = min(max(point[ax], 0.0), spatial[ax] - 1)
        lo = min(int(math.floor(c)), spatial[ax] - 2) if spatial[ax] > 1 else 0
        base.append(lo)
        frac.append(c - lo)
    out = np.zeros(field.shape[0])
    for off in itertools.product((0, 1), repeat=d):
        w = 1.0
        for ax in range(d):
            w *= frac[ax] if off[ax] else 1.0 - frac[ax]
        pos = tuple(base[ax] + off[ax] for ax in range(d))
        out += w * field[(slice(None),) + pos]
    return out


def tre_oracle(vals, fixed_pts, moving_pts, spacing):
    dists = []
    for fp, mp in zip(fixed_pts, moving_pts):
        mapped = interp_oracle(vals, fp)
        dists.append(
            math.sqrt(sum(((mapped[i] - mp[i]) * spacing[i]) ** 2 for i in range(len(spacing))))
        )
    return dists, sum(dists) / len(dists)


def tre30_oracle(means):
    means = sorted(means)
    k = math.ceil(0.3 * len(means))
    return sum(means[:k]) / k
