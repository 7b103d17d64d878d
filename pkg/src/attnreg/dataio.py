"""Volume, keypoint, transform, and config I/O plus synthetic pairs.

Volume file grammar (bit-exact, documented for round-trip tests)::

    VOLv1\\n
    dims: <d1> <d2> [<d3>]\\n
    channels: <c>\\n
    dtype: <numpy name, e.g. float32>\\n
    spacing: <s1> <s2> [<s3>]\\n
    \\n
    <raw little-endian payload, C order, channels-first>

The payload length must equal prod(dims) * channels * itemsize; any
mismatch is reported with expected/actual byte counts.  Transforms are
stored as d-channel displacement volumes in the same format.  Users
with standard medical volumes can convert with a few lines of
nibabel/SimpleITK: load, `np.asarray(img.dataobj)`, then write_volume
with the original spacing.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import geometry, metrics
from .autodiff import Var
from .errors import FileFormatError, InputError, ParamError
from .metrics import KeypointSet

MAGIC = "VOLv1"
_DTYPES = {"float32", "float64", "int16", "int32", "uint8", "uint16"}
SYNTH_KINDS = ("blobs", "checker-organs", "texture")


@dataclass(frozen=True)
class VolumeShape:
    """Geometry of a stored volume: spatial dims, channels, voxel spacing."""

    dims: tuple
    channels: int = 1
    spacing: tuple = None
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.dims) not in (2, 3) or any(int(s) < 1 for s in self.dims):
            raise InputError(f"dims must be 2 or 3 positive extents, got {self.dims}")
        if self.channels < 1:
            raise InputError(f"channels must be >= 1, got {self.channels}")
        if self.dtype not in _DTYPES:
            raise InputError(f"unsupported dtype {self.dtype!r}; use one of {sorted(_DTYPES)}")
        object.__setattr__(self, "dims", tuple(int(s) for s in self.dims))
        spacing = self.spacing if self.spacing is not None else (1.0,) * len(self.dims)
        if len(spacing) != len(self.dims):
            raise InputError(f"spacing rank {len(spacing)} does not match dims {self.dims}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))

    @property
    def nbytes(self):
        return int(np.prod(self.dims)) * self.channels * np.dtype(self.dtype).itemsize


def write_volume(path, volume, spacing=None, spatial_ndim=None):
    """Write a [C, *dims] (or bare [*dims]) array; returns its VolumeShape.

    A 3-d array is ambiguous ([C, H, W] vs a bare [D, H, W] volume); pass
    ``spatial_ndim=2`` to store it as a multi-channel 2-d volume.
    """
    data = volume.data if isinstance(volume, Var) else np.asarray(volume)
    if data.ndim == 2 or (data.ndim == 3 and spatial_ndim != 2):
        data = data[None]
    if data.ndim not in (3, 4):
        raise InputError(f"expected [C, *dims] or [*dims] volume data, got {data.shape}")
    shape = VolumeShape(
        dims=data.shape[1:],
        channels=data.shape[0],
        spacing=spacing,
        dtype=data.dtype.name,
    )
    payload = np.ascontiguousarray(data.astype("<" + np.dtype(shape.dtype).str[1:]))
    header = (
        f"{MAGIC}\n"
        f"dims: {' '.join(str(s) for s in shape.dims)}\n"
        f"channels: {shape.channels}\n"
        f"dtype: {shape.dtype}\n"
        f"spacing: {' '.join(repr(s) for s in shape.spacing)}\n"
        f"\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.tobytes())
    return shape


def read_volume(path):
    """Read a volume file -> (Var [C, *dims], VolumeShape)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0 or not blob.startswith((MAGIC + "\n").encode("ascii")):
        raise FileFormatError(f"{path}: not a {MAGIC} volume file")
    fields = {}
    for lineno, line in enumerate(blob[:sep].decode("ascii").splitlines()[1:], start=2):
        if ":" not in line:
            raise FileFormatError(f"{path}: malformed header line {lineno}: {line!r}")
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    try:
        shape = VolumeShape(
            dims=tuple(int(tok) for tok in fields["dims"].split()),
            channels=int(fields["channels"]),
            spacing=tuple(float(tok) for tok in fields["spacing"].split()),
            dtype=fields["dtype"],
        )
    except KeyError as exc:
        raise FileFormatError(f"{path}: header missing field {exc}") from None
    except (ValueError, InputError) as exc:
        raise FileFormatError(f"{path}: bad header: {exc}") from None
    payload = blob[sep + 2 :]
    if len(payload) != shape.nbytes:
        raise FileFormatError(
            f"{path}: truncated payload: expected {shape.nbytes} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<" + np.dtype(shape.dtype).str[1:])
    data = data.reshape((shape.channels,) + shape.dims).astype(shape.dtype)
    return Var(data, dtype=data.dtype), shape


def write_transform(path, phi, spacing=None):
    """Store a transform as its d-channel displacement volume."""
    return write_volume(path, phi.disp, spacing, spatial_ndim=phi.ndim)


def read_transform(path):
    """Read a displacement volume back into a TransformGrid."""
    disp, shape = read_volume(path)
    if disp.shape[0] != len(shape.dims):
        raise FileFormatError(
            f"{path}: transform needs {len(shape.dims)} channels over "
            f"{shape.dims}, got {disp.shape[0]}"
        )
    return geometry.TransformGrid(disp), shape


# -- keypoints ---------------------------------------------------------------


def read_keypoints(path, spacing=None):
    """Parse a keypoint CSV (fx,fy[,fz],mx,my[,mz]) into a KeypointSet.

    Coordinates are voxel units; spacing (defaults to 1 per axis) is
    applied later by the TRE metric.  A header-only file yields an empty
    set with a warning.
    """
    with open(path, "r", newline="") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise FileFormatError(f"{path}: empty keypoint file")
    width = len(lines[0].split(","))
    if width not in (4, 6):
        raise FileFormatError(
            f"{path}: expected 4 (2d) or 6 (3d) columns, got {width} on line 1"
        )
    d = width // 2
    rows = []
    for lineno, line in enumerate(lines, start=1):
        tokens = [t.strip() for t in line.split(",")]
        if lineno == 1 and any(not _is_number(t) for t in tokens):
            continue  # header row
        if len(tokens) != width:
            raise FileFormatError(
                f"{path}: line {lineno}: expected {width} columns, got {len(tokens)}"
            )
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise FileFormatError(
                f"{path}: line {lineno}: non-numeric token in {line!r}"
            ) from None
    if not rows:
        warnings.warn(f"{path}: keypoint file has a header but no data rows")
        arr = np.empty((0, d), dtype=np.float64)
        return KeypointSet(arr, arr.copy(), spacing or (1.0,) * d)
    arr = np.asarray(rows, dtype=np.float64)
    return KeypointSet(arr[:, :d], arr[:, d:], spacing or (1.0,) * d)


def write_keypoints(path, keypoints):
    d = keypoints.fixed_points.shape[1]
    names = "xyz"[:d]
    header = ",".join([f"f{n}" for n in names] + [f"m{n}" for n in names])
    rows = np.concatenate([keypoints.fixed_points, keypoints.moving_points], axis=1)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _is_number(token):
    try:
        float(token)
        return True
    except ValueError:
        return False


# -- run config ----------------------------------------------------------------


def read_config(path):
    """Run configuration as a flat JSON object of option overrides."""
    with open(path, "r") as fh:
        text = fh.read()
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(config, dict):
        raise FileFormatError(f"{path}: config must be a JSON object")
    return config


# -- synthetic data --------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one reproducible synthetic registration pair."""

    shape: tuple = (64, 64)
    kind: str = "blobs"
    smoothness: float = 4.0
    magnitude: float = 4.0
    seed: int = 0
    keypoints: int = 16
    retries: int = 10

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) not in (2, 3) or any(s < 4 for s in self.shape):
            raise ParamError(f"shape must be 2d/3d with extents >= 4, got {self.shape}")
        if self.kind not in SYNTH_KINDS:
            raise ParamError(f"kind must be one of {SYNTH_KINDS}, got {self.kind!r}")
        if self.smoothness <= 0 or self.magnitude < 0:
            raise ParamError("smoothness must be > 0 and magnitude >= 0")


def _normalize01(img):
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def _synth_image(spec, rng):
    """(intensities in [0,1] f32, integer label map) for one moving image."""
    shape = spec.shape
    d = len(shape)
    coords = np.stack(
        np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    )
    if spec.kind == "texture":
        img = gaussian_filter(rng.standard_normal(shape), sigma=2.0)
        labels = (img > np.median(img)).astype(np.int32)
        return _normalize01(img).astype(np.float32), labels
    n_sites = 5 if spec.kind == "blobs" else 8
    sites = rng.uniform(0, np.array(shape) - 1, size=(n_sites, d))
    if spec.kind == "blobs":
        img = np.zeros(shape)
        sigma = min(shape) / 8.0
        for site in sites:
            sq = sum((coords[ax] - site[ax]) ** 2 for ax in range(d))
            img += np.exp(-sq / (2 * sigma**2))
        labels = np.zeros(shape, dtype=np.int32)
        for i, site in enumerate(sites):
            sq = sum((coords[ax] - site[ax]) ** 2 for ax in range(d))
            labels[sq < sigma**2] = i + 1
        return _normalize01(img).astype(np.float32), labels
    # checker-organs: Voronoi regions with distinct smooth intensities
    dists = np.stack(
        [sum((coords[ax] - site[ax]) ** 2 for ax in range(d)) for site in sites]
    )
    labels = dists.argmin(axis=0).astype(np.int32) + 1
    levels = rng.uniform(0.1, 1.0, size=n_sites)
    img = gaussian_filter(levels[labels - 1], sigma=1.0)
    return _normalize01(img).astype(np.float32), labels


def _smooth_displacement(spec, rng):
    noise = rng.standard_normal((len(spec.shape),) + spec.shape)
    u = np.stack([gaussian_filter(c, sigma=spec.smoothness) for c in noise])
    norms = np.sqrt((u**2).sum(axis=0))
    peak = norms.max()
    if peak > 0:
        u *= spec.magnitude / peak
    return u.astype(np.float32)


def gen_synthetic_pair(spec):
    """Deterministic synthetic pair: moving image, fold-free ground-truth
    transform, fixed image warped from it, labels, and keypoints.

    Returns a dict with keys fixed, moving, fixed_labels, moving_labels,
    phi_gt (displacement array), keypoints, and spacing.
    """
    rng = np.random.default_rng(spec.seed)
    moving, moving_labels = _synth_image(spec, rng)
    if spec.magnitude == 0:
        u = np.zeros((len(spec.shape),) + spec.shape, dtype=np.float32)
    else:
        for attempt in range(spec.retries):
            u = _smooth_displacement(spec, rng)
            if metrics.nd_voxels(geometry.TransformGrid(u))[0] == 0:
                break
        else:
            raise ParamError(
                f"could not sample a fold-free field after {spec.retries} tries; "
                f"lower the magnitude ({spec.magnitude}) or raise the smoothness"
            )
    phi_gt = geometry.TransformGrid(u)
    fixed = geometry.warp(moving[None], phi_gt).data[0]
    fixed_labels = metrics.warp_labels_nearest(moving_labels, phi_gt)
    d = len(spec.shape)
    margin = 2
    pts_f = rng.uniform(
        margin, np.array(spec.shape) - 1 - margin, size=(spec.keypoints, d)
    )
    from . import kernels

    pts_m = kernels.grid_sample_forward(
        np.ascontiguousarray(phi_gt.values()), np.ascontiguousarray(pts_f.T)
    ).T
    return {
        "fixed": fixed,
        "moving": moving,
        "fixed_labels": fixed_labels,
        "moving_labels": moving_labels,
        "phi_gt": u,
        "keypoints": KeypointSet(pts_f, pts_m, (1.0,) * d),
        "spacing": (1.0,) * d,
    }
