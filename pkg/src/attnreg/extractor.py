"""U-shaped convolutional feature extractor.

One encoder conv block per level with factor-2 average pooling between
levels; the decoder upsamples, concatenates the encoder skip, and
convolves back down to the per-level width.  The returned pyramid is
ordered fine -> coarse, level i having 1/2**i of the input extents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Var
from .errors import InputError, ParamError, ShapeError


@dataclass(frozen=True)
class ExtractorConfig:
    channels: tuple = (8, 16, 32, 64, 128)
    match_channels: int = 16
    shared_weights: bool = True
    leaky_slope: float = 0.2
    kernel: int = 3

    def __post_init__(self):
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ParamError(f"channel widths must be positive, got {self.channels}")
        if self.kernel % 2 == 0:
            raise ParamError(f"kernel must be odd, got {self.kernel}")

    @property
    def levels(self):
        return len(self.channels)

    def halved(self):
        """The half-width variant: every channel count divided by two."""
        return ExtractorConfig(
            channels=tuple(max(1, c // 2) for c in self.channels),
            match_channels=max(1, self.match_channels // 2),
            shared_weights=self.shared_weights,
            leaky_slope=self.leaky_slope,
            kernel=self.kernel,
        )


def _layer_shapes(cfg, ndim):
    """(name, w_shape, b_shape) for every conv layer, in forward order."""
    k = (cfg.kernel,) * ndim
    shapes = []
    cin = 1
    for i, c in enumerate(cfg.channels):
        shapes.append((f"enc{i}", (c, cin) + k, (c,) + (1,) * ndim))
        cin = c
    for i in range(cfg.levels - 2, -1, -1):
        cin = cfg.channels[i + 1] + cfg.channels[i]
        c = cfg.channels[i]
        shapes.append((f"dec{i}", (c, cin) + k, (c,) + (1,) * ndim))
    return shapes


def init_extractor(cfg, ndim, rng, dtype=np.float32):
    """Fan-in-scaled uniform init; pass a seeded Generator for determinism."""
    weights = {}
    for name, w_shape, b_shape in _layer_shapes(cfg, ndim):
        fan_in = int(np.prod(w_shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        weights[name + ".w"] = Var(
            rng.uniform(-bound, bound, w_shape).astype(dtype), requires_grad=True
        )
        weights[name + ".b"] = Var(
            rng.uniform(-bound, bound, b_shape).astype(dtype), requires_grad=True
        )
    return weights


def describe(cfg, ndim):
    """Total trainable parameter count for one extractor."""
    return sum(
        int(np.prod(ws)) + int(np.prod(bs)) for _, ws, bs in _layer_shapes(cfg, ndim)
    )


def _block(x, weights, name, slope):
    y = nnops.conv(x, weights[name + ".w"]) + weights[name + ".b"]
    return ad.leaky_relu(y, slope)


def extract(img, weights, cfg):
    """Forward pass: 1-channel image -> list of feature maps, fine to coarse."""
    img = ad.as_var(img)
    ndim = img.ndim - 1
    if img.shape[0] != 1:
        raise ShapeError(f"expected a 1-channel image, got {img.shape}")
    div = 2 ** (cfg.levels - 1)
    if any(s % div for s in img.shape[1:]):
        raise InputError(
            f"spatial extents {img.shape[1:]} must be divisible by {div} "
            f"for {cfg.levels} levels; pad the input"
        )
    enc = []
    x = img
    for i in range(cfg.levels):
        x = _block(x, weights, f"enc{i}", cfg.leaky_slope)
        enc.append(x)
        if i < cfg.levels - 1:
            x = nnops.downsample2(x)
    pyramid = [None] * cfg.levels
    pyramid[cfg.levels - 1] = enc[-1]
    d = enc[-1]
    for i in range(cfg.levels - 2, -1, -1):
        up = nnops.upsample2(d)
        d = _block(ad.concat([up, enc[i]], axis=0), weights, f"dec{i}", cfg.leaky_slope)
        pyramid[i] = d
    return pyramid


def extract_pair(img_f, img_m, cfg, weights_f, weights_m=None):
    """Pyramids for a fixed/moving pair; weights shared or separate per config."""
    img_f, img_m = ad.as_var(img_f), ad.as_var(img_m)
    if img_f.shape != img_m.shape:
        raise InputError(f"image shape mismatch: {img_f.shape} vs {img_m.shape}")
    if cfg.shared_weights:
        weights_m = weights_f
    elif weights_m is None:
        raise ParamError("separate-weight config requires a second weight set")
    return extract(img_f, weights_f, cfg), extract(img_m, weights_m, cfg)
