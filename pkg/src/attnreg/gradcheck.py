"""Finite-difference validation of every differentiable path.

All checks run in float64 with central differences (h = 1e-5); the
reported figure is the worst elementwise relative error between the
analytic gradient and the numeric one.  ``run_all`` covers the tensor
ops, the attention step, the geometry chain, and every loss.
"""

from __future__ import annotations

import numpy as np

from . import attention, geometry, losses, nnops
from . import autodiff as ad
from .autodiff import Var
from .metrics import KeypointSet

FD_STEP = 1e-5
TOLERANCE = 1e-4


def numeric_gradient(fn, inputs, index, h=FD_STEP):
    """Central-difference gradient of scalar fn w.r.t. inputs[index]."""
    base = [np.array(v.data, dtype=np.float64) for v in inputs]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    for i in range(flat.size):
        for sign in (+1, -1):
            probe = [b.copy() for b in base]
            probe[index].reshape(-1)[i] += sign * h
            vars_ = [Var(p, requires_grad=True, dtype=np.float64) for p in probe]
            flat[i] += sign * float(fn(vars_).data) / (2 * h)
    return grad


def check(name, fn, shapes, seed=0, h=FD_STEP, tol=TOLERANCE):
    """Compare analytic vs numeric gradients; returns a report dict."""
    rng = np.random.default_rng(seed)
    inputs = [
        Var(rng.standard_normal(s).astype(np.float64), requires_grad=True, dtype=np.float64)
        for s in shapes
    ]
    out = fn(inputs)
    out.backward()
    worst = 0.0
    for i, v in enumerate(inputs):
        analytic = np.zeros(v.shape) if v.grad is None else np.asarray(v.grad)
        numeric = numeric_gradient(fn, inputs, i, h)
        scale = np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-6
        worst = max(worst, float((np.abs(analytic - numeric) / scale).max()))
    return {"name": name, "max_rel_err": worst, "passed": worst < tol}


def _positive(v):
    return ad.vabs(v) + 0.5


def run_all(seed=0):
    """Every gradient check on small 2d instances; returns report list."""
    H = W = 12
    cases = []

    def add_case(name, fn, shapes):
        cases.append((name, fn, shapes))

    add_case("arithmetic", lambda v: ad.vsum(v[0] * v[1] - v[0] / _positive(v[1])), [(5, 4), (5, 4)])
    add_case("broadcast", lambda v: ad.vsum((v[0] + v[1]) * v[1]), [(5, 1), (1, 4)])
    add_case(
        "exp_log_sqrt",
        lambda v: ad.vsum(ad.exp(v[0] * 0.3) + ad.log(_positive(v[0])) + ad.sqrt(_positive(v[0]))),
        [(4, 4)],
    )
    add_case("power", lambda v: ad.vsum(_positive(v[0]) ** 1.7), [(4, 4)])
    add_case("leaky_relu", lambda v: ad.vsum(ad.leaky_relu(v[0], 0.2) ** 2), [(6, 6)])
    add_case("softmax", lambda v: ad.vsum(ad.softmax(v[0], axis=-1, temperature=0.7) * v[1]), [(5, 7), (5, 7)])
    add_case("matmul", lambda v: ad.vsum(ad.matmul(v[0], v[1])), [(3, 4, 5), (3, 5, 2)])
    add_case("pad_replicate", lambda v: ad.vsum(ad.pad_replicate(v[0], [(0, 0), (2, 2), (2, 2)]) ** 2), [(2, 4, 4)])
    add_case("concat_slice", lambda v: ad.vsum(ad.concat([v[0], v[1]], axis=0)[1:3] ** 2), [(2, 3, 3), (2, 3, 3)])
    add_case("conv", lambda v: ad.vsum(nnops.conv(v[0], v[1]) ** 2), [(2, 6, 6), (3, 2, 3, 3)])
    add_case("downsample2", lambda v: ad.vsum(nnops.downsample2(v[0]) ** 2), [(2, 6, 6)])
    add_case("upsample2", lambda v: ad.vsum(nnops.upsample2(v[0]) ** 2), [(2, 5, 5)])
    add_case(
        "grid_sample",
        lambda v: ad.vsum(nnops.grid_sample(v[0], (v[1] * 0.9 + 2.0)) ** 2),
        [(2, 6, 6), (2, 4, 4)],
    )
    add_case(
        "field_attention",
        lambda v: ad.vsum(attention.field_attention(v[0], v[1]) ** 2),
        [(3, 5, 5), (3, 5, 5)],
    )
    add_case(
        "warp_compose",
        lambda v: ad.vsum(
            geometry.warp(
                v[0],
                geometry.compose(
                    geometry.TransformGrid(v[1] * 0.5),
                    geometry.TransformGrid(v[2] * 0.5),
                ),
            )
            ** 2
        ),
        [(1, 6, 6), (2, 6, 6), (2, 6, 6)],
    )
    add_case(
        "scaling_and_squaring",
        lambda v: ad.vsum(
            geometry.warp(v[0], geometry.scaling_and_squaring(v[1] * 0.5, steps=3)) ** 2
        ),
        [(1, 6, 6), (2, 6, 6)],
    )
    add_case(
        "ncc_loss",
        lambda v: losses.ncc_loss(v[0], v[1], window=5),
        [(1, H, W), (1, H, W)],
    )

    def mi_fn(v):
        # squash through exp(-x^2) so intensities stay inside [0, 1]
        return losses.mi_loss(
            (ad.exp(-(v[0] ** 2)) * 0.9 + 0.05), (ad.exp(-(v[1] ** 2)) * 0.9 + 0.05), bins=8
        )

    add_case("mi_loss", mi_fn, [(1, 8, 8), (1, 8, 8)])
    add_case("diffusion_reg", lambda v: losses.diffusion_reg(v[0]), [(2, 6, 6)])
    add_case("mse_loss", lambda v: losses.mse_loss(v[0], v[1]), [(1, 6, 6), (1, 6, 6)])
    add_case(
        "dice_loss",
        lambda v: losses.dice_loss(ad.vabs(v[0]), ad.vabs(v[1])),
        [(3, 6, 6), (3, 6, 6)],
    )

    kp = KeypointSet([[2.3, 3.1], [5.5, 1.2]], [[2.0, 3.5], [5.0, 1.0]], (1.0, 1.5))
    add_case(
        "tre_loss",
        lambda v: losses.tre_loss(geometry.TransformGrid(v[0] * 0.5), kp),
        [(2, 8, 8)],
    )

    return [check(name, fn, shapes, seed=seed) for name, fn, shapes in cases]


def format_report(reports):
    lines = []
    for r in reports:
        status = "PASS" if r["passed"] else "FAIL"
        lines.append(f"{status}  {r['name']:<22} max rel err {r['max_rel_err']:.3e}")
    failed = sum(not r["passed"] for r in reports)
    lines.append(f"{len(reports) - failed}/{len(reports)} gradient checks passed")
    return "\n".join(lines)
