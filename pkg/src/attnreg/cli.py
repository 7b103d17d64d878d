"""Command-line entry point.

Subcommands: synth, train, register, warp, evaluate, inspect, gradcheck.
Exit codes are stable: 0 success, 1 internal error or failed check,
2 input/path/usage problems, 3 shape or file-format problems.
"""

from __future__ import annotations

import argparse
import glob
import json
import math
import os
import sys

import numpy as np

from . import attention, dataio, geometry, gradcheck, metrics, pipeline
from .dataio import SynthSpec
from .errors import FileFormatError, InputError, ParamError, ShapeError, UsageError
from .pipeline import ModelConfig, TrainConfig

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_FORMAT = 3


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="force fully seeded runs (seeds are always honored; this flag makes the intent explicit)",
    )
    p.add_argument("--config", help="JSON file of option overrides (flags win)")


def _add_model_flags(p):
    p.add_argument("--ndim", type=int, default=2, choices=(2, 3))
    p.add_argument("--channels", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    p.add_argument("--match-channels", type=int, default=16)
    p.add_argument("--separate-weights", action="store_true")
    p.add_argument("--temperature", default="sqrt_dk")
    p.add_argument("--similarity", default="inner_product", choices=("inner_product", "cosine"))
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--diffeomorphic", action="store_true")
    p.add_argument("--beta0", type=float, default=0.1)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="attnreg",
        description="Deformable image registration by attention over a displacement value field.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic registration pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--shape", type=int, nargs="+", default=[64, 64])
    p.add_argument("--kind", default="blobs", choices=dataio.SYNTH_KINDS)
    p.add_argument("--magnitude", type=float, default=4.0)
    p.add_argument("--smoothness", type=float, default=4.0)
    p.add_argument("--keypoints", type=int, default=16)
    _add_common(p)

    p = sub.add_parser("train", help="train a registration model")
    p.add_argument("--data", required=True, help="directory of *_fixed.vol pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", default="t1-atlas", choices=sorted(pipeline.LOSS_PRESETS))
    p.add_argument("--steps", type=int, default=None, help="total optimizer steps")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--flip-augment", action="store_true")
    p.add_argument("--ncc-window", type=int, default=9)
    p.add_argument("--mi-bins", type=int, default=32)
    _add_model_flags(p)
    _add_common(p)

    p = sub.add_parser("register", help="estimate the transform for one pair")
    p.add_argument("--model", required=True, help="checkpoint path (.npz)")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out", required=True, help="output displacement volume")
    p.add_argument("--save-warped", help="also write the warped moving image")
    p.add_argument("--save-intermediates", help="prefix for per-level transform volumes")
    p.add_argument("--beta", type=float, default=None, help="override the trained beta")
    _add_common(p)

    p = sub.add_parser("warp", help="apply a stored transform to a volume")
    p.add_argument("--input", required=True)
    p.add_argument("--transform", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", action="store_true", help="nearest-neighbor (label) sampling")
    _add_common(p)

    p = sub.add_parser("evaluate", help="compute metrics for a stored transform")
    p.add_argument("--transform", required=True)
    p.add_argument("--fixed-labels")
    p.add_argument("--moving-labels")
    p.add_argument("--keypoints")
    p.add_argument("--spacing", type=float, nargs="+", default=None)
    p.add_argument("--case", default="case0", help="case name for the CSV row")
    p.add_argument("--out", required=True, help="metrics CSV path")
    _add_common(p)

    p = sub.add_parser("inspect", help="dump attention/displacement diagnostics")
    p.add_argument("--model", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    _add_common(p)

    return parser


def _apply_config_file(args, argv):
    if not getattr(args, "config", None):
        return args
    overrides = dataio.read_config(args.config)
    explicit = {
        tok.split("=", 1)[0].lstrip("-").replace("-", "_")
        for tok in argv
        if tok.startswith("--")
    }
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
        if attr not in explicit:  # flags given on the command line win
            setattr(args, attr, value)
    return args


# -- helpers -----------------------------------------------------------------


def write_pgm(path, array):
    """8-bit P5 heatmap; 3d arrays are reduced to their central slice."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 3:
        a = a[a.shape[0] // 2]
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    img = (scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _pair_paths(prefix):
    return {
        "fixed": prefix + "_fixed.vol",
        "moving": prefix + "_moving.vol",
        "fixed_labels": prefix + "_fixed_labels.vol",
        "moving_labels": prefix + "_moving_labels.vol",
        "phi_gt": prefix + "_gt.vol",
        "keypoints": prefix + "_keypoints.csv",
    }


def save_pair(out_dir, name, pair, spacing=None):
    paths = _pair_paths(os.path.join(out_dir, name))
    dataio.write_volume(paths["fixed"], np.asarray(pair["fixed"], dtype=np.float32), spacing)
    dataio.write_volume(paths["moving"], np.asarray(pair["moving"], dtype=np.float32), spacing)
    if pair.get("fixed_labels") is not None:
        dataio.write_volume(paths["fixed_labels"], pair["fixed_labels"].astype(np.int32), spacing)
        dataio.write_volume(paths["moving_labels"], pair["moving_labels"].astype(np.int32), spacing)
    if pair.get("phi_gt") is not None:
        gt = np.asarray(pair["phi_gt"], dtype=np.float32)
        dataio.write_volume(paths["phi_gt"], gt, spacing, spatial_ndim=gt.shape[0])
    if pair.get("keypoints") is not None and len(pair["keypoints"]):
        dataio.write_keypoints(paths["keypoints"], pair["keypoints"])


def load_pair(prefix):
    paths = _pair_paths(prefix)
    fixed, shape = dataio.read_volume(paths["fixed"])
    moving, _ = dataio.read_volume(paths["moving"])
    pair = {
        "fixed": fixed.data,
        "moving": moving.data,
        "spacing": shape.spacing,
    }
    for key in ("fixed_labels", "moving_labels"):
        if os.path.exists(paths[key]):
            pair[key] = dataio.read_volume(paths[key])[0].data[0].astype(np.int32)
    if os.path.exists(paths["phi_gt"]):
        pair["phi_gt"] = dataio.read_volume(paths["phi_gt"])[0].data
    if os.path.exists(paths["keypoints"]):
        pair["keypoints"] = dataio.read_keypoints(paths["keypoints"], shape.spacing)
    return pair


def load_dataset(data_dir):
    if not os.path.isdir(data_dir):
        raise InputError(f"dataset directory not found: {data_dir}")
    prefixes = sorted(
        p[: -len("_fixed.vol")] for p in glob.glob(os.path.join(data_dir, "*_fixed.vol"))
    )
    if not prefixes:
        raise InputError(f"no *_fixed.vol pairs found in {data_dir}")
    return [load_pair(p) for p in prefixes]


def _model_config(args):
    return ModelConfig(
        ndim=args.ndim,
        channels=tuple(args.channels),
        match_channels=args.match_channels,
        shared_weights=not args.separate_weights,
        temperature=(
            args.temperature
            if args.temperature == "sqrt_dk"
            else float(args.temperature)
        ),
        similarity=args.similarity,
        window=args.window,
        diffeomorphic=args.diffeomorphic,
        beta0=args.beta0,
    )


# -- subcommands ----------------------------------------------------------------


def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        spec = SynthSpec(
            shape=tuple(args.shape),
            kind=args.kind,
            smoothness=args.smoothness,
            magnitude=args.magnitude,
            seed=args.seed + i,
            keypoints=args.keypoints,
        )
        pair = dataio.gen_synthetic_pair(spec)
        save_pair(args.out, f"pair{i:03d}", pair)
    print(f"wrote {args.count} pair(s) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    model = pipeline.RegistrationModel(_model_config(args), seed=args.seed)
    cfg = TrainConfig(
        preset=args.preset,
        learning_rate=args.lr,
        epochs=args.epochs,
        max_steps=args.steps,
        flip_augment=args.flip_augment,
        seed=args.seed,
        ncc_window=args.ncc_window,
        mi_bins=args.mi_bins,
    )
    history_path = os.path.join(args.out, "history.csv")
    history, best = pipeline.fit(model, dataset, cfg, history_path=history_path)
    final_path = pipeline.save_model(os.path.join(args.out, "final.npz"), model)
    model.restore(best)
    best_path = pipeline.save_model(os.path.join(args.out, "best.npz"), model)
    last = history[-1]
    print(
        f"trained {last['step']} step(s); final loss {last['total']:.6g}, "
        f"beta {last['beta']:.4g}"
    )
    print(f"history: {history_path}\nbest: {best_path}\nfinal: {final_path}")
    return EXIT_OK


def _load_model(path):
    if not os.path.exists(path):
        raise InputError(f"checkpoint not found: {path}")
    return pipeline.load_model(path)


def cmd_register(args):
    model = _load_model(args.model)
    if args.beta is not None:
        model.set_parameter("beta", np.asarray(args.beta, dtype=np.float32))
    fixed, shape = dataio.read_volume(args.fixed)
    moving, _ = dataio.read_volume(args.moving)
    phi, levels = pipeline.register(model, fixed, moving)
    dataio.write_transform(args.out, phi, shape.spacing)
    if args.save_warped:
        warped = geometry.warp(moving, phi)
        dataio.write_volume(
            args.save_warped,
            warped.data.astype(np.float32),
            shape.spacing,
            spatial_ndim=phi.ndim,
        )
    if args.save_intermediates:
        for lv in levels:
            dataio.write_transform(f"{args.save_intermediates}_level{lv.level}.vol", lv.phi)
    u = phi.disp.data
    print(f"wrote transform {args.out}; mean |u| {np.abs(u).mean():.6g}, max |u| {np.abs(u).max():.6g}")
    return EXIT_OK


def cmd_warp(args):
    img, shape = dataio.read_volume(args.input)
    phi, _ = dataio.read_transform(args.transform)
    if args.labels:
        out = np.stack(
            [metrics.warp_labels_nearest(c, phi) for c in img.data]
        ).astype(img.dtype)
    else:
        out = geometry.warp(img, phi).data
    dataio.write_volume(args.out, out, shape.spacing, spatial_ndim=phi.ndim)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    phi, shape = dataio.read_transform(args.transform)
    spacing = tuple(args.spacing) if args.spacing else shape.spacing
    row = {"case": args.case}
    nd_count, nd_pct = metrics.nd_voxels(phi)
    nd_vol, nd_vol_pct = metrics.nd_volume(phi)
    row.update(
        nd_voxel_count=nd_count,
        nd_voxel_pct=nd_pct,
        nd_volume=nd_vol,
        nd_volume_pct=nd_vol_pct,
        sdlogj=metrics.sdlogj(phi),
    )
    if bool(args.fixed_labels) != bool(args.moving_labels):
        raise UsageError("label evaluation needs both --fixed-labels and --moving-labels")
    if args.fixed_labels:
        lf = dataio.read_volume(args.fixed_labels)[0].data[0].astype(np.int32)
        lm = dataio.read_volume(args.moving_labels)[0].data[0].astype(np.int32)
        lw = metrics.warp_labels_nearest(lm, phi)
        _, mean_dsc = metrics.dice_score(lf, lw)
        classes = sorted(set(np.unique(lf)) | set(np.unique(lw)))
        hd = [metrics.hd95(lf, lw, c, spacing) for c in classes if c != 0]
        hd = [h for h in hd if not math.isnan(h)]
        row["dsc"] = mean_dsc
        row["hd95_mm"] = float(np.mean(hd)) if hd else math.nan
    if args.keypoints:
        kp = dataio.read_keypoints(args.keypoints, spacing)
        row["tre_mm"] = metrics.tre(phi, kp)[1]
    metrics.write_metrics_csv(args.out, [row])
    printable = {
        k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()
    }
    print(f"wrote {args.out}: {printable}")
    return EXIT_OK


def cmd_inspect(args):
    model = _load_model(args.model)
    fixed, _ = dataio.read_volume(args.fixed)
    moving, _ = dataio.read_volume(args.moving)
    phi, levels = pipeline.register(model, fixed, moving, collect_attention=True)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for lv in levels:
        sparsity = attention.sparsity_report(lv.weights)
        rows.append((lv.level, sparsity, float(np.abs(lv.u.data).max())))
        spatial = lv.phi.spatial
        write_pgm(
            os.path.join(args.out, f"attention_max_level{lv.level}.pgm"),
            lv.weights.max(axis=-1).reshape(spatial),
        )
    with open(os.path.join(args.out, "sparsity.csv"), "w") as fh:
        fh.write("level,mean_max_weight,max_abs_u\n")
        for level, sparsity, umax in rows:
            fh.write(f"{level},{sparsity:.6g},{umax:.6g}\n")
    u_mag = np.sqrt((phi.disp.data.astype(np.float64) ** 2).sum(axis=0))
    write_pgm(os.path.join(args.out, "displacement_magnitude.pgm"), u_mag)
    write_pgm(os.path.join(args.out, "jacobian.pgm"), metrics.jacobian_determinant(phi))
    print(f"wrote diagnostics to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    reports = gradcheck.run_all(seed=args.seed)
    print(gradcheck.format_report(reports))
    return EXIT_OK if all(r["passed"] for r in reports) else EXIT_INTERNAL


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "register": cmd_register,
    "warp": cmd_warp,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    argv = [str(a) for a in argv]
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(args, argv)
        return COMMANDS[args.command](args)
    except (ShapeError, FileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (InputError, UsageError, ParamError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # pragma: no cover - internal failures
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
