"""Multi-resolution registration model and training loop.

The model extracts feature pyramids from both images, matches them
level by level from coarse to fine, and chains the per-level local
transforms by upsample-and-compose.  Finer-level moving features are
pre-warped by the accumulated coarse transform before matching.  A
single learnable scalar ``beta`` (shared across levels) scales every
retrieved displacement; it starts small (0.1) so the initial output is
near identity and grows as the features become discriminative.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import attention, extractor, geometry, losses, nnops
from . import autodiff as ad
from .attention import AttentionConfig
from .autodiff import Var, as_var, constant
from .errors import InputError, ParamError, UsageError
from .extractor import ExtractorConfig
from .geometry import TransformGrid

CHECKPOINT_FORMAT = "attnreg-checkpoint"
CHECKPOINT_VERSION = 1

LOSS_PRESETS = {
    "t1-atlas": (("ncc", 1.0), ("diffusion", 1.0)),
    "multimodal": (("mi", 1.0), ("diffusion", 0.2)),
    "weakly-sup": (("mse", 1.0), ("diffusion", 0.05), ("dice", 1.0)),
    "semi-sup-tre": (("mse", 5.0), ("diffusion", 0.2), ("tre", 0.05)),
}


@dataclass(frozen=True)
class ModelConfig:
    ndim: int = 3
    channels: tuple = (8, 16, 32, 64, 128)
    match_channels: int = 16
    shared_weights: bool = True
    temperature: object = "sqrt_dk"
    similarity: str = "inner_product"
    window: int = 3
    diffeomorphic: bool = False
    integrator_steps: int = 7
    beta0: float = 0.1
    leaky_slope: float = 0.2
    kernel: int = 3

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ParamError(f"ndim must be 2 or 3, got {self.ndim}")

    @property
    def levels(self):
        return len(self.channels)

    def extractor_config(self):
        return ExtractorConfig(
            channels=tuple(self.channels),
            match_channels=self.match_channels,
            shared_weights=self.shared_weights,
            leaky_slope=self.leaky_slope,
            kernel=self.kernel,
        )

    def attention_config(self):
        return AttentionConfig(
            temperature=self.temperature,
            similarity=self.similarity,
            window=self.window,
        )


@dataclass
class LevelOutput:
    """Per-level intermediates from register(), coarse first."""

    level: int  # 1 = finest
    u: Var  # raw retrieved displacement at this level
    local: TransformGrid  # beta-scaled (or integrated) local transform
    phi: TransformGrid  # accumulated transform at this level
    weights: np.ndarray | None = None  # attention weights when collected


class RegistrationModel:
    """Holds all trainable state: extractor weights, per-level matching
    convs (separate for the fixed and moving branches), and beta."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        ecfg = config.extractor_config()
        self.weights_f = extractor.init_extractor(ecfg, config.ndim, rng, dtype)
        self.weights_m = (
            None
            if config.shared_weights
            else extractor.init_extractor(ecfg, config.ndim, rng, dtype)
        )
        self.prematch = {}
        k = (config.kernel,) * config.ndim
        for i, c in enumerate(config.channels):
            for branch in ("f", "m"):
                w_shape = (config.match_channels, c) + k
                fan_in = int(np.prod(w_shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                self.prematch[f"pm_{branch}{i}.w"] = Var(
                    rng.uniform(-bound, bound, w_shape).astype(dtype),
                    requires_grad=True,
                )
                self.prematch[f"pm_{branch}{i}.b"] = Var(
                    rng.uniform(-bound, bound, (config.match_channels,) + (1,) * config.ndim).astype(dtype),
                    requires_grad=True,
                )
        self.beta = Var(np.asarray(config.beta0, dtype=dtype), requires_grad=True)

    def named_parameters(self):
        params = {"beta": self.beta}
        for name, v in sorted(self.weights_f.items()):
            params["f." + name] = v
        if self.weights_m is not None:
            for name, v in sorted(self.weights_m.items()):
                params["m." + name] = v
        for name, v in sorted(self.prematch.items()):
            params[name] = v
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def set_parameter(self, name, value):
        arr = np.asarray(value, dtype=self.dtype)
        target = self.named_parameters()[name]
        new = Var(arr.reshape(target.shape), requires_grad=True)
        if name == "beta":
            self.beta = new
        elif name.startswith("f."):
            self.weights_f[name[2:]] = new
        elif name.startswith("m."):
            self.weights_m[name[2:]] = new
        else:
            self.prematch[name] = new

    def snapshot(self):
        return {k: np.array(v.data) for k, v in self.named_parameters().items()}

    def restore(self, snap):
        for k, v in snap.items():
            self.set_parameter(k, v)

    def parameter_count(self):
        return sum(v.size for v in self.parameters())


def _as_channeled(img, ndim):
    img = as_var(img)
    if img.ndim == ndim:
        return as_var(img.data.reshape((1,) + img.shape))
    if img.ndim == ndim + 1 and img.shape[0] == 1:
        return img
    raise InputError(f"expected a {ndim}-d single-channel image, got {img.shape}")


def register(model, img_f, img_m, collect_attention=False):
    """Estimate the transform aligning img_m to img_f.

    Returns (phi, levels): phi is the finest-level transform; levels
    holds per-level intermediates ordered coarse to fine.
    """
    cfg = model.config
    img_f = _as_channeled(img_f, cfg.ndim)
    img_m = _as_channeled(img_m, cfg.ndim)
    if img_f.shape != img_m.shape:
        raise InputError(f"image shape mismatch: {img_f.shape} vs {img_m.shape}")
    ecfg = cfg.extractor_config()
    acfg = cfg.attention_config()
    pyr_f, pyr_m = extractor.extract_pair(
        img_f, img_m, ecfg, model.weights_f, model.weights_m
    )
    phi = None
    outputs = []
    for i in reversed(range(cfg.levels)):
        feat_f, feat_m = pyr_f[i], pyr_m[i]
        if phi is None:
            phi_up = None
            m_in = feat_m
        else:
            phi_up = geometry.upsample_transform(phi)
            m_in = geometry.warp(feat_m, phi_up)
        q = ad.leaky_relu(
            nnops.conv(feat_f, model.prematch[f"pm_f{i}.w"]) + model.prematch[f"pm_f{i}.b"],
            cfg.leaky_slope,
        )
        k = ad.leaky_relu(
            nnops.conv(m_in, model.prematch[f"pm_m{i}.w"]) + model.prematch[f"pm_m{i}.b"],
            cfg.leaky_slope,
        )
        if collect_attention:
            u, wts = attention.field_attention(q, k, acfg, return_weights=True)
        else:
            u = attention.field_attention(q, k, acfg)
            wts = None
        if cfg.diffeomorphic:
            local = geometry.scaling_and_squaring(u * model.beta, cfg.integrator_steps)
        else:
            local = geometry.apply_beta(u, model.beta)
        phi = local if phi_up is None else geometry.compose(local, phi_up)
        outputs.append(LevelOutput(level=i + 1, u=u, local=local, phi=phi, weights=wts))
    return phi, outputs


def search_region(levels, window=3):
    """Per-axis width (in finest-level voxels) of the candidate cell region.

    Propagates the interval of reachable moving-image cells through the
    level chain: each upsample doubles cell indices (cell j covers fine
    cells 2j and 2j+1) and each finer matching window extends the
    interval by the window radius on both sides.
    """
    r = window // 2
    lo, hi = -r, r
    for _ in range(levels - 1):
        lo, hi = 2 * lo, 2 * hi + 1
        lo, hi = lo - r, hi + r
    return hi - lo + 1


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    preset: str = "t1-atlas"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    max_steps: int | None = None
    flip_augment: bool = False
    seed: int = 0
    ncc_window: int = 9
    mi_bins: int = 32

    def terms(self):
        if self.preset not in LOSS_PRESETS:
            raise ParamError(
                f"unknown preset {self.preset!r}; have {sorted(LOSS_PRESETS)}"
            )
        return LOSS_PRESETS[self.preset]


class Adam:
    """Adam with bias correction; moments (0.9, 0.999), no weight decay."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mh = self.m[i] / (1 - b1**self.t)
            vh = self.v[i] / (1 - b2**self.t)
            new = np.asarray(p.data - self.lr * mh / (np.sqrt(vh) + self.eps))
            new = new.astype(p.dtype).reshape(p.shape)
            new.flags.writeable = False
            p.data = new

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def _one_hot(labels, classes, dtype):
    arr = np.stack([(labels == c) for c in classes]).astype(dtype)
    return arr


def compute_loss_terms(model, pair, cfg, phi=None):
    """Forward pass plus every configured loss term for one pair.

    Returns (total Var, {term: float}, phi).  ``pair`` is a dict with
    'fixed' and 'moving' images plus optional 'fixed_labels',
    'moving_labels', 'keypoints', and 'spacing' entries.
    """
    ndim = model.config.ndim
    img_f = _as_channeled(pair["fixed"], ndim)
    img_m = _as_channeled(pair["moving"], ndim)
    if phi is None:
        phi, _ = register(model, img_f, img_m)
    warped = geometry.warp(img_m, phi)
    total = None
    values = {}
    for name, weight in cfg.terms():
        if name == "ncc":
            term = losses.ncc_loss(img_f, warped, cfg.ncc_window)
        elif name == "mi":
            term = losses.mi_loss(img_f, warped, cfg.mi_bins)
        elif name == "mse":
            term = losses.mse_loss(img_f, warped)
        elif name == "diffusion":
            term = losses.diffusion_reg(phi.disp)
        elif name == "dice":
            if "fixed_labels" not in pair or "moving_labels" not in pair:
                raise UsageError(f"preset {cfg.preset!r} requires label maps")
            lf, lm = pair["fixed_labels"], pair["moving_labels"]
            classes = sorted((set(np.unique(lf)) | set(np.unique(lm))) - {0})
            oh_f = constant(_one_hot(lf, classes, model.dtype))
            oh_m = constant(_one_hot(lm, classes, model.dtype))
            term = losses.dice_loss(oh_f, geometry.warp(oh_m, phi))
        elif name == "tre":
            if "keypoints" not in pair:
                raise UsageError(f"preset {cfg.preset!r} requires keypoints")
            term = losses.tre_loss(phi, pair["keypoints"])
        else:
            raise ParamError(f"unknown loss term {name!r}")
        values[name] = float(term.data)
        weighted = term * float(weight)
        total = weighted if total is None else total + weighted
    return total, values, phi


def _displacement_stats(phi):
    u = np.abs(phi.disp.data)
    return {"max_abs_u": float(u.max()), "mean_abs_u": float(u.mean())}


def train_step(model, optimizer, pair, cfg):
    """One forward/backward/update; returns per-term losses and beta."""
    total, values, phi = compute_loss_terms(model, pair, cfg)
    if not math.isfinite(float(total.data)):
        raise RuntimeError(
            f"non-finite loss {float(total.data)}; displacement stats: "
            f"{_displacement_stats(phi)}"
        )
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    values["total"] = float(total.data)
    values["beta"] = float(model.beta.data)
    return values


def random_flip(pair, rng, ndim):
    """Flip both volumes (and aux data) along a random subset of axes.

    Applying the same flip twice recovers the original pair.
    """
    axes = tuple(ax for ax in range(ndim) if rng.integers(2))
    return flip_pair(pair, axes, ndim), axes


def flip_pair(pair, axes, ndim):
    if not axes:
        return pair
    out = dict(pair)
    for key in ("fixed", "moving", "fixed_labels", "moving_labels"):
        if key in out and out[key] is not None:
            arr = np.asarray(out[key])
            flip_axes = tuple(a + (arr.ndim - ndim) for a in axes)
            out[key] = np.flip(arr, axis=flip_axes).copy()
    if out.get("keypoints") is not None:
        kp = out["keypoints"]
        shape = np.asarray(pair["fixed"]).shape[-ndim:]
        fixed = kp.fixed_points.copy()
        moving = kp.moving_points.copy()
        for ax in axes:
            fixed[:, ax] = shape[ax] - 1 - fixed[:, ax]
            moving[:, ax] = shape[ax] - 1 - moving[:, ax]
        from .metrics import KeypointSet

        out["keypoints"] = KeypointSet(fixed, moving, kp.spacing)
    return out


def validation_metric(model, pairs, cfg):
    """Mean similarity-term loss over pairs; endpoint error when ground
    truth transforms are available (lower is better either way)."""
    scores = []
    for pair in pairs:
        phi, _ = register(model, pair["fixed"], pair["moving"])
        if pair.get("phi_gt") is not None:
            gt = np.asarray(pair["phi_gt"])
            diff = phi.disp.data.astype(np.float64) - gt
            scores.append(float(np.sqrt((diff**2).sum(axis=0)).mean()))
        else:
            _, values, _ = compute_loss_terms(model, pair, cfg, phi=phi)
            sim = cfg.terms()[0][0]
            scores.append(values[sim])
    return float(np.mean(scores))


def history_header(cfg):
    cols = ["step", "epoch", "total"]
    cols += [f"{name}*{weight:g}" for name, weight in cfg.terms()]
    cols += ["beta", "val_metric"]
    return cols


def write_history_csv(path, cfg, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = history_header(cfg)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [
                    row["step"],
                    row["epoch"],
                    f"{row['total']:.6g}",
                ]
                + [f"{row[name]:.6g}" for name, _ in cfg.terms()]
                + [
                    f"{row['beta']:.6g}",
                    "" if row.get("val_metric") is None else f"{row['val_metric']:.6g}",
                ]
            )


def fit(model, dataset, cfg, val_pairs=None, history_path=None, progress=None):
    """Train over the dataset; returns (history rows, best snapshot).

    Validation runs at every epoch end (on val_pairs when given, else on
    the training pairs); the best-scoring parameter snapshot is retained
    and also restored into the model at the end when validation data is
    available.
    """
    if not dataset:
        raise UsageError("fit requires a nonempty dataset")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(
        model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps
    )
    history = []
    best_score = math.inf
    best_snap = model.snapshot()
    step = 0
    done = False
    epochs = cfg.epochs
    if cfg.max_steps is not None:
        epochs = max(epochs, math.ceil(cfg.max_steps / len(dataset)))
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for idx in order:
            pair = dataset[int(idx)]
            if cfg.flip_augment:
                pair, _ = random_flip(pair, rng, model.config.ndim)
            values = train_step(model, optimizer, pair, cfg)
            step += 1
            row = {"step": step, "epoch": epoch, "val_metric": None, **values}
            history.append(row)
            if progress is not None:
                progress(row)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        score = validation_metric(model, val_pairs or dataset, cfg)
        history[-1]["val_metric"] = score
        if score < best_score:
            best_score = score
            best_snap = model.snapshot()
        if done:
            break
    if val_pairs:
        model.restore(best_snap)
    if history_path is not None:
        write_history_csv(history_path, cfg, history)
    return history, best_snap


# -- checkpoints --------------------------------------------------------------


def save_model(path, model):
    """Versioned container: config echo as JSON plus named f32 arrays.

    Returns the path actually written (np.savez enforces a .npz suffix).
    """
    path = str(path)
    if not path.endswith(".npz"):
        path += ".npz"
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {**asdict(model.config), "channels": list(model.config.channels)},
    }
    arrays = {k: np.asarray(v.data) for k, v in model.named_parameters().items()}
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_model(path):
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise InputError(f"{path}: not a model checkpoint (missing metadata)")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"{path}: unexpected checkpoint format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg_dict = dict(meta["config"])
        cfg_dict["channels"] = tuple(cfg_dict["channels"])
        config = ModelConfig(**cfg_dict)
        model = RegistrationModel(config)
        for name in model.named_parameters():
            if name not in data:
                raise InputError(f"{path}: checkpoint missing parameter {name!r}")
            model.set_parameter(name, data[name])
    return model
