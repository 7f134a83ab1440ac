"""Training configuration and the optimisation loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .losses import (
    LossWeights,
    depth_prior_loss,
    normal_consistency_from_buffers,
    normal_prior_loss,
    opacity_bce_loss,
    photometric_loss,
    psnr,
    total_loss,
)
from .optim import AdamState, DensifyConfig, adam_step, densify_and_prune
from .pipeline import Model, backward, default_background, forward, geo_carries_features, has_local_set, target_image
from .scene import Dataset, NumericError, SceneError, bbox_of_cameras_targets, init_scene
from .shader import MODES, ShaderMLP, input_dim
from .sphmip import SphMip

LOG_COLUMNS = ["iter", "view", "L_c", "L_n", "L_alpha", "L_prior", "total", "psnr_train", "n_geo", "n_local"]

DEFAULT_LR = {
    "centers": 1.6e-4,
    "rotations": 1e-3,
    "log_scales": 5e-3,
    "opacity": 5e-2,
    "diffuse": 2.5e-3,
    "roughness": 2.5e-3,
    "features": 2.5e-3,
    "sphmip": 1e-2,
    "mlp": 1e-3,
}

_PARAM_TO_LR = {
    "centers": "centers",
    "rotations": "rotations",
    "log_scales": "log_scales",
    "raw_opacities": "opacity",
    "diffuse_rgb": "diffuse",
    "raw_roughness": "roughness",
    "features": "features",
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 3000
    warmup_iters: int = 500
    ablation: str = "full"
    seed: int = 0
    resolution_scale: float = 1.0
    background: Optional[list] = None  # None: white with alpha masks, else black
    save_every: int = 0
    output_dir: str = "runs/train"
    n_geo: int = 2000
    n_local: int = 1000
    feature_dim: int = 4
    init_opacity: float = 0.1
    init_bbox: Optional[list] = None  # [[lo], [hi]]; None: estimated from the cameras
    sphmip_height: int = 512
    sphmip_width: int = 1024
    sphmip_levels: int = 9
    mlp_width: int = 64
    mlp_depth: int = 3
    center_lr_final_ratio: float = 0.01
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    loss: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def validate(self) -> None:
        if self.ablation not in MODES:
            raise ConfigError(f"ablation must be one of {', '.join(MODES)} (got {self.ablation!r})")
        if self.iterations <= 0:
            raise ConfigError("iterations must be > 0")
        if self.resolution_scale <= 0:
            raise ConfigError("resolution_scale must be > 0")
        if self.n_geo < 1 or self.n_local < 0:
            raise ConfigError("n_geo must be >= 1 and n_local >= 0")
        unknown = set(self.lr) - set(DEFAULT_LR)
        if unknown:
            raise ConfigError(f"unknown learning-rate group(s): {', '.join(sorted(unknown))}")
        if any(v < 0 for v in self.lr.values()):
            raise ConfigError("learning rates must be >= 0")
        self.loss.validate()
        self.densify.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        cfg = cls()
        apply_overrides(cfg, data)
        return cfg


def _set_field(obj, key: str, value, path: str):
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown config key {path!r}")
    cur = getattr(obj, key)
    if dataclasses.is_dataclass(cur):
        if not isinstance(value, dict):
            raise ConfigError(f"config key {path!r} expects an object")
        for k, v in value.items():
            _set_field(cur, k, v, f"{path}.{k}")
    elif key == "lr":
        if not isinstance(value, dict):
            raise ConfigError("config key 'lr' expects an object")
        for k, v in value.items():
            if k not in DEFAULT_LR:
                raise ConfigError(f"unknown config key 'lr.{k}'")
            cur[k] = float(v)
    else:
        if isinstance(cur, bool):
            value = _as_bool(value, path)
        elif isinstance(cur, int) and not isinstance(value, bool):
            if float(value) != int(float(value)):
                raise ConfigError(f"config key {path!r} expects an integer")
            value = int(float(value))
        elif isinstance(cur, float):
            value = float(value)
        setattr(obj, key, value)


def _as_bool(v, path):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key {path!r} expects a boolean")


def apply_overrides(cfg: TrainConfig, data: dict) -> TrainConfig:
    for k, v in data.items():
        _set_field(cfg, k, v, k)
    return cfg


def apply_dotted(cfg: TrainConfig, key: str, raw: str) -> TrainConfig:
    """``--set a.b=value``; the value is parsed as JSON when possible."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    nested = value
    for p in reversed(parts[1:]):
        nested = {p: nested}
    return apply_overrides(cfg, {parts[0]: nested})


@dataclass
class TrainResult:
    model: Model
    checkpoint: Checkpoint
    log: list
    densify_reports: list = field(default_factory=list)


def _lr_table(cfg: TrainConfig, model: Model, spatial: float) -> dict:
    out = {}
    for name in model.params():
        if name == "sphmip":
            out[name] = cfg.lr["sphmip"]
        elif name.startswith("mlp."):
            out[name] = cfg.lr["mlp"]
        else:
            pname = name.split(".", 1)[1]
            lr = cfg.lr[_PARAM_TO_LR[pname]]
            out[name] = lr * spatial if pname == "centers" else lr
    return out


def build_model(cfg: TrainConfig, bbox) -> Model:
    mode = cfg.ablation
    n_local = cfg.n_local if has_local_set(mode) else 0
    geo, local = init_scene(bbox, cfg.n_geo, max(n_local, 1), cfg.seed, feature_dim=cfg.feature_dim,
                            geo_features=geo_carries_features(mode), init_opacity=cfg.init_opacity)
    if not has_local_set(mode):
        local = None
    shape = (cfg.sphmip_height, cfg.sphmip_width, cfg.feature_dim)
    sph = SphMip.init(cfg.seed + 1, shape, cfg.sphmip_levels)
    mlp = ShaderMLP.init(input_dim(mode, cfg.feature_dim), cfg.seed + 2, width=cfg.mlp_width, depth=cfg.mlp_depth)
    return Model(geo, local, sph, mlp, mode)


def _scene_bbox(cfg: TrainConfig, dataset: Dataset):
    if cfg.init_bbox is not None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in cfg.init_bbox)
        return lo, hi
    return bbox_of_cameras_targets(dataset.cameras)


def _loss_terms(frame, gt, rgba, dataset, view, cfg, use_bce):
    terms = {"color": photometric_loss(frame.image, gt, cfg.loss.ssim_lambda)}
    gb = frame.geo
    terms["normal"] = normal_consistency_from_buffers(gb.alpha, gb.normal_sum)
    if use_bce:
        terms["alpha"] = opacity_bce_loss(gb.alpha, rgba[..., 3])
    covered = gb.alpha > 0.1
    if dataset.has_alpha:
        covered &= rgba[..., 3] > 0.5
    if dataset.depth_priors is not None and dataset.depth_priors[view] is not None:
        mask = covered & (dataset.depth_priors[view] > 0)
        if mask.sum() >= 2:
            terms["depth_prior"] = depth_prior_loss(gb.depth, dataset.depth_priors[view], mask)
    if dataset.normal_priors is not None and dataset.normal_priors[view] is not None:
        ref = dataset.normal_priors[view]
        mask = covered & (np.linalg.norm(ref, axis=-1) > 0.5)
        if mask.any():
            terms["normal_prior"] = normal_prior_loss(gb.normal, ref, mask, cfg.loss.normal_cos)
    return terms


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    seed: Optional[int] = None,
    out_dir: Optional[Path] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Optimise both sets, the Sph-Mip and the shader on ``dataset``.

    ``seed`` overrides ``cfg.seed``. With ``out_dir`` set, writes
    ``log.csv`` and checkpoints there.
    """
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    cfg.validate()
    if len(dataset) == 0:
        raise SceneError("empty dataset")
    dataset.validate()
    if cfg.resolution_scale != 1.0:
        dataset = _rescaled(dataset, cfg.resolution_scale)
    bg = np.asarray(cfg.background if cfg.background is not None else default_background(dataset.has_alpha),
                    dtype=np.float64)
    bbox = _scene_bbox(cfg, dataset)
    spatial = 0.5 * float(np.linalg.norm(np.asarray(bbox[1]) - np.asarray(bbox[0])))
    model = build_model(cfg, bbox)
    params = model.params()
    base_lr = _lr_table(cfg, model, spatial)
    state = AdamState.create(params, base_lr)
    rng = np.random.default_rng(cfg.seed + 3)
    dens_rng = np.random.default_rng(cfg.seed + 4)
    use_bce = cfg.loss.bce_enabled and dataset.has_alpha
    targets = [target_image(img, bg) for img in dataset.images]

    sets = ["geo"] + (["local"] if has_local_set(model.mode) else [])
    accum = {s: np.zeros(len(getattr(model, s))) for s in sets}
    counts = {s: np.zeros(len(getattr(model, s))) for s in sets}
    reports = []
    log_rows = []
    writer = log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "log.csv", "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
    perm: list = []
    try:
        for it in range(cfg.iterations):
            if not perm:
                perm = list(rng.permutation(len(dataset)))
            view = int(perm.pop(0))
            cam = dataset.cameras[view]
            warm = it < cfg.warmup_iters
            frame = forward(model, cam, bg, warmup=warm)
            terms = _loss_terms(frame, targets[view], dataset.images[view], dataset, view, cfg, use_bce)
            tl = total_loss(terms, cfg.loss, it)
            if not math.isfinite(tl.value):
                raise NumericError(f"non-finite loss at iteration {it}, view {view}: "
                                   + ", ".join(f"{k}={v}" for k, v in tl.terms.items()))
            g_image = tl.grads.pop("image")
            grads = backward(model, cam, frame, g_image, tl.grads)
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient for {name} at iteration {it}, view {view}")
            decay = cfg.center_lr_final_ratio ** (it / max(cfg.iterations - 1, 1))
            scale = {k: decay for k in params if k.endswith(".centers")}
            params = adam_step(state, params, grads, scale)
            model.set_params(params)

            for s in sets:
                g = grads.get(f"{s}.centers")
                if g is not None:
                    accum[s] += np.linalg.norm(g, axis=1)
                    vis = np.unique(getattr(frame, s).tiles.entries)
                    counts[s][vis] += 1

            d = cfg.densify
            if d.start <= it + 1 <= d.stop and (it + 1) % d.interval == 0:
                for s in sets:
                    if not getattr(d, s):
                        continue
                    cur = getattr(model, s)
                    if d.prune_opacity > 0 and len(cur) and np.all(cur.raw_opacities < np.log(d.prune_opacity / (1 - d.prune_opacity))):
                        # everything would be pruned; leave the set alone rather than emptying it
                        continue
                    new, _, _, rep = densify_and_prune(cur, accum[s], counts[s], d, spatial,
                                                       dens_rng, state, prefix=f"{s}.")
                    setattr(model, s, new)
                    rep_d = dataclasses.asdict(rep)
                    rep_d.update(iter=it + 1, set=s)
                    reports.append(rep_d)
                    accum[s] = np.zeros(len(new))
                    counts[s] = np.zeros(len(new))
                params = model.params()
                state.check(params)

            row = {
                "iter": it,
                "view": view,
                "L_c": tl.terms.get("color", 0.0),
                "L_n": tl.terms.get("normal", 0.0),
                "L_alpha": tl.terms.get("alpha", 0.0),
                "L_prior": tl.terms.get("depth_prior", 0.0) + tl.terms.get("normal_prior", 0.0),
                "total": tl.value,
                "psnr_train": psnr(frame.image, targets[view]),
                "n_geo": len(model.geo),
                "n_local": len(model.local) if has_local_set(model.mode) else 0,
            }
            log_rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            if progress is not None:
                progress(row)
            if out_dir is not None and cfg.save_every > 0 and (it + 1) % cfg.save_every == 0:
                save_checkpoint(make_checkpoint(model, cfg, it + 1, bg), out_dir / f"ckpt_{it + 1:06d}.rdgs")
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = make_checkpoint(model, cfg, cfg.iterations, bg)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "final.rdgs")
    return TrainResult(model, ckpt, log_rows, reports)


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def make_checkpoint(model: Model, cfg: TrainConfig, iteration: int, background=None) -> Checkpoint:
    meta = {"mode": model.mode}
    if background is not None:
        meta["background"] = [float(b) for b in background]
    return Checkpoint(model.geo, model.local, model.sphmip, model.mlp, iteration, cfg.to_dict(), meta)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    mode = ckpt.meta.get("mode", ckpt.config.get("ablation", "full"))
    return Model(ckpt.geo, ckpt.local, ckpt.sphmip, ckpt.mlp, mode)


def _rescaled(ds: Dataset, factor: float) -> Dataset:
    import cv2

    cams = [c.scaled(factor) for c in ds.cameras]
    size = (cams[0].width, cams[0].height)

    def rs(a, interp):
        return None if a is None else cv2.resize(np.asarray(a, dtype=np.float64), size, interpolation=interp)

    imgs = [rs(im, cv2.INTER_AREA) for im in ds.images]
    deps = None if ds.depth_priors is None else [rs(d, cv2.INTER_NEAREST) for d in ds.depth_priors]
    nrms = None if ds.normal_priors is None else [rs(n, cv2.INTER_NEAREST) for n in ds.normal_priors]
    return Dataset(cams, imgs, deps, nrms, ds.camera_angle_x, list(ds.names))


__all__ = [
    "ConfigError",
    "DEFAULT_LR",
    "LOG_COLUMNS",
    "TrainConfig",
    "TrainResult",
    "apply_dotted",
    "apply_overrides",
    "build_model",
    "make_checkpoint",
    "model_from_checkpoint",
    "train",
]
