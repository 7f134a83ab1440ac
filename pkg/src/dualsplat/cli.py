"""Command-line driver: train, render, eval, gradcheck, make-scene.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure (including a failing gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DUMPS = ("diffuse", "specular", "roughness", "normal", "depth", "features")

log = logging.getLogger("dualsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _set_threads(n) -> None:
    if n is None:
        return
    if n < 0:
        raise UsageError("--threads must be >= 0")
    from .rasterizer import set_threads

    set_threads(n)


# --- train ----------------------------------------------------------------------

def effective_config(config_path=None, sets=(), iters=None, ablation=None, seed=None, out=None):
    """Defaults, then the JSON file, then ``--set`` pairs, then dedicated flags."""
    from .train import TrainConfig, apply_dotted, apply_overrides

    cfg = TrainConfig()
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text())
        except OSError as e:
            raise UsageError(f"cannot read config {config_path}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {config_path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        apply_overrides(cfg, data)
    for item in sets:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        apply_dotted(cfg, key.strip(), raw)
    if iters is not None:
        cfg.iterations = iters
    if ablation is not None:
        cfg.ablation = ablation
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output_dir = str(out)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    from .dataset import ingest_dataset
    from .pipeline import evaluate
    from .train import train

    cfg = effective_config(args.config, args.set or (), args.iters, args.ablation, args.seed, args.out)
    _set_threads(args.threads)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    dataset = ingest_dataset(args.data, args.split)

    def progress(row):
        if row["iter"] % max(args.log_every, 1) == 0:
            log.info("iter %d  L=%.5f  psnr=%.2f  geo=%d local=%d", row["iter"], row["total"],
                     row["psnr_train"], row["n_geo"], row["n_local"])

    res = train(dataset, cfg, out_dir=out, progress=progress)
    bg = res.checkpoint.meta["background"]
    if cfg.resolution_scale != 1.0:
        dataset = ingest_dataset(args.data, args.split, cfg.resolution_scale)
    metrics = evaluate(res.model, dataset, bg)
    metrics.update(split=args.split, iterations=cfg.iterations, densify=res.densify_reports)
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics["mean"]))
    return EXIT_OK


# --- render / eval ----------------------------------------------------------------

def _load_model(path):
    from .checkpoint import load_checkpoint
    from .train import model_from_checkpoint

    ckpt = load_checkpoint(path)
    return ckpt, model_from_checkpoint(ckpt)


def _background(ckpt, dataset=None):
    from .pipeline import default_background

    if "background" in ckpt.meta:
        return np.asarray(ckpt.meta["background"], dtype=np.float64)
    if ckpt.config.get("background") is not None:
        return np.asarray(ckpt.config["background"], dtype=np.float64)
    return default_background(dataset.has_alpha if dataset is not None else False)


def _parse_dumps(spec) -> list:
    if not spec:
        return []
    items = [s.strip() for s in spec.split(",") if s.strip()]
    if "all" in items:
        return list(DUMPS)
    bad = [s for s in items if s not in DUMPS]
    if bad:
        raise UsageError(f"unknown dump(s) {', '.join(bad)}; valid: {', '.join(DUMPS)}, all")
    return items


def _dump(out: Path, name: str, frame, dumps) -> None:
    from .color import linear_to_srgb
    from .dataset import write_pfm, write_png

    res = frame.result
    for kind in dumps:
        if kind == "diffuse":
            write_png(out / f"{name}_diffuse.png", linear_to_srgb(np.clip(res.c_diff, 0, 1)))
        elif kind == "specular":
            write_png(out / f"{name}_specular.png", linear_to_srgb(np.clip(res.c_spec, 0, 1)))
        elif kind == "roughness":
            write_png(out / f"{name}_roughness.png", np.clip(res.roughness, 0, 1))
        elif kind == "normal":
            write_png(out / f"{name}_normal.png", np.clip((res.normal + 1.0) * 0.5, 0, 1), bits=16)
        elif kind == "depth":
            write_pfm(out / f"{name}_depth.pfm", frame.geo.depth)
        elif kind == "features":
            np.save(out / f"{name}_f_global.npy", res.f_global)
            if res.f_local is not None:
                np.save(out / f"{name}_f_local.npy", np.asarray(res.f_local))


def cmd_render(args) -> int:
    from .dataset import ingest_dataset, read_camera_spec, write_png
    from .pipeline import forward

    dumps = _parse_dumps(args.dump)
    if (args.camera is None) == (args.data is None):
        raise UsageError("render needs exactly one of --camera or --data")
    _set_threads(args.threads)
    ckpt, model = _load_model(args.checkpoint)
    if args.camera is not None:
        cams = read_camera_spec(args.camera)
        names = [f"view_{i:03d}" for i in range(len(cams))]
        bg = _background(ckpt)
    else:
        ds = ingest_dataset(args.data, args.split)
        cams, names = ds.cameras, ds.names
        bg = _background(ckpt, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam, name in zip(cams, names):
        frame = forward(model, cam, bg)
        write_png(out / f"{name}.png", frame.image)
        _dump(out, name, frame, dumps)
    print(f"rendered {len(cams)} view(s) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import ingest_dataset
    from .pipeline import evaluate

    _set_threads(args.threads)
    ckpt, model = _load_model(args.checkpoint)
    ds = ingest_dataset(args.data, args.split)
    metrics = evaluate(model, ds, _background(ckpt, ds))
    metrics["split"] = args.split
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"metrics_{args.split}.json")
    _write_json(out, metrics)
    print(json.dumps(metrics["mean"]))
    return EXIT_OK


# --- gradcheck / make-scene ---------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import MODULES, TOLERANCE, run_gradcheck

    mods = args.module or list(MODULES)
    bad = [m for m in mods if m not in MODULES]
    if bad:
        raise UsageError(f"unknown module(s) {', '.join(bad)}; valid: {', '.join(MODULES)}")
    results = run_gradcheck(mods, seed=args.seed, corrupt=args.corrupt)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.module:<10} {r.group:<22} max_rel_err={r.error:.3e}  n={r.size}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} groups within {TOLERANCE:g}")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_make_scene(args) -> int:
    from .scene import SceneError
    from .toyscene import SceneKind, make_toy_scene

    try:
        SceneKind.parse(args.kind)
    except SceneError as e:
        raise UsageError(str(e)) from None
    scene = make_toy_scene(args.kind, args.seed, args.views, args.resolution)
    root = scene.write(args.out)
    desc = {"kind": scene.kind.value, "seed": args.seed, "views": args.views, "resolution": args.resolution,
            "descriptor": scene.descriptor}
    _write_json(Path(root) / "scene.json", desc)
    print(f"wrote {scene.kind.value} ({len(scene.train)} train / {len(scene.test)} test views) to {root}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .shader import MODES

    p = _Parser(prog="dualsplat", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="optimise a scene from a dataset directory")
    t.add_argument("--data", required=True, help="dataset root (transforms.json layout)")
    t.add_argument("--split", default="train")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a (dotted) config key")
    t.add_argument("--iters", type=int)
    t.add_argument("--ablation", choices=MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--threads", type=int, help="kernel worker threads, 0 = all cores")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", help="dataset root whose split supplies the cameras")
    r.add_argument("--split", default="test")
    r.add_argument("--camera", help="transforms-style JSON with w, h, camera_angle_x, frames")
    r.add_argument("--out", required=True)
    r.add_argument("--dump", help=f"comma list of {', '.join(DUMPS)} or all")
    r.add_argument("--threads", type=int)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR / SSIM / normal MAE of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="metrics JSON path (default: next to the checkpoint)")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    g.add_argument("--module", action="append", help="restrict to a module (repeatable)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control hook
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("make-scene", help="write a synthetic scene with analytic ground truth")
    m.add_argument("kind", help="diffuse_blobs, mirror_plane or glossy_sphere")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--views", type=int, default=16)
    m.add_argument("--resolution", type=int, default=128)
    m.set_defaults(func=cmd_make_scene)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .losses import LossError
    from .optim import OptimError
    from .scene import NumericError, SceneError
    from .train import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, OptimError, LossError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, SceneError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
