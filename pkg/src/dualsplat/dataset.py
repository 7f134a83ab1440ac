"""NeRF-synthetic style dataset reading and writing.

Layout::

    root/
      transforms.json          # train split (transforms_<split>.json for others)
      <file_path>.png          # RGBA, 8 or 16 bit, sRGB colour
      depth/<frame>.pfm        # optional camera-z depth prior, 0 = invalid
      normal/<frame>.png       # optional world-frame normal prior, (n+1)/2

``transform_matrix`` is camera-to-world in the OpenGL convention (camera
looks down -z, y up); cameras are converted to the internal x-right,
y-down, z-forward frame on load.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .color import linear_to_srgb, srgb_to_linear
from .scene import Camera, Dataset, SceneError

log = logging.getLogger(__name__)

GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class DatasetError(SceneError):
    pass


# --- PFM -------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise DatasetError(f"{path}: not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 1 if header == b"Pf" else 3
        raw = f.read()
    expected = w * h * chans * 4
    if len(raw) < expected:
        raise DatasetError(f"{path}: truncated PFM ({len(raw)} of {expected} bytes)")
    arr = np.frombuffer(raw[:expected], dtype=dtype).astype(np.float32)
    arr = arr.reshape((h, w) if chans == 1 else (h, w, 3))
    return arr[::-1].copy()


# --- PNG -------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    """Float image in [0, 1], channels in RGB(A) order."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"cannot read image {path}")
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    img = img.astype(np.float64) / scale
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[2] == 4:
        return img[..., [2, 1, 0, 3]]
    return img[..., ::-1]


def write_png(path, img: np.ndarray, bits: int = 8) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    maxv, dtype = (65535.0, np.uint16) if bits == 16 else (255.0, np.uint8)
    q = np.round(img * maxv).astype(dtype)
    if q.ndim == 3 and q.shape[2] == 4:
        q = q[..., [2, 1, 0, 3]]
    elif q.ndim == 3:
        q = q[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise DatasetError(f"cannot write image {path}")


# --- manifest --------------------------------------------------------------


def focal_from_angle(width: int, camera_angle_x: float) -> float:
    return width / (2.0 * math.tan(camera_angle_x / 2.0))


def angle_from_focal(width: int, fx: float) -> float:
    return 2.0 * math.atan(width / (2.0 * fx))


def _manifest_path(root: Path, split: str) -> Path:
    cand = root / f"transforms_{split}.json"
    if cand.exists():
        return cand
    if split == "train" and (root / "transforms.json").exists():
        return root / "transforms.json"
    raise DatasetError(f"no manifest for split '{split}' in {root}")


def _resolve_image(root: Path, file_path: str) -> Path:
    p = root / file_path
    if p.suffix == "":
        p = p.with_suffix(".png")
    return p


def ingest_dataset(root, split: str = "train", scale: float = 1.0) -> Dataset:
    root = Path(root)
    manifest = _manifest_path(root, split)
    try:
        meta = json.loads(manifest.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"cannot parse {manifest}: {e}") from e
    if "frames" not in meta or "camera_angle_x" not in meta:
        raise DatasetError(f"{manifest}: missing 'frames' or 'camera_angle_x'")

    angle = float(meta["camera_angle_x"])
    cameras, images, depths, normals, names = [], [], [], [], []
    size = None
    for i, frame in enumerate(meta["frames"]):
        path = _resolve_image(root, frame["file_path"])
        if not path.exists():
            raise DatasetError(f"frame {i}: missing image file {path}")
        rgba = read_png(path)
        if rgba.shape[2] == 3:
            rgba = np.concatenate([rgba, np.ones(rgba.shape[:2] + (1,))], axis=2)
        if scale != 1.0:
            h, w = rgba.shape[:2]
            rgba = cv2.resize(rgba, (round(w * scale), round(h * scale)), interpolation=cv2.INTER_AREA)
        h, w = rgba.shape[:2]
        if size is None:
            size = (h, w)
        elif size != (h, w):
            raise DatasetError(f"frame {i}: image size {(h, w)} differs from {size}")
        rgba = rgba.copy()
        rgba[..., :3] = srgb_to_linear(rgba[..., :3])
        images.append(rgba)

        fx = focal_from_angle(w, angle)
        fy = float(meta["fl_y"]) * scale if "fl_y" in meta else fx
        cx = float(meta["cx"]) * scale if "cx" in meta else w / 2.0
        cy = float(meta["cy"]) * scale if "cy" in meta else h / 2.0
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64).reshape(4, 4) @ GL_TO_CV
        cameras.append(Camera(w, h, fx, fy, cx, cy, c2w))

        stem = Path(frame["file_path"]).stem
        names.append(stem)
        depths.append(_load_depth(root, frame, stem, (h, w), scale != 1.0))
        normals.append(_load_normal(root, frame, stem, (h, w), scale != 1.0))

    ds = Dataset(
        cameras=cameras,
        images=images,
        depth_priors=depths if any(d is not None for d in depths) else None,
        normal_priors=normals if any(n is not None for n in normals) else None,
        camera_angle_x=angle,
        names=names,
    )
    ds.validate()
    log.info("loaded %d frames (%s) from %s", len(ds), split, root)
    return ds


def _load_depth(root: Path, frame: dict, stem: str, shape, resize: bool) -> Optional[np.ndarray]:
    rel = frame.get("depth_file_path")
    path = root / rel if rel else root / "depth" / f"{stem}.pfm"
    if not path.exists():
        if rel:
            raise DatasetError(f"missing depth prior {path}")
        return None
    d = read_pfm(path).astype(np.float64)
    if d.shape != shape and not resize:
        raise DatasetError(f"depth prior {path} has size {d.shape}, expected {shape}")
    if d.shape != shape:
        d = cv2.resize(d, (shape[1], shape[0]), interpolation=cv2.INTER_NEAREST)
    d[~np.isfinite(d)] = 0.0
    return d


def _load_normal(root: Path, frame: dict, stem: str, shape, resize: bool) -> Optional[np.ndarray]:
    rel = frame.get("normal_file_path")
    path = root / rel if rel else root / "normal" / f"{stem}.png"
    if not path.exists():
        if rel:
            raise DatasetError(f"missing normal prior {path}")
        return None
    n = read_png(path)[..., :3] * 2.0 - 1.0
    if n.shape[:2] != shape and not resize:
        raise DatasetError(f"normal prior {path} has size {n.shape[:2]}, expected {shape}")
    if n.shape[:2] != shape:
        n = cv2.resize(n, (shape[1], shape[0]), interpolation=cv2.INTER_NEAREST)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    valid = norm > 0.5
    return np.where(valid, n / np.maximum(norm, 1e-12), 0.0)


def write_dataset(
    root,
    cameras: list,
    images_linear: list,
    split: str = "train",
    depths: Optional[list] = None,
    normals: Optional[list] = None,
    prefix: str = "r",
) -> Path:
    """Write frames in the layout :func:`ingest_dataset` reads.

    ``images_linear`` are (H, W, 4) arrays with straight (non-premultiplied)
    linear colour and alpha.
    """
    root = Path(root)
    sub = root / split
    sub.mkdir(parents=True, exist_ok=True)
    frames = []
    w = cameras[0].width
    for i, (cam, img) in enumerate(zip(cameras, images_linear)):
        name = f"{prefix}_{i}"
        rgba = np.concatenate([linear_to_srgb(np.clip(img[..., :3], 0, 1)), img[..., 3:4]], axis=2)
        write_png(sub / f"{name}.png", rgba)
        frame = {
            "file_path": f"./{split}/{name}",
            "transform_matrix": (cam.c2w @ GL_TO_CV).tolist(),
        }
        if depths is not None:
            (root / "depth").mkdir(exist_ok=True)
            write_pfm(root / "depth" / f"{split}_{name}.pfm", depths[i])
            frame["depth_file_path"] = f"depth/{split}_{name}.pfm"
        if normals is not None:
            (root / "normal").mkdir(exist_ok=True)
            write_png(root / "normal" / f"{split}_{name}.png", (normals[i] + 1.0) * 0.5, bits=16)
            frame["normal_file_path"] = f"normal/{split}_{name}.png"
        frames.append(frame)
    meta = {"camera_angle_x": angle_from_focal(w, cameras[0].fx), "frames": frames}
    name = "transforms.json" if split == "train" else f"transforms_{split}.json"
    path = root / name
    path.write_text(json.dumps(meta, indent=2))
    return path


def read_camera_spec(path) -> list:
    """Cameras from a transforms-style JSON without images.

    Needs ``camera_angle_x``, ``w``, ``h`` and ``frames`` holding
    ``transform_matrix`` entries (OpenGL camera-to-world).
    """
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except OSError as e:
        raise DatasetError(f"cannot read camera spec {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"cannot parse camera spec {path}: {e}") from e
    try:
        w, h = int(meta["w"]), int(meta["h"])
        angle = float(meta["camera_angle_x"])
        frames = meta["frames"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"camera spec {path} needs w, h, camera_angle_x and frames ({e})") from e
    if w <= 0 or h <= 0 or not 0 < angle < math.pi or not frames:
        raise DatasetError(f"camera spec {path}: bad size, angle or empty frame list")
    fx = focal_from_angle(w, angle)
    cams = []
    for i, fr in enumerate(frames):
        try:
            m = np.asarray(fr["transform_matrix"], dtype=np.float64).reshape(4, 4)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"camera spec {path}: frame {i} has no usable transform_matrix") from e
        if not np.all(np.isfinite(m)):
            raise DatasetError(f"camera spec {path}: frame {i} is not finite")
        cams.append(Camera(w, h, fx, fx, w / 2.0, h / 2.0, m @ GL_TO_CV))
    return cams


__all__ = [
    "DatasetError",
    "read_camera_spec",
    "angle_from_focal",
    "focal_from_angle",
    "ingest_dataset",
    "read_pfm",
    "read_png",
    "write_dataset",
    "write_pfm",
    "write_png",
]
