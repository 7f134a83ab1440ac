"""Single-file binary checkpoints.

Layout (all little-endian)::

    b"RDGS"  u32 version  u32 n_sections
    n_sections x (16-byte zero-padded name, u64 offset, u64 length)
    section payloads

GEO, LOCAL and MLP sections are sequences of named float32 arrays, each
prefixed by a small header (name, ndim, dims). SPHMIP is the raw float32
base grid in (v, u, channel) order; its shape lives in META, a UTF-8 JSON
blob with sorted keys so identical runs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .scene import GaussianSet, GeometryPayload, LocalPayload, Role, SceneError
from .shader import ShaderMLP
from .sphmip import SphMip

MAGIC = b"RDGS"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_ENTRY = struct.Struct("<16sQQ")
_F32 = np.dtype("<f4")


class CheckpointError(SceneError):
    pass


@dataclass
class Checkpoint:
    geo: GaussianSet
    local: Optional[GaussianSet]
    sphmip: SphMip
    mlp: ShaderMLP
    iteration: int = 0
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.sphmip.channels


def _pack_arrays(arrays: list[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray()
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype=_F32)
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes()
    return bytes(out)


def _unpack_arrays(buf: bytes, section: str) -> dict:
    try:
        pos = 0
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode()
            pos += ln
            (nd,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}Q", buf, pos)
            pos += 8 * nd
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + nbytes > len(buf):
                raise CheckpointError(f"section {section}: array {name!r} is truncated")
            out[name] = np.frombuffer(buf, dtype=_F32, count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
        return out
    except struct.error as exc:
        raise CheckpointError(f"section {section}: truncated header ({exc})") from None


def _set_arrays(gset: GaussianSet) -> list:
    return list(gset.params().items())


def _set_from(role: Role, arrs: dict) -> GaussianSet:
    if role is Role.GEO:
        payload = GeometryPayload(arrs["diffuse_rgb"], arrs["raw_roughness"], arrs.get("features"))
    else:
        payload = LocalPayload(arrs["features"])
    g = GaussianSet(role, arrs["centers"], arrs["rotations"], arrs["log_scales"], arrs["raw_opacities"], payload)
    g.validate()
    return g


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    base = np.ascontiguousarray(ckpt.sphmip.base, dtype=_F32)
    meta = dict(ckpt.meta)
    meta.update(
        iteration=int(ckpt.iteration),
        config=ckpt.config,
        feature_dim=int(ckpt.feature_dim),
        sphmip_shape=list(base.shape),
        sphmip_levels=int(ckpt.sphmip.n_levels),
        has_local=ckpt.local is not None,
    )
    sections = [
        ("GEO", _pack_arrays(_set_arrays(ckpt.geo))),
        ("LOCAL", _pack_arrays(_set_arrays(ckpt.local)) if ckpt.local is not None else _pack_arrays([])),
        ("SPHMIP", base.tobytes()),
        ("MLP", _pack_arrays(sorted(ckpt.mlp.params().items()))),
        ("META", json.dumps(meta, sort_keys=True).encode()),
    ]
    offset = _HEAD.size + _ENTRY.size * len(sections)
    table = bytearray()
    for name, blob in sections:
        table += _ENTRY.pack(name.encode(), offset, len(blob))
        offset += len(blob)
    data = _HEAD.pack(MAGIC, VERSION, len(sections)) + bytes(table) + b"".join(b for _, b in sections)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def load_checkpoint(path, expect_feature_dim: Optional[int] = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, n = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint (expected {MAGIC!r}, version {VERSION})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if len(data) < _HEAD.size + n * _ENTRY.size:
        raise CheckpointError(f"{path}: truncated section table")
    sections = {}
    for i in range(n):
        raw, off, ln = _ENTRY.unpack_from(data, _HEAD.size + i * _ENTRY.size)
        name = raw.rstrip(b"\0").decode()
        if off + ln > len(data):
            raise CheckpointError(f"{path}: section {name} is truncated ({off + ln} > {len(data)} bytes)")
        sections[name] = data[off:off + ln]
    for req in ("GEO", "LOCAL", "SPHMIP", "MLP", "META"):
        if req not in sections:
            raise CheckpointError(f"{path}: missing section {req}")
    try:
        meta = json.loads(sections["META"].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable META section ({exc})") from None
    shape = tuple(meta["sphmip_shape"])
    sph_bytes = sections["SPHMIP"]
    if len(sph_bytes) != int(np.prod(shape)) * 4:
        raise CheckpointError(f"{path}: SPHMIP section holds {len(sph_bytes)} bytes, expected {int(np.prod(shape)) * 4}")
    base = np.frombuffer(sph_bytes, dtype=_F32).reshape(shape).astype(np.float32)
    fdim = int(meta["feature_dim"])
    if expect_feature_dim is not None and fdim != expect_feature_dim:
        raise CheckpointError(f"{path}: feature dimension {fdim} does not match expected {expect_feature_dim}")
    geo = _set_from(Role.GEO, _unpack_arrays(sections["GEO"], "GEO"))
    local = None
    if meta.get("has_local", True):
        local = _set_from(Role.LOCAL, _unpack_arrays(sections["LOCAL"], "LOCAL"))
        if local.feature_dim != fdim:
            raise CheckpointError(f"{path}: LOCAL features have dimension {local.feature_dim}, map has {fdim}")
    m = _unpack_arrays(sections["MLP"], "MLP")
    depth = len([k for k in m if k.startswith("w")])
    mlp = ShaderMLP([m[f"w{i}"] for i in range(depth)], [m[f"b{i}"] for i in range(depth)])
    extra = {k: v for k, v in meta.items()
             if k not in ("iteration", "config", "feature_dim", "sphmip_shape", "sphmip_levels", "has_local")}
    return Checkpoint(geo, local, SphMip(base, int(meta["sphmip_levels"])), mlp,
                      int(meta["iteration"]), meta.get("config", {}), extra)


__all__ = ["Checkpoint", "CheckpointError", "MAGIC", "VERSION", "load_checkpoint", "save_checkpoint"]
