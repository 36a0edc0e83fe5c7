"""On-disk formats: headered float32 blobs, PNG observations and episode directories.

Episode directory layout::

    observation.png   RGB, 8-bit
    depth.f32         uint32 width, uint32 height, then H*W float32 (row-major, LE)
    trace.f32         uint32 K, uint32 L+1, then K*(L+1)*3 float32 (LE)
    meta.json         grid, camera, instructions, source_id, RLE validity mask
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraModel, GridSpec, ScreenTrace, TraceSample
from .errors import FormatError

_LE_U32 = np.dtype("<u4")
_LE_F32 = np.dtype("<f4")


def write_f32(path, header, values) -> None:
    header = np.asarray(header, dtype=_LE_U32)
    values = np.ascontiguousarray(values, dtype=_LE_F32)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(values.tobytes())


def read_f32(path, n_header: int):
    raw = Path(path).read_bytes()
    if len(raw) < 4 * n_header:
        raise FormatError(f"{path}: truncated header")
    header = np.frombuffer(raw[: 4 * n_header], dtype=_LE_U32).astype(np.int64)
    if (len(raw) - 4 * n_header) % 4:
        raise FormatError(f"{path}: payload is not a whole number of float32 values")
    body = np.frombuffer(raw[4 * n_header:], dtype=_LE_F32)
    return header, body.astype(np.float64)


def write_depth(path, depth) -> None:
    depth = np.asarray(depth)
    h, w = depth.shape
    write_f32(path, [w, h], depth)


def read_depth(path) -> np.ndarray:
    (w, h), body = read_f32(path, 2)
    if body.size != w * h:
        raise FormatError(f"{path}: expected {w * h} depth values, found {body.size}")
    return body.reshape(h, w).astype(np.float32)


def write_trace_f32(path, points) -> None:
    points = np.asarray(points)
    K, T, _ = points.shape
    write_f32(path, [K, T], points)


def read_trace_f32(path) -> np.ndarray:
    (K, T), body = read_f32(path, 2)
    if body.size != K * T * 3:
        raise FormatError(f"{path}: expected {K * T * 3} trace values, found {body.size}")
    return body.reshape(K, T, 3)


def write_png(path, rgb) -> None:
    # Fixed PNG settings keep the bytes reproducible.
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG", optimize=False,
                                                                     compress_level=6)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def rle_encode(mask) -> dict:
    """Run-length encode a boolean array (row-major). Runs alternate starting at ``start``."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel()
    if flat.size == 0:
        return {"shape": list(mask.shape), "start": True, "runs": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    return {"shape": list(mask.shape), "start": bool(flat[0]), "runs": np.diff(bounds).tolist()}


def rle_decode(enc: dict) -> np.ndarray:
    shape = tuple(enc["shape"])
    value = bool(enc["start"])
    out = np.empty(int(np.prod(shape)), dtype=bool)
    pos = 0
    for run in enc["runs"]:
        out[pos:pos + run] = value
        pos += run
        value = not value
    if pos != out.size:
        raise FormatError("RLE runs do not cover the mask")
    return out.reshape(shape)


def dump_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    with open(path) as f:
        return json.load(f)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(root) -> str:
    """Hash of every file under ``root`` (relative paths + contents, sorted)."""
    root = Path(root)
    h = hashlib.sha256()
    if root.is_file():
        h.update(file_sha256(root).encode())
        return h.hexdigest()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(file_sha256(p).encode())
    return h.hexdigest()


def write_sample(directory, sample: TraceSample) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_png(d / "observation.png", sample.rgb)
    write_depth(d / "depth.f32", sample.depth)
    write_trace_f32(d / "trace.f32", sample.trace.points)
    meta = {
        "grid": sample.trace.grid.to_dict(),
        "camera": sample.trace.camera.to_dict() if sample.trace.camera is not None else None,
        "instructions": list(sample.instructions),
        "source_id": sample.source_id,
        "has_depth": sample.trace.has_depth,
        "mask": rle_encode(sample.trace.mask),
    }
    dump_json(d / "meta.json", meta)
    return d


def read_sample(directory) -> TraceSample:
    d = Path(directory)
    try:
        meta = load_json(d / "meta.json")
        rgb = read_png(d / "observation.png")
        depth = read_depth(d / "depth.f32")
        points = read_trace_f32(d / "trace.f32")
    except FileNotFoundError as e:
        raise FormatError(f"{d}: incomplete episode directory ({e.filename} missing)") from e
    camera = CameraModel.from_dict(meta["camera"]) if meta.get("camera") else None
    trace = ScreenTrace(points, GridSpec.from_dict(meta["grid"]), rle_decode(meta["mask"]),
                        bool(meta.get("has_depth", True)), camera)
    return TraceSample(rgb, depth, trace, tuple(meta["instructions"]), meta.get("source_id", ""))


def list_episode_dirs(root, marker: str = "meta.json") -> list:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / marker).exists())


def load_dataset(root) -> list:
    return [read_sample(p) for p in list_episode_dirs(root)]


def atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
