"""PNG images and masks, FMAP tensor files, JSON manifests. All writes are atomic."""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from semstyle.errors import InvalidInputError, SemstyleError
from semstyle.tensor_core import IGNORE_ID, SegmentationMask, as_feature_map

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
DTYPE_F32 = 0


class ImageIOError(SemstyleError, OSError):
    """A file could not be read or written; message carries path and reason."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------- FMAP


def encode_tensor(x) -> bytes:
    arr = np.asarray(x, dtype="<f4")
    header = FMAP_MAGIC + struct.pack("<II", FMAP_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", DTYPE_F32)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if data[:4] != FMAP_MAGIC:
        raise ImageIOError(f"{source}: not an FMAP file (bad magic)")
    try:
        version, ndim = struct.unpack_from("<II", data, 4)
        dims = struct.unpack_from(f"<{ndim}I", data, 12)
        (dtype,) = struct.unpack_from("<B", data, 12 + 4 * ndim)
    except struct.error:
        raise ImageIOError(f"{source}: truncated FMAP header") from None
    if version != FMAP_VERSION:
        raise ImageIOError(f"{source}: unsupported FMAP version {version}")
    if dtype != DTYPE_F32:
        raise ImageIOError(f"{source}: unsupported dtype code {dtype}")
    offset = 12 + 4 * ndim + 1
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    payload = data[offset:]
    if len(payload) != expected:
        raise ImageIOError(f"{source}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def write_tensor(path, x) -> None:
    atomic_write_bytes(path, encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from exc
    return decode_tensor(data, str(path))


# --------------------------------------------------------------------------- PNG


def _open_png(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError as exc:
        raise ImageIOError(f"{path}: no such file") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"{path}: unreadable image ({exc})") from exc
    if img.format != "PNG":
        raise ImageIOError(f"{path}: expected PNG, got {img.format}")
    return img


def load_image(path) -> np.ndarray:
    """Read an 8/16-bit grey or RGB PNG as a ``(C, H, W)`` map scaled to ``[0, 1]``."""
    img = _open_png(path)
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float64)[None] / 255.0
    elif img.mode == "RGB":
        arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0
    elif img.mode in ("I;16", "I;16B", "I"):
        arr = np.asarray(img, dtype=np.float64)[None] / 65535.0
    else:
        raise ImageIOError(f"{path}: unsupported PNG mode {img.mode!r} (need 1 or 3 channels)")
    return as_feature_map(arr, name=str(path))


def encode_png_image(x) -> bytes:
    x = as_feature_map(x)
    if x.shape[0] not in (1, 3):
        raise InvalidInputError(f"PNG output needs 1 or 3 channels, got {x.shape[0]}")
    q = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(q[0], "L") if q.shape[0] == 1 else Image.fromarray(q.transpose(1, 2, 0), "RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_image(path, x) -> None:
    atomic_write_bytes(path, encode_png_image(x))


def load_mask(path) -> SegmentationMask:
    """Single-channel PNG whose pixel values are class ids; 255 marks ignored pixels."""
    img = _open_png(path)
    if img.mode in ("L", "P"):
        labels = np.asarray(img, dtype=np.int64)
    elif img.mode in ("I;16", "I;16B", "I"):
        labels = np.asarray(img, dtype=np.int64)
    else:
        raise InvalidInputError(f"{path}: mask must be single-channel, got mode {img.mode!r}")
    return SegmentationMask(labels, IGNORE_ID)


def encode_png_mask(m: SegmentationMask) -> bytes:
    if m.labels.max(initial=0) > 255:
        raise InvalidInputError("mask labels above 255 cannot be stored as 8-bit PNG")
    buf = io.BytesIO()
    Image.fromarray(m.labels.astype(np.uint8), "L").save(buf, format="PNG")
    return buf.getvalue()


def save_mask(path, m: SegmentationMask) -> None:
    atomic_write_bytes(path, encode_png_mask(m))


def save_output(path, x) -> None:
    """``.fmap`` suffix writes the raw tensor, anything else an 8-bit PNG."""
    if str(path).endswith(".fmap"):
        write_tensor(path, x)
    else:
        save_image(path, x)


def load_feature(path) -> np.ndarray:
    if str(path).endswith(".fmap"):
        return as_feature_map(read_tensor(path), name=str(path))
    return load_image(path)


# --------------------------------------------------------------------------- JSON


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode())


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON ({exc})") from exc
