"""On-disk formats: 16-bit PGM mosaics with JSON sidecars, PNG, linear .npy."""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidMetadataError
from .isp import RawImage, RawMetadata

_PGM_HEADER = re.compile(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_raw(path, raw: RawImage) -> Path:
    """Write ``raw`` as a big-endian 16-bit PGM plus ``<stem>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    maxval = max(int(raw.meta.white_level), 256)
    header = f"P5\n{raw.width} {raw.height}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raw.pixels.astype(">u2").tobytes())
    sidecar_path(path).write_text(json.dumps(raw.meta.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_raw(path) -> RawImage:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise InvalidMetadataError(f"missing sidecar {side}")
    try:
        meta_dict = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidMetadataError(f"sidecar {side} is not valid JSON: {exc}") from exc
    if not isinstance(meta_dict, dict):
        raise InvalidMetadataError(f"sidecar {side} must hold an object")
    meta = RawMetadata.from_dict(meta_dict)
    data = path.read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise InvalidMetadataError(f"{path} is not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval < 256:
        raise InvalidMetadataError(f"{path} is an 8-bit PGM; 16-bit expected")
    payload = np.frombuffer(data, dtype=">u2", count=w * h, offset=m.end())
    return RawImage(payload.reshape(h, w).astype(np.uint16), meta)


def write_png(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed settings keep the file bytes reproducible
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG", optimize=False,
                                                          compress_level=6)
    return path


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_linear(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(img, dtype=np.float32), allow_pickle=False)
    return path


def read_linear(path) -> np.ndarray:
    return np.load(path, allow_pickle=False).astype(np.float64)
