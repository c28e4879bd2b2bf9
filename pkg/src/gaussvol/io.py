"""Image codecs (PNG, PFM), atomic file writes and JSON report helpers."""

from __future__ import annotations

import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .scene import ValidationError


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


@contextmanager
def atomic_write(path, mode: str = "wb"):
    """Write to a temp file in the target directory, then rename over ``path``.

    Nothing is left behind if the body raises.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_text(path, text: str) -> None:
    with atomic_write(path, "w") as fh:
        fh.write(text)


def write_json(path, data) -> None:
    write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def to_uint8(image) -> np.ndarray:
    """Clamp to [0, 1] and quantise to 8 bits, rounding half up."""
    a = np.asarray(image, dtype=np.float64)
    return np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, image) -> None:
    a = to_uint8(image)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 3 and a.shape[2] not in (3, 4):
        raise ValidationError(f"PNG needs 1, 3 or 4 channels, got {a.shape[2]}")
    with atomic_write(path) as fh:
        PILImage.fromarray(a).save(fh, format="PNG")


def read_png(path) -> np.ndarray:
    """Float image in [0, 1]; grayscale comes back as (H, W, 1)."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        a = np.asarray(im, dtype=np.float64) / 255.0
    return a[..., None] if a.ndim == 2 else a


def write_pfm(path, image) -> None:
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    a = np.asarray(image, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValidationError(f"PFM needs 1 or 3 channels, got shape {a.shape}")
    h, w = a.shape[:2]
    with atomic_write(path) as fh:
        fh.write(tag + b"\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValidationError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        scale = float(fh.readline())
        w, h = int(dims[0]), int(dims[1])
        dtype = "<f4" if scale < 0 else ">f4"
        c = 3 if tag == b"PF" else 1
        data = np.frombuffer(fh.read(w * h * c * 4), dtype=dtype)
    if data.size != w * h * c:
        raise ValidationError(f"{path}: truncated PFM data")
    a = data.reshape(h, w, c)[::-1].astype(np.float64)
    return a if c == 3 else a[..., 0]


def read_report(path) -> dict:
    """Load a JSON report written by the CLI (fit, bench or gradcheck)."""
    data = read_json(path)
    if not isinstance(data, dict) or "kind" not in data:
        raise ValidationError(f"{path}: not a report (missing 'kind')")
    return data
