"""File formats: 8-bit sRGB previews and planar float32 channel files.

A float channel ``name.f32`` holds little-endian IEEE-754 float32 values in
planar (channel-major) order. Its sidecar ``name.txt`` is a small text header::

    width 32
    height 32
    channels 3
    name image
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .core import srgb_decode, srgb_encode


def save_preview(path, img):
    """Write a linear image (H, W, 3) or map (H, W) as an 8-bit sRGB PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = np.where(np.isfinite(img), img, 0.0)
    data = np.round(srgb_encode(img) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_preview(path):
    """Read an 8-bit image file into linear RGB floats."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(data)


def _sidecar(path):
    return Path(path).with_suffix(".txt")


def save_channel(path, data, name=None):
    path = Path(path)
    data = np.asarray(data)
    if data.ndim == 2:
        planar = data[None]
    else:
        planar = np.moveaxis(data, -1, 0)
    c, h, w = planar.shape
    path.write_bytes(np.ascontiguousarray(planar, dtype="<f4").tobytes())
    name = name or path.stem
    _sidecar(path).write_text(f"width {w}\nheight {h}\nchannels {c}\nname {name}\n", encoding="utf-8")


def read_channel_header(path):
    header = {}
    for line in _sidecar(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition(" ")
            header[key] = value.strip()
    for key in ("width", "height", "channels"):
        header[key] = int(header[key])
    return header


def load_channel(path):
    """Inverse of :func:`save_channel`; returns (H, W) for one channel, else (H, W, C)."""
    hdr = read_channel_header(path)
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    expected = hdr["width"] * hdr["height"] * hdr["channels"]
    if raw.size != expected:
        raise ValueError(f"{path}: expected {expected} floats, found {raw.size}")
    planar = raw.reshape(hdr["channels"], hdr["height"], hdr["width"]).astype(np.float64)
    if hdr["channels"] == 1:
        return planar[0]
    return np.moveaxis(planar, 0, -1)


def mask_bytes(mask):
    return np.ascontiguousarray(mask, dtype="<f4").tobytes()


def mask_hash(mask):
    """Lowercase hex SHA-256 of the raw little-endian float32 mask bytes."""
    return hashlib.sha256(mask_bytes(mask)).hexdigest()


def load_image_any(path):
    """Load a color image from a PNG/JPEG preview or a float channel file."""
    path = Path(path)
    if path.suffix == ".f32":
        img = load_channel(path)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        return img
    return load_preview(path)


def load_mask_any(path):
    """Load a mask; 8-bit images are thresholded at half intensity."""
    path = Path(path)
    if path.suffix == ".f32":
        m = load_channel(path)
        if m.ndim == 3:
            m = m[..., 0]
        return np.clip(m, 0.0, 1.0)
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return (data >= 0.5).astype(np.float64)
