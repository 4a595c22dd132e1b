"""Shared domain types, color helpers and seeded randomness.

Images are plain numpy arrays: a ColorImage is ``(H, W, 3)`` linear RGB and
a ScalarMap is ``(H, W)``. The helpers below validate them where a module
boundary needs it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

LUMA_WEIGHTS = np.array([0.30, 0.59, 0.11])

TRAIT_NAMES = ("roughness", "metalness", "transmission", "thickness")


class InvalidThresholdError(ValueError):
    pass


def check_color_image(img, name="image"):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img


def check_scalar_map(m, name="map", unit=False):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must have shape (H, W), got {m.shape}")
    if unit and (np.any(m < 0) or np.any(m > 1)):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return m


def luminance(c):
    """Photoshop/NTSC weighted luminance of an RGB triple or an ``(..., 3)`` array."""
    c = np.asarray(c, dtype=np.float64)
    # explicit sum keeps the result independent of array layout
    return 0.30 * c[..., 0] + 0.59 * c[..., 1] + 0.11 * c[..., 2]


def smoothstep(a, b, x):
    if not a < b:
        raise InvalidThresholdError(f"smoothstep requires a < b, got a={a}, b={b}")
    t = np.clip((np.asarray(x, dtype=np.float64) - a) / (b - a), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def srgb_encode(linear):
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode(encoded):
    x = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def normalize(v, eps=1e-12):
    v = np.asarray(v, dtype=np.float64)
    n = np.sqrt(v[..., 0] ** 2 + v[..., 1] ** 2 + v[..., 2] ** 2)
    return v / np.maximum(n, eps)[..., None]


def dot3(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


@dataclass(frozen=True)
class TraitVector:
    roughness: float = 0.5
    metalness: float = 0.0
    transmission: float = 0.0
    thickness: float = 0.0

    def __post_init__(self):
        for name in TRAIT_NAMES:
            v = getattr(self, name)
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def as_dict(self):
        return {name: float(getattr(self, name)) for name in TRAIT_NAMES}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in TRAIT_NAMES})


Albedo = Union[tuple, np.ndarray]


@dataclass(frozen=True, eq=False)
class CoatingSpec:
    """A coat: traits, an albedo (uniform RGB tuple or ``(h, w, 3)`` texture) and a mask.

    ``texture_name`` records which pool entry a texture came from so that
    the coat can be serialized without the pixels.
    """

    traits: TraitVector
    albedo: Albedo
    mask: np.ndarray
    texture_name: str = None

    def __post_init__(self):
        if self.is_uniform:
            rgb = tuple(float(c) for c in self.albedo)
            if len(rgb) != 3 or any(not 0.0 <= c <= 1.0 for c in rgb):
                raise ValueError(f"uniform albedo must be 3 values in [0, 1], got {self.albedo}")
            object.__setattr__(self, "albedo", rgb)
        else:
            tex = check_color_image(self.albedo, "albedo texture")
            if tex.min() < 0 or tex.max() > 1:
                raise ValueError("albedo texture values must lie in [0, 1]")
        check_scalar_map(self.mask, "coat mask", unit=True)

    @property
    def is_uniform(self):
        return not (isinstance(self.albedo, np.ndarray) and self.albedo.ndim == 3)

    def albedo_record(self):
        if self.is_uniform:
            return {"kind": "uniform", "rgb": list(self.albedo)}
        return {"kind": "texture", "name": self.texture_name}


class Rng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Backed by Philox, so draws are identical across platforms, and distinct
    streams never overlap.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        key = np.random.SeedSequence(self.seed, spawn_key=(int(stream),)).generate_state(2, np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream):
        """A new independent stream derived from this generator's seed."""
        return Rng(self.seed, stream=(int(self.stream) << 20) + int(stream) + 1)

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def choice(self, n, p=None, size=None):
        return self._gen.choice(n, size=size, p=p)

    def bernoulli(self, p=0.5):
        return bool(self._gen.random() < p)


def _lattice_hash(ix, iy, iz, seed):
    h = (ix.astype(np.uint32) * np.uint32(73856093)) ^ (iy.astype(np.uint32) * np.uint32(19349663))
    h ^= iz.astype(np.uint32) * np.uint32(83492791)
    h ^= np.uint32(seed & 0xFFFFFFFF)
    # xorshift-multiply finalizer
    h ^= h >> np.uint32(16)
    h *= np.uint32(0x7FEB352D)
    h ^= h >> np.uint32(15)
    h *= np.uint32(0x846CA68B)
    h ^= h >> np.uint32(16)
    return h.astype(np.float64) / 4294967296.0


def value_noise3(p, seed=0):
    """Trilinear value noise in [0, 1) at points ``p`` of shape ``(..., 3)``."""
    p = np.asarray(p, dtype=np.float64)
    base = np.floor(p)
    f = p - base
    i = base.astype(np.int64)
    u = f * f * (3.0 - 2.0 * f)
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        wx = u[..., 0] if dx else 1.0 - u[..., 0]
        for dy in (0, 1):
            wy = u[..., 1] if dy else 1.0 - u[..., 1]
            for dz in (0, 1):
                wz = u[..., 2] if dz else 1.0 - u[..., 2]
                out += wx * wy * wz * _lattice_hash(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed)
    return out
