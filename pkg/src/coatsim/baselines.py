"""Classical Photoshop-style coating operators: "Blend If" and the Color blend mode."""

from __future__ import annotations

import numpy as np

from .core import InvalidThresholdError, check_color_image, check_scalar_map, luminance, smoothstep

DEFAULT_BLEND_IF_THRESHOLDS = (0.0, 0.25, 0.75, 1.0)


def _check_inputs(base, coat_layer, mask):
    base = check_color_image(np.asarray(base, dtype=np.float64), "base")
    coat_layer = check_color_image(np.asarray(coat_layer, dtype=np.float64), "coat_layer")
    mask = check_scalar_map(np.asarray(mask, dtype=np.float64), "mask")
    if coat_layer.shape != base.shape or mask.shape != base.shape[:2]:
        raise ValueError("base, coat_layer and mask must share dimensions")
    return base, coat_layer, mask


def check_thresholds(thresholds):
    lo0, lo1, hi0, hi1 = (float(x) for x in thresholds)
    if not (0.0 <= lo0 < lo1 <= hi0 < hi1 <= 1.0):
        raise InvalidThresholdError(
            f"Blend If thresholds need 0 <= lo0 < lo1 <= hi0 < hi1 <= 1, got {tuple(thresholds)}")
    return lo0, lo1, hi0, hi1


def blend_if_weight(lum, thresholds=DEFAULT_BLEND_IF_THRESHOLDS):
    lo0, lo1, hi0, hi1 = check_thresholds(thresholds)
    return smoothstep(lo0, lo1, lum) * (1.0 - smoothstep(hi0, hi1, lum))


def blend_if(base, coat_layer, mask, thresholds=DEFAULT_BLEND_IF_THRESHOLDS):
    """Blend the coat layer in proportion to a mid-tone window on the base luminance.

    The weight ramps up between ``lo0`` and ``lo1`` and back down between
    ``hi0`` and ``hi1``, so deep shadows and highlights keep the base color.
    """
    base, coat_layer, mask = _check_inputs(base, coat_layer, mask)
    w = blend_if_weight(luminance(base), thresholds) * mask
    out = base + w[..., None] * (coat_layer - base)
    # exact passthrough where the coat contributes nothing
    return np.where((w > 0)[..., None], out, base)


def set_lum(c, lum):
    return c + (lum - luminance(c))[..., None]


def clip_color(c):
    lum = luminance(c)[..., None]
    n = c.min(axis=-1, keepdims=True)
    x = c.max(axis=-1, keepdims=True)
    d_low = lum - n
    d_high = x - lum
    low = np.where((n < 0) & (d_low > 0), lum + (c - lum) * lum / np.where(d_low > 0, d_low, 1.0), c)
    return np.where((x > 1) & (d_high > 0), lum + (low - lum) * (1 - lum) / np.where(d_high > 0, d_high, 1.0), low)


def color_blend(base, coat_layer, mask):
    """Non-separable Color mode: coat hue and saturation at the base luminance."""
    base, coat_layer, mask = _check_inputs(base, coat_layer, mask)
    out = clip_color(set_lum(coat_layer, luminance(base)))
    return np.where((mask > 0)[..., None], out, base)


def identity(base, coat_layer, mask):
    """Reference method that leaves the input untouched."""
    base, _, _ = _check_inputs(base, coat_layer, mask)
    return base.copy()


METHODS = {"blend_if": blend_if, "color_blend": color_blend, "identity": identity}
