"""Per-channel PSNR scoring and report tables for coating methods."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field

import numpy as np

from .baselines import DEFAULT_BLEND_IF_THRESHOLDS, blend_if
from .baselines import METHODS as BASELINE_METHODS
from .core import Rng
from .dataset import load_group
from .render import ChannelStack, render_coated
from .toyflow import build_conditioning, sample, to_planes

REPORT_CHANNELS = ("Image", "Depth", "Normals", "Albedo", "Shading", "Residual")
_STACK_FIELD = {"Image": "image", "Depth": "depth", "Normals": "normals", "Albedo": "albedo",
                "Shading": "shading", "Residual": "residual"}
PSNR_CAP = 99.0


def psnr(a, b, peak=1.0, cap=PSNR_CAP, valid=None):
    """PSNR in dB, capped at ``cap``; ``valid`` optionally restricts the pixels compared."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    diff = a - b
    if valid is not None:
        diff = diff[np.asarray(valid, dtype=bool)]
    if diff.size == 0:
        return cap
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(peak * peak / mse))


def depth_psnr(pred, gt, cap=PSNR_CAP):
    """Depth PSNR over ground-truth foreground, both maps divided by the GT finite max."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    fg = np.isfinite(gt)
    if not fg.any():
        return cap
    scale = gt[fg].max() or 1.0
    g = np.where(fg, gt / scale, 0.0)
    # a prediction that misses the surface counts as the largest error
    p = np.where(np.isfinite(pred), pred / scale, g + 1.0)
    return psnr(p, g, 1.0, cap, valid=fg)


def channel_psnr(channel, pred, gt, cap=PSNR_CAP):
    if channel == "Depth":
        return depth_psnr(pred, gt, cap)
    if channel == "Normals":
        return psnr(pred, gt, 2.0, cap)
    return psnr(pred, gt, 1.0, cap)


def evaluate_sample(prediction, ground_truth):
    """Scores for every channel a prediction provides; RGB-only predictions get Image only."""
    if isinstance(prediction, ChannelStack):
        if prediction.shape != ground_truth.shape:
            raise ValueError("prediction and ground truth dimensions differ")
        return {c: channel_psnr(c, getattr(prediction, _STACK_FIELD[c]), getattr(ground_truth, _STACK_FIELD[c]))
                for c in REPORT_CHANNELS}
    prediction = np.asarray(prediction)
    if prediction.shape != ground_truth.image.shape:
        raise ValueError("prediction and ground truth dimensions differ")
    return {"Image": channel_psnr("Image", prediction, ground_truth.image)}


@dataclass
class MethodResult:
    method: str
    scores: list = field(default_factory=list)

    def add(self, sample_scores):
        self.scores.append(dict(sample_scores))

    def means(self):
        out = {}
        for c in REPORT_CHANNELS:
            vals = [s[c] for s in self.scores if c in s]
            if vals:
                out[c] = float(np.mean(vals))
        return out


@dataclass
class Report:
    rows: list  # (method, {channel: mean})

    def to_csv(self):
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [c.lower() for c in REPORT_CHANNELS])
        for name, means in self.rows:
            w.writerow([name] + [f"{means[c]:.2f}" if c in means else "" for c in REPORT_CHANNELS])
        return buf.getvalue()

    def to_text(self):
        width = max([len("Method")] + [len(n) for n, _ in self.rows])
        lines = ["Method".ljust(width) + "".join(c.rjust(10) for c in REPORT_CHANNELS)]
        for name, means in self.rows:
            cells = "".join((f"{means[c]:.2f}" if c in means else "-").rjust(10) for c in REPORT_CHANNELS)
            lines.append(name.ljust(width) + cells)
        return "\n".join(lines) + "\n"


def aggregate_report(results):
    """Mean score per method and channel, rows sorted by ascending Image score (best last)."""
    if not results:
        raise ValueError("no results to aggregate")
    rows = [(r.method, r.means()) for r in results]
    rows.sort(key=lambda row: row[1].get("Image", -np.inf))
    return Report(rows)


# ---------------------------------------------------------------- benchmark

METHOD_NAMES = ("oracle", "blend_if", "color_blend", "identity", "toy")


def benchmark_samples(manifest):
    """Yield (group, variant index) over every coated variant: the add-task benchmark."""
    for record in manifest.groups:
        group = load_group(manifest, record)
        for i in range(len(group.variants)):
            yield group, i


def run_benchmark(manifest, methods, model=None, thresholds=None, sample_steps=20, seed=0):
    """Score each method on every (original -> coated variant) pair of the manifest."""
    unknown = [m for m in methods if m not in METHOD_NAMES]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; valid: {', '.join(METHOD_NAMES)}")
    if "toy" in methods and model is None:
        raise ValueError("the toy method needs a checkpoint")
    results = {m: MethodResult(m) for m in methods}
    thresholds = thresholds or DEFAULT_BLEND_IF_THRESHOLDS
    for n, (group, i) in enumerate(benchmark_samples(manifest)):
        var = group.variants[i]
        gt = var.render
        base = group.original.image
        for m in methods:
            if m == "oracle":
                # re-render with the recorded coat parameters
                pred = render_coated(group.scene, var.coating)
            elif m == "blend_if":
                pred = blend_if(base, var.projected_albedo, group.mask, thresholds)
            elif m == "toy":
                cond = build_conditioning(to_planes(base), to_planes(var.projected_albedo), group.mask, model.patch)
                task = "add_uniform" if var.coating.is_uniform else "add_textured"
                pred = sample(model, cond, var.coating.traits, sample_steps, Rng(seed, stream=n + 1), task=task)
            else:
                pred = BASELINE_METHODS[m](base, var.projected_albedo, group.mask)
            results[m].add(evaluate_sample(pred, gt))
    return [results[m] for m in methods]

