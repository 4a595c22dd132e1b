"""Synthetic coating dataset: scene sampling, coated variant groups, manifests
and add/replace/remove training samples."""

from __future__ import annotations

import functools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io as cio
from .core import CoatingSpec, Rng, TraitVector
from .render import (BaseMaterial, Camera, ChannelStack, Floor, Light, ProceduralTexture, SceneObject, SceneSpec,
                     generate_mask, project_albedo, render_coated, render_uncoated)

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "coatsim-manifest/1"
TASKS = ("add_textured", "add_uniform", "replace", "remove")
TASK_MIXTURE = (("add", 0.34), ("replace", 0.33), ("remove", 0.33))


class ConfigError(ValueError):
    pass


class InsufficientVariantsError(ValueError):
    pass


@dataclass
class DatasetConfig:
    groups: int = 24
    variants: int = 8
    resolution: int = 128
    objects: list = field(default_factory=lambda: ["sphere", "cube", "icosphere", "octahedron", "slab", "pebble"])
    viewpoints: int = 4
    mask_coverage: tuple = (0.4, 0.9)
    light_intensity: tuple = (0.45, 0.75)
    ambient: tuple = (0.12, 0.22)
    detail_amplitude: tuple = (0.15, 0.45)
    uniform_albedo_probability: float = 0.5
    threads: int = None

    def __post_init__(self):
        self.mask_coverage = tuple(self.mask_coverage)
        self.light_intensity = tuple(self.light_intensity)
        self.ambient = tuple(self.ambient)
        self.detail_amplitude = tuple(self.detail_amplitude)
        if self.groups < 1 or self.variants < 1:
            raise ConfigError("groups and variants must be >= 1")
        if self.resolution < 1:
            raise ConfigError("resolution must be >= 1")
        if not self.objects:
            raise ConfigError("object catalog is empty")
        unknown = [o for o in self.objects if o not in OBJECT_CATALOG]
        if unknown:
            raise ConfigError(f"unknown objects {unknown}; known: {sorted(OBJECT_CATALOG)}")
        if not 1 <= self.viewpoints <= len(VIEWPOINTS):
            raise ConfigError(f"viewpoints must lie in [1, {len(VIEWPOINTS)}]")

    def to_dict(self):
        d = asdict(self)
        d.pop("threads")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown dataset config fields: {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------- assets

# object name -> (kind, radius or half extents, mesh, vertical center)
OBJECT_CATALOG = {
    "sphere": ("sphere", 1.0, None, 1.0),
    "pebble": ("sphere", 0.7, None, 0.7),
    "cube": ("box", (0.75, 0.75, 0.75), None, 0.75),
    "slab": ("box", (1.1, 0.4, 0.8), None, 0.4),
    "icosphere": ("mesh", 0.95, "icosphere:1", 0.95),
    "octahedron": ("mesh", 1.0, "octahedron", 1.0),
}

# azimuth (deg), elevation (deg), distance
VIEWPOINTS = ((20.0, 18.0, 4.4), (110.0, 26.0, 4.2), (200.0, 14.0, 4.6), (290.0, 32.0, 4.0),
              (65.0, 40.0, 4.2), (245.0, 22.0, 4.5))

FLOOR_MATERIALS = (
    BaseMaterial(ProceduralTexture("checker", (0.55, 0.55, 0.55), (0.38, 0.38, 0.38), 1.0), 0.9),
    BaseMaterial(ProceduralTexture("grain", (0.55, 0.38, 0.22), (0.45, 0.3, 0.17), 1.5), 0.7),
    BaseMaterial((0.6, 0.6, 0.58), 0.95),
    BaseMaterial(ProceduralTexture("stripes", (0.5, 0.47, 0.42), (0.42, 0.4, 0.36), 2.0), 0.8),
    BaseMaterial((0.3, 0.33, 0.38), 0.6),
)

_SUBSTRATE_PATTERNS = ("checker", "stripes", "grain")


def _sample_substrate(rng):
    c1 = tuple(rng.uniform(0.15, 0.85, 3))
    if rng.bernoulli(0.6):
        c2 = tuple(np.clip(np.asarray(c1) * rng.uniform(0.4, 0.8), 0, 1))
        kind = _SUBSTRATE_PATTERNS[int(rng.integers(0, len(_SUBSTRATE_PATTERNS)))]
        albedo = ProceduralTexture(kind, c1, c2, float(rng.uniform(2.0, 5.0)))
    else:
        albedo = c1
    return BaseMaterial(albedo, float(rng.uniform(0.3, 0.9)), 0.0)


def scene_ids(config):
    """Deterministic (scene_id, object index, viewpoint index) list for a config."""
    combos = [(o, v) for o in range(len(config.objects)) for v in range(config.viewpoints)]
    out = []
    for i in range(config.groups):
        o, v = combos[i % len(combos)]
        rep = i // len(combos)
        sid = f"s{i:04d}_{config.objects[o]}_v{v}" + (f"_r{rep}" if rep else "")
        out.append((sid, o, v))
    return out


def sample_scene(rng, assets, config, object_index=None, viewpoint_index=None):
    """Draw a scene: object, substrate, floor, ambient, two point lights and a viewpoint.

    ``assets`` is the list of object names to choose from.
    """
    if not assets:
        raise ConfigError("asset catalog is empty")
    oi = int(rng.integers(0, len(assets))) if object_index is None else object_index
    vi = int(rng.integers(0, config.viewpoints)) if viewpoint_index is None else viewpoint_index
    kind, size, mesh, cy = OBJECT_CATALOG[assets[oi]]
    material = _sample_substrate(rng)
    obj = SceneObject(kind, center=(0.0, cy, 0.0),
                      radius=size if kind != "box" else 1.0,
                      half_extents=size if kind == "box" else (0.5, 0.5, 0.5),
                      mesh=mesh, material=material)
    floor = Floor(0.0, FLOOR_MATERIALS[int(rng.integers(0, len(FLOOR_MATERIALS)))])
    ambient = (float(rng.uniform(*config.ambient)),) * 3
    lights = []
    for _ in range(2):
        az = rng.uniform(0.0, 2 * np.pi)
        el = rng.uniform(np.radians(25.0), np.radians(75.0))
        r = rng.uniform(4.0, 6.0)
        pos = (r * np.cos(el) * np.cos(az), r * np.sin(el), r * np.cos(el) * np.sin(az))
        strength = rng.uniform(*config.light_intensity)
        tint = rng.uniform(0.9, 1.1, 3)
        lights.append(Light(tuple(float(x) for x in strength * tint / tint.mean()), position=pos))
    az, el, dist = VIEWPOINTS[vi]
    a, e = np.radians(az), np.radians(el)
    target = (0.0, cy * 0.9, 0.0)
    cam_pos = (dist * np.cos(e) * np.sin(a), target[1] + dist * np.sin(e), dist * np.cos(e) * np.cos(a))
    camera = Camera(cam_pos, target, 40.0, config.resolution, config.resolution)
    return SceneSpec(object=obj, camera=camera, lights=tuple(lights), floor=floor, ambient=ambient,
                     detail_amplitude=float(rng.uniform(*config.detail_amplitude)),
                     detail_frequency=8.0, detail_seed=int(rng.integers(0, 2 ** 31)))


def _texture(kind, size, c1, c2, freq):
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    if kind == "checker":
        sel = (np.floor(xx * freq) + np.floor(yy * freq)) % 2 == 0
    elif kind == "stripes":
        sel = np.floor((xx + yy) * freq) % 2 == 0
    elif kind == "dots":
        fx, fy = (xx * freq) % 1 - 0.5, (yy * freq) % 1 - 0.5
        sel = fx ** 2 + fy ** 2 < 0.09
    elif kind == "grid":
        sel = ((xx * freq) % 1 < 0.2) | ((yy * freq) % 1 < 0.2)
    elif kind == "chevron":
        sel = np.floor(yy * freq + np.abs((xx * freq) % 1 - 0.5)) % 2 == 0
    elif kind == "gradient":
        t = xx[..., None]
        return (1 - t) * np.asarray(c1) + t * np.asarray(c2)
    else:
        raise ValueError(kind)
    return np.where(sel[..., None], np.asarray(c1), np.asarray(c2))


@functools.lru_cache(maxsize=4)
def albedo_pool(size=64, seed=1234):
    """Named coat textures; everything except the gradients is a repeating pattern."""
    rng = Rng(seed)
    kinds = ("checker", "stripes", "dots", "grid", "chevron", "gradient")
    pool = []
    for i in range(24):
        kind = kinds[i % len(kinds)]
        c1 = rng.uniform(0.0, 1.0, 3)
        c2 = rng.uniform(0.0, 1.0, 3)
        freq = float(rng.integers(2, 9))
        tex = np.clip(_texture(kind, size, c1, c2, freq), 0.0, 1.0)
        tex.setflags(write=False)
        pool.append((f"{kind}_{i:02d}", tex))
    return tuple(pool)


PATTERNED_KINDS = ("checker", "stripes", "dots", "grid", "chevron")


def pool_texture(name):
    for n, tex in albedo_pool():
        if n == name:
            return tex
    raise KeyError(f"no texture named {name!r} in the albedo pool")


def sample_coating(rng, albedo_pool, mask, uniform_probability=0.5):
    """Random coat: continuous roughness/thickness, binary metalness/transmission."""
    if not np.any(np.asarray(mask) > 0):
        raise ValueError("coat mask is empty")
    if not albedo_pool:
        raise ConfigError("albedo pool is empty")
    traits = TraitVector(roughness=float(rng.random()), metalness=float(rng.bernoulli(0.5)),
                         transmission=float(rng.bernoulli(0.5)), thickness=float(rng.random()))
    if rng.bernoulli(uniform_probability):
        return CoatingSpec(traits, tuple(float(x) for x in rng.uniform(0.0, 1.0, 3)), mask)
    name, tex = albedo_pool[int(rng.integers(0, len(albedo_pool)))]
    return CoatingSpec(traits, tex, mask, texture_name=name)


# ---------------------------------------------------------------- groups


@dataclass(eq=False)
class Variant:
    coating: CoatingSpec
    render: ChannelStack
    projected_albedo: np.ndarray


@dataclass(eq=False)
class SceneGroup:
    scene_id: str
    scene: SceneSpec
    mask: np.ndarray
    original: ChannelStack
    variants: list
    seed: int = 0


def build_scene_group(scene, rng, k, coverage=None, scene_id="scene", threads=None, pool=None,
                      uniform_probability=0.5):
    """Render the uncoated scene, one shared mask, and ``k`` coated variants."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = albedo_pool() if pool is None else pool
    original = render_uncoated(scene, threads=threads)
    coverage = float(rng.uniform(0.4, 0.9)) if coverage is None else coverage
    mask = generate_mask(original, rng.child(1), coverage)
    variants = []
    for i in range(k):
        coat = sample_coating(rng.child(100 + i), pool, mask, uniform_probability)
        stack = render_coated(scene, coat, threads=threads)
        variants.append(Variant(coat, stack, project_albedo(coat, stack)))
    return SceneGroup(scene_id, scene, mask, original, variants, rng.seed)


def _group_job(config, master_seed, entry, threads):
    sid, oi, vi = entry
    index = int(sid[1:5])
    rng = Rng(master_seed, stream=index + 1)
    scene = sample_scene(rng.child(0), config.objects, config, oi, vi)
    coverage = float(rng.child(2).uniform(*config.mask_coverage))
    return build_scene_group(scene, rng.child(3), config.variants, coverage, sid, threads=threads,
                             uniform_probability=config.uniform_albedo_probability)


def generate_dataset(config, master_seed, threads=None):
    """All scene groups for ``config``, in scene_id order."""
    entries = scene_ids(config)
    threads = threads if threads is not None else config.threads
    n = max(1, min(len(entries), threads or 1))
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as ex:
            groups = list(ex.map(lambda e: _group_job(config, master_seed, e, 1), entries))
    else:
        groups = [_group_job(config, master_seed, e, 1) for e in entries]
    return groups


# ---------------------------------------------------------------- training samples


@dataclass(eq=False)
class TrainingSample:
    task: str
    input_image: np.ndarray
    target_image: np.ndarray
    mask: np.ndarray
    projected_albedo: np.ndarray
    traits: TraitVector = None
    scene_id: str = ""


def sample_task_mixture(rng, n):
    names = [t for t, _ in TASK_MIXTURE]
    p = [w for _, w in TASK_MIXTURE]
    return [names[i] for i in rng.choice(len(names), p=p, size=n)]


def build_training_sample(group, task, rng):
    variants = group.variants
    if task == "replace":
        if len(variants) < 2:
            raise InsufficientVariantsError("replace needs at least two variants")
        i, j = _two_distinct(rng, len(variants))
        src, dst = variants[i], variants[j]
        return TrainingSample("replace", src.render.image, dst.render.image, group.mask, dst.projected_albedo,
                              dst.coating.traits, group.scene_id)
    if task == "remove":
        src = variants[int(rng.integers(0, len(variants)))]
        return TrainingSample("remove", src.render.image, group.original.image, group.mask,
                              np.zeros_like(src.projected_albedo), None, group.scene_id)
    if task in ("add", "add_uniform", "add_textured"):
        dst = variants[int(rng.integers(0, len(variants)))]
        kind = "add_uniform" if dst.coating.is_uniform else "add_textured"
        return TrainingSample(kind, group.original.image, dst.render.image, group.mask, dst.projected_albedo,
                              dst.coating.traits, group.scene_id)
    raise ValueError(f"unknown task {task!r}")


def _two_distinct(rng, n):
    i = int(rng.integers(0, n))
    j = int(rng.integers(0, n - 1))
    return i, j + (j >= i)


# ---------------------------------------------------------------- manifest


@dataclass
class Manifest:
    root: Path
    master_seed: int
    config: dict
    groups: list

    def to_dict(self):
        return {"format": MANIFEST_FORMAT, "root": ".", "master_seed": self.master_seed,
                "config": self.config, "groups": self.groups}


def _coating_record(coat):
    return {"traits": coat.traits.as_dict(), "albedo": coat.albedo_record()}


def coating_from_record(rec, mask):
    alb = rec["albedo"]
    traits = TraitVector.from_dict(rec["traits"])
    if alb["kind"] == "uniform":
        return CoatingSpec(traits, tuple(alb["rgb"]), mask)
    return CoatingSpec(traits, pool_texture(alb["name"]), mask, texture_name=alb["name"])


def write_group(group, root):
    root = Path(root)
    gdir = root / group.scene_id
    gdir.mkdir(parents=True, exist_ok=True)
    (gdir / "scene.json").write_text(json.dumps(group.scene.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    rel = lambda sub, files: {k: f"{group.scene_id}/{sub}/{v}" for k, v in files.items()}  # noqa: E731
    record = {"scene_id": group.scene_id, "seed": group.seed, "scene": f"{group.scene_id}/scene.json",
              "mask_hash": cio.mask_hash(group.mask),
              "original": rel("original", group.original.save(gdir / "original")), "variants": []}
    for i, var in enumerate(group.variants):
        sub = f"variant_{i}"
        files = var.render.save(gdir / sub)
        cio.save_channel(gdir / sub / "mask.f32", var.coating.mask, "mask")
        cio.save_channel(gdir / sub / "projected_albedo.f32", var.projected_albedo, "projected_albedo")
        files["mask"] = "mask.f32"
        files["projected_albedo"] = "projected_albedo.f32"
        record["variants"].append({"index": i, "coating": _coating_record(var.coating),
                                   "mask_hash": cio.mask_hash(var.coating.mask), "files": rel(sub, files)})
    return record


def write_manifest(manifest, path):
    path = Path(path)
    groups = sorted(manifest.groups, key=lambda g: g["scene_id"])
    text = json.dumps({**manifest.to_dict(), "groups": groups}, indent=1, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")


def read_manifest(path):
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    return Manifest(path.parent, data["master_seed"], data["config"], data["groups"])


def validate_manifest(manifest):
    """Check every file exists and that all mask hashes in a group agree."""
    problems = []
    for g in manifest.groups:
        paths = [g["scene"], *g["original"].values()]
        for v in g["variants"]:
            paths += v["files"].values()
            if v["mask_hash"] != g["mask_hash"]:
                problems.append(f"{g['scene_id']}: variant {v['index']} mask hash differs")
            actual = cio.mask_hash(cio.load_channel(manifest.root / v["files"]["mask"]))
            if actual != v["mask_hash"]:
                problems.append(f"{g['scene_id']}: variant {v['index']} mask file does not match its hash")
        for p in paths:
            if not (manifest.root / p).exists():
                problems.append(f"missing file {p}")
    return problems


def load_group(manifest, record):
    root = manifest.root
    scene = SceneSpec.from_dict(json.loads((root / record["scene"]).read_text(encoding="utf-8")))
    original = ChannelStack.load((root / record["original"]["image"]).parent)
    variants = []
    mask = None
    for v in record["variants"]:
        vdir = (root / v["files"]["image"]).parent
        mask = cio.load_channel(vdir / "mask.f32")
        variants.append(Variant(coating_from_record(v["coating"], mask), ChannelStack.load(vdir),
                                cio.load_channel(vdir / "projected_albedo.f32")))
    return SceneGroup(record["scene_id"], scene, mask, original, variants, record["seed"])


def generate_to_disk(config, out_dir, master_seed, threads=None):
    """Generate, write channel files and the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = generate_dataset(config, master_seed, threads)
    records = [write_group(g, out_dir) for g in groups]
    manifest = Manifest(out_dir, int(master_seed), config.to_dict(), records)
    path = out_dir / "manifest.json"
    write_manifest(manifest, path)
    log.info("wrote %d groups to %s", len(records), out_dir)
    return path
