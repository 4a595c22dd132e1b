"""CPU ray caster producing intrinsic channel stacks for plain and coated scenes.

One primary ray per pixel, direct lighting only, binary shadows. Surfaces
use a metalness-workflow GGX lobe over a Lambertian base. A coat is shaded
as a second layer at the same hit point and blended over the substrate by
its effective transmission; thickness also flattens the substrate's
micro-normal detail.
"""

from __future__ import annotations

import functools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as cio
from .core import CoatingSpec, Rng, check_scalar_map, dot3, normalize, value_noise3
from .mesh import TriangleMesh, builtin_mesh, compute_vertex_normals, load_obj

CHANNELS = ("image", "albedo", "normals", "depth", "shading", "residual", "object_mask")

MIN_ALPHA = 0.05
DIELECTRIC_F0 = 0.04
SHADOW_BIAS = 1e-4
BLOCK_ROWS = 16

_default_threads = None


class DegenerateNormalError(ValueError):
    pass


class RenderConfigError(ValueError):
    pass


def set_default_threads(n):
    """Worker count for row-parallel rendering (``None`` = all cores)."""
    global _default_threads
    _default_threads = n


def _threads(n):
    n = n if n is not None else _default_threads
    return max(1, n if n is not None else (os.cpu_count() or 1))


# ---------------------------------------------------------------- scene types


def _rgb(v):
    return tuple(float(x) for x in v)


@dataclass(frozen=True)
class ProceduralTexture:
    """World-space pattern used for substrate and floor albedo."""

    kind: str
    color_a: tuple
    color_b: tuple
    scale: float = 4.0

    def sample(self, p):
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        q = p * self.scale
        if self.kind == "checker":
            sel = (np.floor(q[:, 0]) + np.floor(q[:, 1]) + np.floor(q[:, 2])) % 2 == 0
        elif self.kind == "stripes":
            sel = np.floor(q[:, 0] + q[:, 2]) % 2 == 0
        elif self.kind == "grain":
            sel = value_noise3(q * np.array([1.0, 8.0, 1.0])) > 0.5
        else:
            raise RenderConfigError(f"unknown texture kind {self.kind!r}")
        return np.where(sel[:, None], a, b)

    def to_dict(self):
        return {"kind": self.kind, "color_a": list(self.color_a), "color_b": list(self.color_b),
                "scale": self.scale}


@dataclass(frozen=True)
class BaseMaterial:
    albedo: object = (0.8, 0.8, 0.8)
    roughness: float = 0.5
    metalness: float = 0.0

    def __post_init__(self):
        if not isinstance(self.albedo, ProceduralTexture):
            object.__setattr__(self, "albedo", _rgb(self.albedo))
        for name in ("roughness", "metalness"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise RenderConfigError(f"material {name} must lie in [0, 1]")

    def albedo_at(self, p):
        if isinstance(self.albedo, ProceduralTexture):
            return self.albedo.sample(p)
        return np.broadcast_to(np.asarray(self.albedo), p.shape).copy()

    def to_dict(self):
        alb = self.albedo.to_dict() if isinstance(self.albedo, ProceduralTexture) else list(self.albedo)
        return {"albedo": alb, "roughness": self.roughness, "metalness": self.metalness}

    @classmethod
    def from_dict(cls, d):
        alb = d["albedo"]
        if isinstance(alb, dict):
            alb = ProceduralTexture(alb["kind"], _rgb(alb["color_a"]), _rgb(alb["color_b"]),
                                    float(alb.get("scale", 4.0)))
        return cls(alb, float(d["roughness"]), float(d["metalness"]))


@functools.lru_cache(maxsize=32)
def _load_mesh(spec):
    mesh = load_obj(spec) if spec.endswith(".obj") else builtin_mesh(spec)
    if mesh.vertex_normals is None:
        mesh = compute_vertex_normals(mesh)
    return mesh


@dataclass(frozen=True)
class SceneObject:
    """The target object: ``sphere`` (radius), ``box`` (half extents) or ``mesh``.

    Mesh objects name a builtin (``icosphere:2``) or an ``.obj`` path and are
    scaled by ``radius`` about the origin then moved to ``center``.
    """

    kind: str
    center: tuple = (0.0, 1.0, 0.0)
    radius: float = 1.0
    half_extents: tuple = (0.5, 0.5, 0.5)
    mesh: str = None
    material: BaseMaterial = field(default_factory=BaseMaterial)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "mesh"):
            raise RenderConfigError(f"unknown object kind {self.kind!r}")
        if self.kind == "mesh" and not self.mesh:
            raise RenderConfigError("mesh objects need a mesh name or .obj path")
        object.__setattr__(self, "center", _rgb(self.center))
        object.__setattr__(self, "half_extents", _rgb(self.half_extents))

    def triangle_mesh(self):
        return _load_mesh(self.mesh).transformed(self.center, self.radius)

    def to_dict(self):
        d = {"kind": self.kind, "center": list(self.center), "material": self.material.to_dict()}
        if self.kind == "box":
            d["half_extents"] = list(self.half_extents)
        else:
            d["radius"] = self.radius
        if self.kind == "mesh":
            d["mesh"] = self.mesh
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], center=_rgb(d.get("center", (0, 1, 0))),
                   radius=float(d.get("radius", 1.0)),
                   half_extents=_rgb(d.get("half_extents", (0.5, 0.5, 0.5))),
                   mesh=d.get("mesh"), material=BaseMaterial.from_dict(d["material"]))


@dataclass(frozen=True)
class Light:
    """Point light at ``position``, or directional light arriving from ``direction``.

    ``direction`` points from the surface toward the light.
    """

    intensity: tuple
    position: tuple = None
    direction: tuple = None

    def __post_init__(self):
        if (self.position is None) == (self.direction is None):
            raise RenderConfigError("a light needs exactly one of position or direction")
        object.__setattr__(self, "intensity", _rgb(self.intensity))
        if self.position is not None:
            object.__setattr__(self, "position", _rgb(self.position))
        else:
            d = np.asarray(self.direction, dtype=np.float64)
            object.__setattr__(self, "direction", _rgb(d / np.linalg.norm(d)))

    def to_dict(self):
        d = {"intensity": list(self.intensity)}
        if self.position is not None:
            d["position"] = list(self.position)
        else:
            d["direction"] = list(self.direction)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(intensity=_rgb(d["intensity"]), position=d.get("position"), direction=d.get("direction"))


@dataclass(frozen=True)
class Camera:
    position: tuple
    look_at: tuple
    fov_deg: float = 40.0
    width: int = 128
    height: int = 128
    up: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise RenderConfigError("field of view must lie in (0, 180) degrees")
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, _rgb(getattr(self, name)))

    def basis(self):
        fwd = normalize(np.subtract(self.look_at, self.position))
        right = normalize(np.cross(fwd, self.up))
        up = np.cross(right, fwd)
        return right, up, fwd

    def rays(self, row0, row1):
        right, up, fwd = self.basis()
        tan_half = np.tan(np.radians(self.fov_deg) / 2.0)
        aspect = self.width / self.height
        rows = np.arange(row0, row1, dtype=np.float64)
        cols = np.arange(self.width, dtype=np.float64)
        y = (1.0 - 2.0 * (rows + 0.5) / self.height) * tan_half
        x = (2.0 * (cols + 0.5) / self.width - 1.0) * tan_half * aspect
        yy, xx = np.meshgrid(y, x, indexing="ij")
        d = xx[..., None] * right + yy[..., None] * up + fwd
        d = normalize(d.reshape(-1, 3))
        o = np.broadcast_to(np.asarray(self.position), d.shape)
        return o, d

    def to_dict(self):
        return {"position": list(self.position), "look_at": list(self.look_at), "fov_deg": self.fov_deg,
                "width": self.width, "height": self.height, "up": list(self.up)}

    @classmethod
    def from_dict(cls, d):
        return cls(position=d["position"], look_at=d["look_at"], fov_deg=float(d.get("fov_deg", 40.0)),
                   width=int(d["width"]), height=int(d["height"]), up=d.get("up", (0.0, 1.0, 0.0)))


@dataclass(frozen=True)
class Floor:
    height: float = 0.0
    material: BaseMaterial = field(default_factory=lambda: BaseMaterial((0.5, 0.5, 0.5), 0.8, 0.0))

    def to_dict(self):
        return {"height": self.height, "material": self.material.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d.get("height", 0.0)), BaseMaterial.from_dict(d["material"]))


@dataclass(frozen=True)
class SceneSpec:
    object: SceneObject
    camera: Camera
    lights: tuple
    floor: Floor = None
    ambient: tuple = (0.1, 0.1, 0.1)
    detail_amplitude: float = 0.0
    detail_frequency: float = 8.0
    detail_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lights", tuple(self.lights))
        object.__setattr__(self, "ambient", _rgb(self.ambient))
        if not self.lights:
            raise RenderConfigError("scene needs at least one light")
        if not 0.0 <= self.detail_amplitude <= 1.0:
            raise RenderConfigError("detail_amplitude must lie in [0, 1]")

    @property
    def shape(self):
        return self.camera.height, self.camera.width

    def to_dict(self):
        return {"object": self.object.to_dict(), "camera": self.camera.to_dict(),
                "lights": [lt.to_dict() for lt in self.lights],
                "floor": self.floor.to_dict() if self.floor else None,
                "ambient": list(self.ambient), "detail_amplitude": self.detail_amplitude,
                "detail_frequency": self.detail_frequency, "detail_seed": self.detail_seed}

    @classmethod
    def from_dict(cls, d):
        return cls(object=SceneObject.from_dict(d["object"]), camera=Camera.from_dict(d["camera"]),
                   lights=tuple(Light.from_dict(x) for x in d["lights"]),
                   floor=Floor.from_dict(d["floor"]) if d.get("floor") else None,
                   ambient=_rgb(d.get("ambient", (0.0, 0.0, 0.0))),
                   detail_amplitude=float(d.get("detail_amplitude", 0.0)),
                   detail_frequency=float(d.get("detail_frequency", 8.0)),
                   detail_seed=int(d.get("detail_seed", 0)))


@dataclass(eq=False)
class ChannelStack:
    """Per-pixel intrinsic decomposition of a render.

    ``residual`` is defined as ``image - albedo * shading``.
    """

    image: np.ndarray
    albedo: np.ndarray
    normals: np.ndarray
    depth: np.ndarray
    shading: np.ndarray
    residual: np.ndarray
    object_mask: np.ndarray

    @property
    def shape(self):
        return self.depth.shape

    def channels(self):
        return {name: getattr(self, name) for name in CHANNELS}

    def save(self, directory, preview=True):
        """Write every channel as float32 files under ``directory``; returns relative names."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name in CHANNELS:
            cio.save_channel(directory / f"{name}.f32", getattr(self, name), name)
            files[name] = f"{name}.f32"
        if preview:
            cio.save_preview(directory / "image.png", self.image)
            files["preview"] = "image.png"
        return files

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        return cls(**{name: cio.load_channel(directory / f"{name}.f32") for name in CHANNELS})


# ---------------------------------------------------------------- shading helpers


def effective_transmission(transmission, thickness):
    return transmission * (1.0 - thickness)


def shading_normal(n_detail, n_smooth, thickness):
    """Blend the detailed normal toward the smooth one as the coat thickens."""
    v = (1.0 - thickness) * np.asarray(n_detail, dtype=np.float64) + thickness * np.asarray(n_smooth, dtype=np.float64)
    length = np.linalg.norm(v)
    if length < 1e-9:
        raise DegenerateNormalError("detail and smooth normals cancel out")
    return v / length


def _shading_normals(n_detail, n_smooth, thickness):
    v = (1.0 - thickness) * n_detail + thickness * n_smooth
    length = np.sqrt(dot3(v, v))
    bad = length < 1e-9
    out = v / np.where(bad, 1.0, length)[..., None]
    return np.where(bad[..., None], n_smooth, out)


def layer_composite(base_rgb, coat_rgb, t_eff, mask_value):
    """Coat over base: opaque coat at ``t_eff=0``, invisible at ``t_eff=1``, gated by the mask."""
    base = np.asarray(base_rgb, dtype=np.float64)
    coat = np.asarray(coat_rgb, dtype=np.float64)
    t_eff = np.asarray(t_eff, dtype=np.float64)
    m = np.asarray(mask_value, dtype=np.float64)
    if t_eff.ndim and base.ndim > t_eff.ndim:
        t_eff = t_eff[..., None]
    if m.ndim and base.ndim > m.ndim:
        m = m[..., None]
    return base + m * ((1.0 - t_eff) * coat + t_eff * base - base)


def ggx_distribution(n_dot_h, roughness):
    """GGX normal distribution with ``alpha = roughness**2``."""
    alpha = np.maximum(np.asarray(roughness, dtype=np.float64) ** 2, MIN_ALPHA)
    a2 = alpha * alpha
    k = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (np.pi * k * k)


def _smith_g1(x, alpha):
    k = alpha / 2.0
    return x / (x * (1.0 - k) + k)


def _surface_response(albedo, roughness, metalness, n, v, light_dirs, light_rgb, vis, ambient):
    """Return (diffuse_albedo, irradiance, specular) for per-pixel materials."""
    diffuse_albedo = albedo * (1.0 - metalness)[:, None]
    f0 = DIELECTRIC_F0 + (albedo - DIELECTRIC_F0) * metalness[:, None]
    alpha = np.maximum(roughness ** 2, MIN_ALPHA)
    nv = dot3(n, v)
    irradiance = np.broadcast_to(np.asarray(ambient, dtype=np.float64), albedo.shape).copy()
    # constant-environment reflection: ambient radiance weighted by Fresnel at the view angle
    f_view = f0 + (1.0 - f0) * ((1.0 - np.clip(nv, 0.0, 1.0)) ** 5)[:, None]
    specular = f_view * np.asarray(ambient, dtype=np.float64)
    for l_dir, rgb, seen in zip(light_dirs, light_rgb, vis):
        nl = dot3(n, l_dir)
        lit = np.where((nl > 0) & seen, nl, 0.0)
        irradiance += lit[:, None] * rgb
        h = normalize(l_dir + v)
        nh = np.clip(dot3(n, h), 0.0, 1.0)
        vh = np.clip(dot3(v, h), 0.0, 1.0)
        d = ggx_distribution(nh, roughness)
        fres = f0 + (1.0 - f0) * ((1.0 - vh) ** 5)[:, None]
        ok = (lit > 0) & (nv > 0)
        nv_c = np.where(ok, nv, 1.0)
        g = _smith_g1(nv_c, alpha) * _smith_g1(np.where(ok, nl, 1.0), alpha)
        # pi * brdf * cos: a white Lambertian surface has value 1 under unit light
        spec = np.where(ok, np.pi * d * g / (4.0 * nv_c), 0.0)
        specular += spec[:, None] * fres * rgb
    return diffuse_albedo, irradiance, specular


# ---------------------------------------------------------------- intersection


def _intersect_sphere(obj, o, d):
    c = np.asarray(obj.center)
    oc = o - c
    b = dot3(oc, d)
    cc = dot3(oc, oc) - obj.radius ** 2
    disc = b * b - cc
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, np.inf))
    t = np.where(hit, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    n = normalize(p - c)
    return t, n, n


def _intersect_box(obj, o, d):
    c = np.asarray(obj.center)
    h = np.asarray(obj.half_extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (c - h - o) * inv
        t_hi = (c + h - o) * inv
    t_near = np.minimum(t_lo, t_hi)
    t_far = np.maximum(t_lo, t_hi)
    t_near = np.nan_to_num(t_near, nan=-np.inf)
    t_far = np.nan_to_num(t_far, nan=np.inf)
    tn = np.max(t_near, axis=1)
    tf = np.min(t_far, axis=1)
    hit = (tn <= tf) & (tf > 1e-6)
    t = np.where(tn > 1e-6, tn, tf)
    t = np.where(hit, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    local = (p - c) / h
    axis = np.argmax(np.abs(local), axis=1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(local[np.arange(len(p)), axis])
    return t, n, n


def _intersect_mesh(mesh, o, d, chunk=256):
    # bounding-sphere cull before the per-triangle test
    center = 0.5 * (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0))
    radius = np.sqrt(np.max(dot3(mesh.vertices - center, mesh.vertices - center))) * (1 + 1e-9)
    oc = o - center
    b = dot3(oc, d)
    disc = b * b - (dot3(oc, oc) - radius * radius)
    cand = (disc >= 0) & (-b + np.sqrt(np.maximum(disc, 0.0)) > 0)
    t = np.full(len(o), np.inf)
    n_geo = np.zeros((len(o), 3))
    n_smooth = np.zeros((len(o), 3))
    if cand.any():
        tc, gc, sc = _intersect_triangles(mesh, o[cand], d[cand], chunk)
        t[cand], n_geo[cand], n_smooth[cand] = tc, gc, sc
    return t, n_geo, n_smooth


def _intersect_triangles(mesh, o, d, chunk):
    """Moller-Trumbore against every triangle, rays x triangle-chunk at a time."""
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    n_rays = len(o)
    rows = np.arange(n_rays)
    dx, dy, dz = (d[:, k:k + 1] for k in range(3))
    ox, oy, oz = (o[:, k:k + 1] for k in range(3))
    best_t = np.full(n_rays, np.inf)
    best_f = np.full(n_rays, -1)
    best_u = np.zeros(n_rays)
    best_v = np.zeros(n_rays)
    for s in range(0, mesh.n_faces, chunk):
        a = v0[s:s + chunk].T
        b1 = e1[s:s + chunk].T
        b2 = e2[s:s + chunk].T
        px = dy * b2[2] - dz * b2[1]
        py = dz * b2[0] - dx * b2[2]
        pz = dx * b2[1] - dy * b2[0]
        det = b1[0] * px + b1[1] * py + b1[2] * pz
        ok = np.abs(det) > 1e-12
        inv = 1.0 / np.where(ok, det, 1.0)
        tx, ty, tz = ox - a[0], oy - a[1], oz - a[2]
        u = (tx * px + ty * py + tz * pz) * inv
        qx = ty * b1[2] - tz * b1[1]
        qy = tz * b1[0] - tx * b1[2]
        qz = tx * b1[1] - ty * b1[0]
        v = (dx * qx + dy * qy + dz * qz) * inv
        t = (b2[0] * qx + b2[1] * qy + b2[2] * qz) * inv
        valid = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-6)
        t = np.where(valid, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[rows, k]
        better = tk < best_t
        best_t = np.where(better, tk, best_t)
        best_f = np.where(better, s + k, best_f)
        best_u = np.where(better, u[rows, k], best_u)
        best_v = np.where(better, v[rows, k], best_v)
    hit = best_f >= 0
    f = np.where(hit, best_f, 0)
    n_geo = normalize(np.cross(e1[f], e2[f]))
    vn = mesh.vertex_normals[mesh.faces[f]]
    w = np.stack([1.0 - best_u - best_v, best_u, best_v], axis=1)
    n_smooth = normalize((w[:, :, None] * vn).sum(axis=1))
    return best_t, n_geo, n_smooth


def intersect_object(obj, o, d):
    """Nearest hit distance (inf on miss), geometric normal and smooth normal."""
    if obj.kind == "sphere":
        return _intersect_sphere(obj, o, d)
    if obj.kind == "box":
        return _intersect_box(obj, o, d)
    return _intersect_mesh(obj.triangle_mesh(), o, d)


def _intersect_floor(floor, o, d):
    if floor is None:
        return np.full(len(o), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (floor.height - o[:, 1]) / d[:, 1]
    return np.where((d[:, 1] < 0) & (t > 1e-6), t, np.inf)


def _detail_normals(scene, p, n):
    if scene.detail_amplitude <= 0:
        return n
    q = p * scene.detail_frequency
    g = np.stack([2.0 * value_noise3(q + off, scene.detail_seed) - 1.0
                  for off in ((0.0, 0.0, 0.0), (17.3, 5.1, 9.7), (3.7, 31.9, 13.1))], axis=-1)
    tangent = g - dot3(g, n)[:, None] * n
    return normalize(n + scene.detail_amplitude * tangent)


# ---------------------------------------------------------------- rendering


def _light_vectors(scene, p):
    dirs, rgbs, dists = [], [], []
    for lt in scene.lights:
        if lt.position is not None:
            delta = np.asarray(lt.position) - p
            dist = np.sqrt(dot3(delta, delta))
            dirs.append(delta / np.maximum(dist, 1e-12)[:, None])
            dists.append(dist)
        else:
            dirs.append(np.broadcast_to(np.asarray(lt.direction), p.shape))
            dists.append(np.full(len(p), np.inf))
        rgbs.append(np.asarray(lt.intensity))
    return dirs, rgbs, dists


def _render_block(scene, row0, row1, coat_albedo=None, coat_mask=None, traits=None):
    cam = scene.camera
    o, d = cam.rays(row0, row1)
    n_px = len(d)
    t_obj, ng_obj, ns_obj = intersect_object(scene.object, o, d)
    t_floor = _intersect_floor(scene.floor, o, d)
    hit_obj = np.isfinite(t_obj) & (t_obj <= t_floor)
    hit_floor = ~hit_obj & np.isfinite(t_floor)
    hit = hit_obj | hit_floor
    t = np.where(hit_obj, t_obj, np.where(hit_floor, t_floor, np.inf))
    p = o + np.where(hit, t, 0.0)[:, None] * d

    up = np.array([0.0, 1.0, 0.0])
    n_geo = np.where(hit_obj[:, None], ng_obj, up)
    n_smooth = np.where(hit_obj[:, None], ns_obj, up)
    # face the viewer
    flip = dot3(n_geo, d) > 0
    n_geo = np.where(flip[:, None], -n_geo, n_geo)
    n_smooth = np.where((dot3(n_smooth, d) > 0)[:, None], -n_smooth, n_smooth)
    n_detail = n_smooth.copy()
    if hit_obj.any():
        n_detail[hit_obj] = _detail_normals(scene, p[hit_obj], n_smooth[hit_obj])

    albedo = np.zeros((n_px, 3))
    rough = np.ones(n_px)
    metal = np.zeros(n_px)
    for sel, mat in ((hit_obj, scene.object.material),
                     (hit_floor, scene.floor.material if scene.floor else None)):
        if mat is not None and sel.any():
            albedo[sel] = mat.albedo_at(p[sel])
            rough[sel] = mat.roughness
            metal[sel] = mat.metalness

    light_dirs, light_rgb, light_dist = _light_vectors(scene, p)
    shadow_o = p + SHADOW_BIAS * n_geo
    vis = []
    for l_dir, dist in zip(light_dirs, light_dist):
        seen = hit.copy()
        if hit.any():
            ts, _, _ = intersect_object(scene.object, shadow_o[hit], np.ascontiguousarray(l_dir[hit]))
            seen[hit] = ~(ts < dist[hit])
        vis.append(seen)

    v = -d
    ambient = np.asarray(scene.ambient)
    diff_alb, irr, spec = _surface_response(albedo, rough, metal, n_detail, v, light_dirs, light_rgb, vis, ambient)
    image = diff_alb * irr + spec
    normals = n_detail
    shading = irr

    if coat_albedo is not None:
        m = coat_mask.reshape(-1)
        sel = hit_obj & (m > 0)
        if sel.any():
            t_eff = effective_transmission(traits.transmission, traits.thickness)
            ns = _shading_normals(n_detail[sel], n_smooth[sel], traits.thickness)
            sub = lambda a: [x[sel] for x in a]  # noqa: E731
            b_alb, b_irr, b_spec = _surface_response(albedo[sel], rough[sel], metal[sel], ns, v[sel],
                                                     sub(light_dirs), light_rgb, sub(vis), ambient)
            c_alb, _, c_spec = _surface_response(
                coat_albedo.reshape(-1, 3)[sel], np.full(sel.sum(), traits.roughness),
                np.full(sel.sum(), traits.metalness), ns, v[sel], sub(light_dirs), light_rgb, sub(vis), ambient)
            mv = m[sel]
            image = image.copy()
            diff_alb = diff_alb.copy()
            normals = normals.copy()
            shading = shading.copy()
            image[sel] = layer_composite(b_alb * b_irr + b_spec, c_alb * b_irr + c_spec, t_eff, mv)
            diff_alb[sel] = layer_composite(b_alb, c_alb, t_eff, mv)
            normals[sel] = ns
            shading[sel] = b_irr

    image = np.where(hit[:, None], image, ambient)
    diff_alb = np.where(hit[:, None], diff_alb, 0.0)
    shading = np.where(hit[:, None], shading, 0.0)
    right, cup, fwd = cam.basis()
    n_cam = np.stack([dot3(normals, right), dot3(normals, cup), -dot3(normals, fwd)], axis=-1)
    n_cam = np.where(hit[:, None], n_cam, 0.0)
    w = cam.width
    shape = (row1 - row0, w)
    return {
        "image": image.reshape(shape + (3,)),
        "albedo": diff_alb.reshape(shape + (3,)),
        "normals": n_cam.reshape(shape + (3,)),
        "depth": t.reshape(shape),
        "shading": shading.reshape(shape + (3,)),
        "object_mask": hit_obj.astype(np.float64).reshape(shape),
    }


def _render(scene, threads=None, **coat):
    h, w = scene.shape
    if h <= 0 or w <= 0:
        raise RenderConfigError("image must have at least one pixel")
    blocks = [(r, min(r + BLOCK_ROWS, h)) for r in range(0, h, BLOCK_ROWS)]

    def job(block):
        r0, r1 = block
        sub = {}
        if coat:
            sub = {"coat_albedo": coat["coat_albedo"][r0:r1], "coat_mask": coat["coat_mask"][r0:r1],
                   "traits": coat["traits"]}
        return _render_block(scene, r0, r1, **sub)

    n = min(_threads(threads), len(blocks))
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            parts = list(pool.map(job, blocks))
    else:
        parts = [job(b) for b in blocks]
    out = {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}
    out["residual"] = out["image"] - out["albedo"] * out["shading"]
    return ChannelStack(**out)


def render_uncoated(scene, threads=None):
    return _render(scene, threads)


def _projected(coat, h, w):
    mask = np.asarray(coat.mask)
    inside = mask > 0
    if coat.is_uniform:
        return np.where(inside[..., None], np.asarray(coat.albedo), 0.0)
    tex = np.asarray(coat.albedo, dtype=np.float64)
    th, tw = tex.shape[:2]
    # texel coordinates of pixel centers
    ty = np.clip((np.arange(h) + 0.5) / h * th - 0.5, 0.0, th - 1)
    tx = np.clip((np.arange(w) + 0.5) / w * tw - 0.5, 0.0, tw - 1)
    y0 = np.floor(ty).astype(int)
    x0 = np.floor(tx).astype(int)
    y1 = np.minimum(y0 + 1, th - 1)
    x1 = np.minimum(x0 + 1, tw - 1)
    fy = (ty - y0)[:, None, None]
    fx = (tx - x0)[None, :, None]
    top = tex[y0][:, x0] * (1 - fx) + tex[y0][:, x1] * fx
    bot = tex[y1][:, x0] * (1 - fx) + tex[y1][:, x1] * fx
    sampled = top * (1 - fy) + bot * fy
    return np.where(inside[..., None], sampled, 0.0)


def project_albedo(coat, scene_stack):
    """Screen-space projection of the coat albedo, black outside the coat mask."""
    h, w = scene_stack.shape
    if np.shape(coat.mask) != (h, w):
        raise ValueError("coat mask must match the render size")
    return _projected(coat, h, w)


def render_coated(scene, coat, threads=None):
    h, w = scene.shape
    if np.shape(coat.mask) != (h, w):
        raise ValueError(f"coat mask shape {np.shape(coat.mask)} does not match render size {(h, w)}")
    return _render(scene, threads, coat_albedo=_projected(coat, h, w),
                   coat_mask=np.asarray(coat.mask, dtype=np.float64), traits=coat.traits)


class EmptySceneError(ValueError):
    pass


def generate_mask(scene_stack, rng, coverage_target, frequency=5.0, iterations=60):
    """Binary noise mask restricted to the object silhouette.

    The noise threshold is bisected until the covered fraction of object
    pixels is within 5% (relative) of ``coverage_target``.
    """
    if not 0.0 < coverage_target <= 1.0:
        raise ValueError("coverage_target must lie in (0, 1]")
    obj = np.asarray(scene_stack.object_mask) > 0
    if not obj.any():
        raise EmptySceneError("object silhouette is empty")
    if coverage_target >= 1.0:
        return obj.astype(np.float64)
    h, w = obj.shape
    offset = rng.uniform(0.0, 1000.0, size=3)
    seed = int(rng.integers(0, 2 ** 31))
    s = max(h, w)
    yy, xx = np.meshgrid(np.arange(h) / s, np.arange(w) / s, indexing="ij")
    pts = np.stack([xx * frequency, yy * frequency, np.zeros_like(xx)], axis=-1) + offset
    field_ = value_noise3(pts, seed) + 0.5 * value_noise3(2.0 * pts + 7.0, seed)
    values = field_[obj]
    lo, hi = values.min() - 1e-9, values.max() + 1e-9
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        frac = np.mean(values >= mid)
        if abs(frac - coverage_target) <= 0.1 * coverage_target * 0.5:
            break
        if frac > coverage_target:
            lo = mid
        else:
            hi = mid
    mask = (field_ >= mid) & obj
    return mask.astype(np.float64)


def mask_coverage(mask, object_mask):
    obj = np.asarray(object_mask) > 0
    return float(np.mean(np.asarray(mask)[obj] > 0))


# ---------------------------------------------------------------- fixtures


def test_scene(size=256, detail_amplitude=0.35):
    """Fixed scene used by checks and examples: a textured sphere on a floor."""
    substrate = BaseMaterial(ProceduralTexture("checker", (0.75, 0.6, 0.45), (0.45, 0.3, 0.2), 3.0), 0.6, 0.0)
    return SceneSpec(
        object=SceneObject("sphere", center=(0.0, 1.0, 0.0), radius=1.0, material=substrate),
        camera=Camera(position=(0.0, 1.8, 4.2), look_at=(0.0, 0.9, 0.0), fov_deg=40.0, width=size, height=size),
        lights=(Light((0.6, 0.6, 0.6), position=(3.0, 5.0, 3.0)), Light((0.35, 0.35, 0.4), position=(-4.0, 3.0, 2.0))),
        floor=Floor(0.0, BaseMaterial(ProceduralTexture("checker", (0.5, 0.5, 0.5), (0.35, 0.35, 0.35), 1.0), 0.9)),
        ambient=(0.15, 0.15, 0.15),
        detail_amplitude=detail_amplitude,
    )


test_scene.__test__ = False
