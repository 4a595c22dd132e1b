"""Triangle meshes, vertex normals and cover-mesh extrusion."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Cover-mesh offset used for dataset generation.
COVER_EPSILON = 0.0004
COVER_SCALE = 1.0005


class MeshTopologyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshTopologyError("face index out of range")
        if f.size and np.any(face_areas(v, f) <= 1e-14):
            raise MeshTopologyError("mesh contains degenerate (zero-area) faces")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.vertex_normals is not None:
            n = np.array(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != v.shape:
                raise ValueError("vertex_normals must match vertices in shape")
            if not np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6):
                raise ValueError("vertex normals must be unit length")
            n.setflags(write=False)
            object.__setattr__(self, "vertex_normals", n)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def transformed(self, center=(0.0, 0.0, 0.0), scale=1.0):
        """Uniformly scaled then translated copy (normals are unchanged by this)."""
        return TriangleMesh(self.vertices * scale + np.asarray(center, dtype=np.float64), self.faces,
                            self.vertex_normals)


def face_normals_weighted(vertices, faces):
    """Cross products of face edges: direction is the face normal, length twice the area."""
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return np.cross(b - a, c - a)


def face_areas(vertices, faces):
    return 0.5 * np.linalg.norm(face_normals_weighted(vertices, faces), axis=1)


def compute_vertex_normals(mesh):
    """Area-weighted vertex normals; returns a new mesh."""
    if mesh.n_faces == 0:
        raise MeshTopologyError("mesh has no faces")
    fn = face_normals_weighted(mesh.vertices, mesh.faces)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.ravel()] = True
    if not used.all():
        raise MeshTopologyError(f"{int((~used).sum())} isolated vertices have no incident face")
    length = np.linalg.norm(acc, axis=1)
    if np.any(length < 1e-300):
        raise MeshTopologyError("incident face normals cancel at a vertex")
    return TriangleMesh(mesh.vertices, mesh.faces, acc / length[:, None])


def extrude_cover(mesh, epsilon=COVER_EPSILON, scale=COVER_SCALE):
    """Offset every vertex along its normal by ``epsilon``, then scale about the centroid.

    The centroid is the mean vertex position of the input mesh.
    """
    if mesh.vertex_normals is None:
        raise ValueError("extrude_cover needs vertex normals; call compute_vertex_normals first")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if scale <= 0:
        raise ValueError("scale must be > 0")
    centroid = mesh.vertices.mean(axis=0)
    moved = mesh.vertices + epsilon * mesh.vertex_normals
    out = centroid + scale * (moved - centroid)
    return TriangleMesh(out, mesh.faces, mesh.vertex_normals)


# ---------------------------------------------------------------- builders


def quad(size=1.0):
    """Flat square in the z=0 plane made of two triangles, facing +z."""
    h = size / 2
    v = [(-h, -h, 0), (h, -h, 0), (h, h, 0), (-h, h, 0)]
    return TriangleMesh(v, [(0, 1, 2), (0, 2, 3)])


def unit_cube():
    """Axis-aligned cube [-0.5, 0.5]^3 with a center vertex on each face.

    Every corner touches two equal-area triangles of each adjacent face, so
    area weighting reduces to weighting the three faces equally.
    """
    corners = [(x, y, z) for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]
    verts = list(corners)
    faces = []
    index = {c: i for i, c in enumerate(corners)}
    for axis in range(3):
        for sign in (-0.5, 0.5):
            ring = []
            u, w = [a for a in range(3) if a != axis]
            for du, dw in ((-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)):
                p = [0.0, 0.0, 0.0]
                p[axis], p[u], p[w] = sign, du, dw
                ring.append(index[tuple(p)])
            center = [0.0, 0.0, 0.0]
            center[axis] = sign
            ci = len(verts)
            verts.append(tuple(center))
            for k in range(4):
                a, b = ring[k], ring[(k + 1) % 4]
                tri = (ci, a, b)
                n = np.cross(np.subtract(verts[a], verts[ci]), np.subtract(verts[b], verts[ci]))
                if n[axis] * sign < 0:
                    tri = (ci, b, a)
                faces.append(tri)
    return TriangleMesh(verts, faces)


def octahedron():
    v = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    f = [(0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4), (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5)]
    return TriangleMesh(v, f)


def icosphere(subdivisions=2):
    """Unit icosphere; every vertex lies exactly on the unit sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [tuple(np.asarray(p, dtype=np.float64) / np.linalg.norm(p)) for p in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.add(verts[a], verts[b])
                cache[key] = len(verts)
                verts.append(tuple(m / np.linalg.norm(m)))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(verts, faces)


def builtin_mesh(name):
    """Named meshes usable from scene files, e.g. ``icosphere:2`` or ``cube``."""
    kind, _, arg = name.partition(":")
    if kind == "icosphere":
        return icosphere(int(arg or 2))
    if kind == "cube":
        return unit_cube()
    if kind == "octahedron":
        return octahedron()
    if kind == "quad":
        return quad()
    raise ValueError(f"unknown builtin mesh {name!r}")


def load_obj(path):
    """Read ``v``/``vn``/``f`` records from a Wavefront OBJ file.

    Polygons are fan-triangulated. Vertex normals are kept only when every
    vertex gets exactly one normal through the face records; otherwise the
    mesh is returned without normals.
    """
    positions, normals, faces = [], [], []
    vn_for_vertex = {}
    consistent = True
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            positions.append(tuple(float(x) for x in parts[1:4]))
        elif tag == "vn":
            normals.append(tuple(float(x) for x in parts[1:4]))
        elif tag == "f":
            idx = []
            for token in parts[1:]:
                fields = token.split("/")
                vi = int(fields[0])
                vi = vi - 1 if vi > 0 else len(positions) + vi
                idx.append(vi)
                if len(fields) >= 3 and fields[2]:
                    ni = int(fields[2])
                    ni = ni - 1 if ni > 0 else len(normals) + ni
                    if vn_for_vertex.setdefault(vi, ni) != ni:
                        consistent = False
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    vnormals = None
    if normals and consistent and len(vn_for_vertex) == len(positions):
        vnormals = np.array([normals[vn_for_vertex[i]] for i in range(len(positions))], dtype=np.float64)
        vnormals /= np.linalg.norm(vnormals, axis=1, keepdims=True)
    return TriangleMesh(positions, faces, vnormals)
