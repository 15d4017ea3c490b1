"""Triangle meshes, primitive builders and batched ray casting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class TriangleMesh:
    vertices: np.ndarray        # (V, 3)
    faces: np.ndarray           # (F, 3) int, counter-clockwise seen from outside
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.faces)
        else:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    def transformed(self, rotation=None, translation=None) -> "TriangleMesh":
        r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
        return TriangleMesh(self.vertices @ r.T + t, self.faces.copy(), self.normals @ r.T)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        lo, hi = self.bounds()
        centre = 0.5 * (lo + hi)
        return centre, float(np.max(np.linalg.norm(self.vertices - centre, axis=1)))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.vertices, self.faces, self.normals):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, faces, norms, offset = [], [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + offset)
            norms.append(m.normals)
            offset += len(m.vertices)
        return TriangleMesh(np.vstack(verts), np.vstack(faces), np.vstack(norms))


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    return np.cross(v1 - v0, v2 - v0)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; zero for unreferenced vertices."""
    fn = face_normals(vertices, faces)
    acc = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(acc, faces[:, i], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.where(norm > 0, acc / np.where(norm > 0, norm, 1.0), 0.0)


def icosphere(radius: float = 1.0, subdivisions: int = 2, centre=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    unit = np.array(verts)
    return TriangleMesh(unit * radius + np.asarray(centre, dtype=np.float64),
                        np.array(faces), unit.copy())


def box_mesh(lo, hi, inward: bool = False) -> TriangleMesh:
    """Closed axis-aligned box.  Faces point outward unless ``inward``."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]],
                        [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                        [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
                        [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4),
             (3, 7, 6, 2), (0, 4, 7, 3), (1, 2, 6, 5)]
    faces = []
    for a, b, c, d in quads:
        tri = [(a, b, c), (a, c, d)]
        faces += [(x, z, y) for x, y, z in tri] if inward else tri
    mesh = TriangleMesh(corners, np.array(faces))
    return mesh


def quad_mesh(centre, axis_u, axis_v) -> TriangleMesh:
    """Single rectangle spanned by half-axes ``axis_u``, ``axis_v``; normal u x v."""
    c = np.asarray(centre, dtype=np.float64)
    u = np.asarray(axis_u, dtype=np.float64)
    v = np.asarray(axis_v, dtype=np.float64)
    verts = np.array([c - u - v, c + u - v, c + u + v, c - u + v])
    n = np.cross(u, v)
    n /= np.linalg.norm(n)
    return TriangleMesh(verts, np.array([(0, 1, 2), (0, 2, 3)]), np.tile(n, (4, 1)))


def torus(major: float = 1.0, minor: float = 0.3, n_major: int = 24, n_minor: int = 12) -> TriangleMesh:
    """Torus around the y axis."""
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    a = 2 * np.pi * i / n_major
    b = 2 * np.pi * j / n_minor
    ring = np.stack([np.sin(a), np.zeros_like(a), np.cos(a)], axis=-1)
    normal = ring * np.cos(b)[..., None] + np.array([0.0, 1.0, 0.0]) * np.sin(b)[..., None]
    verts = ring * major + normal * minor
    idx = (i * n_minor + j)
    i1 = ((i + 1) % n_major) * n_minor + j
    j1 = i * n_minor + (j + 1) % n_minor
    ij1 = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.stack([idx, j1, ij1], -1).reshape(-1, 3),
                            np.stack([idx, ij1, i1], -1).reshape(-1, 3)])
    verts = verts.reshape(-1, 3)
    normals = normal.reshape(-1, 3)
    # orient faces outward
    fn = face_normals(verts, faces)
    if np.sum(fn * normals[faces[:, 0]]) < 0:
        faces = faces[:, ::-1]
    return TriangleMesh(verts, faces, normals)


def load_obj(path) -> TriangleMesh:
    """Minimal Wavefront OBJ reader (``v``, ``vn`` and polygonal ``f`` records)."""
    verts, normals, faces, face_normals_idx = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [p.split("/") for p in parts[1:]]
            vi = [int(p[0]) - 1 if int(p[0]) > 0 else len(verts) + int(p[0]) for p in idx]
            ni = [int(p[2]) - 1 if len(p) > 2 and p[2] else None for p in idx]
            for k in range(1, len(vi) - 1):
                faces.append((vi[0], vi[k], vi[k + 1]))
                face_normals_idx.append((ni[0], ni[k], ni[k + 1]))
    verts = np.array(verts, dtype=np.float64)
    faces = np.array(faces, dtype=np.int64)
    vn = None
    if normals and all(n is not None for tri in face_normals_idx for n in tri):
        normals = np.array(normals)
        vn = np.zeros_like(verts)
        for tri, ntri in zip(faces, face_normals_idx):
            for v, n in zip(tri, ntri):
                vn[v] += normals[n]
        length = np.linalg.norm(vn, axis=1, keepdims=True)
        vn = np.where(length > 0, vn / np.where(length > 0, length, 1.0), 0.0)
    return TriangleMesh(verts, faces, vn)


# --------------------------------------------------------------------------
# ray casting
# --------------------------------------------------------------------------

class RayCaster:
    """Any-hit / closest-hit queries of rays against a triangle mesh.

    Möller-Trumbore, two-sided, evaluated in chunks.  Rays that miss the
    mesh's bounding sphere skip the triangle tests.
    """

    def __init__(self, mesh: TriangleMesh, chunk: int = 1 << 19):
        tri = mesh.vertices[mesh.faces]
        self.v0 = tri[:, 0]
        self.e1 = tri[:, 1] - tri[:, 0]
        self.e2 = tri[:, 2] - tri[:, 0]
        self.centre, self.radius = mesh.bounding_sphere()
        self.chunk = chunk

    def _candidates(self, origins, dirs):
        oc = origins - self.centre
        b = np.sum(oc * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - (self.radius * 1.0001 + 1e-9) ** 2
        disc = b * b - c
        return (disc >= 0) & ((c <= 0) | (b < 0))

    def _hits(self, o, d, eps):
        """(rays, tris) hit distances, ``inf`` where missed."""
        pvec = np.cross(d[:, None, :], self.e2[None, :, :])
        det = np.einsum("tk,rtk->rt", self.e1, pvec)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tvec = o[:, None, :] - self.v0[None, :, :]
            u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
            qvec = np.cross(tvec, self.e1[None, :, :])
            v = np.einsum("rk,rtk->rt", d, qvec) * inv
            t = np.einsum("tk,rtk->rt", self.e2, qvec) * inv
        ok = (np.abs(det) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
        return np.where(ok, t, np.inf)

    def closest(self, origins, dirs, eps: float = 1e-9) -> np.ndarray:
        """Closest hit distance per ray (``inf`` on a miss)."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        if len(origins) == 1 and len(dirs) > 1:
            origins = np.broadcast_to(origins, dirs.shape)
        out = np.full(len(dirs), np.inf)
        cand = np.nonzero(self._candidates(origins, dirs))[0]
        step = max(1, self.chunk // max(1, len(self.v0)))
        for s in range(0, len(cand), step):
            idx = cand[s:s + step]
            out[idx] = self._hits(origins[idx], dirs[idx], eps).min(axis=1)
        return out

    def occluded(self, origins, dirs, eps: float = 1e-9) -> np.ndarray:
        return np.isfinite(self.closest(origins, dirs, eps))
