"""Sphere atlases, triangle meshes, voxelization and Wavefront OBJ interchange."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, GeometryError, ParseError

log = logging.getLogger(__name__)

MAX_LEVEL = 6
OBJ_HEADER = "# implicit_mesh obj v1"


@dataclass(frozen=True, eq=False)
class SphereAtlas:
    """Icosphere sampling of the unit sphere with 1-ring adjacency."""

    samples: np.ndarray
    faces: np.ndarray
    adjacency: tuple
    level: int
    edges: np.ndarray = field(repr=False)

    @property
    def n_samples(self):
        return len(self.samples)


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    sphere_coords: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise GeometryError("face index out of range")
        if self.sphere_coords is not None:
            self.sphere_coords = np.asarray(self.sphere_coords, dtype=np.float64).reshape(-1, 3)
            if len(self.sphere_coords) != len(self.vertices):
                raise GeometryError(
                    f"{len(self.sphere_coords)} sphere coords for {len(self.vertices)} vertices")

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, matrix=None, offset=None):
        v = self.vertices
        if matrix is not None:
            v = v @ np.asarray(matrix).T
        if offset is not None:
            v = v + np.asarray(offset)
        return TriMesh(v, self.faces.copy(), None if self.sphere_coords is None else self.sphere_coords.copy())


@dataclass(eq=False)
class VoxelGrid:
    resolution: int
    occupancy: np.ndarray
    bounds: tuple

    @property
    def fraction(self):
        return float(self.occupancy.mean())


# ----------------------------------------------------------------------------
# sphere atlas


def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


def _subdivide(verts, faces):
    verts = list(verts)
    cache = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            m = verts[a] + verts[b]
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.array(verts), out


def unique_edges(faces):
    """Sorted undirected edges (i < j) of a triangle list."""
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@lru_cache(maxsize=None)
def icosphere(level: int) -> SphereAtlas:
    """Subdivided icosahedron with vertices on the unit sphere (outward CCW faces)."""
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_LEVEL:
        raise ContractError(f"icosphere level must be in [0, {MAX_LEVEL}], got {level}")
    verts, faces = _icosahedron()
    for _ in range(level):
        verts, faces = _subdivide(verts, faces)
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(faces, dtype=np.int64)
    edges = unique_edges(faces)
    nbrs = [[] for _ in range(len(verts))]
    for i, j in edges:
        nbrs[i].append(int(j))
        nbrs[j].append(int(i))
    adjacency = tuple(tuple(sorted(n)) for n in nbrs)
    verts.setflags(write=False)
    faces.setflags(write=False)
    edges.setflags(write=False)
    return SphereAtlas(verts, faces, adjacency, int(level), edges)


def reflect(u):
    """Mirror through the X=0 plane: (x, y, z) -> (-x, y, z)."""
    u = np.array(u, dtype=np.float64)
    u[..., 0] = -u[..., 0]
    return u


REFLECTION = np.diag([-1.0, 1.0, 1.0])


def neighborhood(atlas: SphereAtlas, sample_index: int):
    if not 0 <= sample_index < atlas.n_samples:
        raise ContractError(f"sample index {sample_index} out of range [0, {atlas.n_samples})")
    return list(atlas.adjacency[sample_index])


def atlas_mesh(atlas: SphereAtlas) -> TriMesh:
    return TriMesh(atlas.samples.copy(), atlas.faces.copy(), atlas.samples.copy())


def random_sphere_points(n, rng):
    """Uniform samples on the unit sphere."""
    p = rng.standard_normal((n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def sample_surface(mesh: TriMesh, n, rng, return_faces=False):
    """Area-weighted face choice, then uniform barycentric coordinates."""
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise GeometryError("cannot sample a mesh with zero surface area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[face]]
    pts = ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
           + (r1 * r2)[:, None] * v[:, 2])
    return (pts, face) if return_faces else pts


def ellipsoid_mesh(axes, level=3):
    atlas = icosphere(level)
    return TriMesh(atlas.samples * np.asarray(axes, dtype=np.float64), atlas.faces.copy(),
                   atlas.samples.copy())


def cube_mesh(center, half):
    c = np.asarray(center, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    faces = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
    ])
    return TriMesh(c + half * corners, faces, corners / np.sqrt(3.0))


# ----------------------------------------------------------------------------
# distances


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p, vectorized over rows."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + ab * v[:, None] + ac * w[:, None]
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        cand_ab = a + ab * t_ab[:, None]
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        cand_ac = a + ac * t_ac[:, None]
        t_bc = np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)
        cand_bc = b + (c - b) * t_bc[:, None]
    reg_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    reg_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    reg_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    reg_c = (d6 >= 0) & (d5 <= d6)
    reg_b = (d3 >= 0) & (d4 <= d3)
    reg_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(reg_bc[:, None], cand_bc, out)
    out = np.where(reg_ac[:, None], cand_ac, out)
    out = np.where(reg_ab[:, None], cand_ab, out)
    out = np.where(reg_c[:, None], c, out)
    out = np.where(reg_b[:, None], b, out)
    out = np.where(reg_a[:, None], a, out)
    return out


def point_mesh_distance(points, mesh: TriMesh, k=16):
    """Unsigned distance from each point to the mesh surface.

    Candidate triangles are the ``k`` nearest by centroid; exact for meshes
    whose triangles are small relative to their spacing.
    """
    points = np.asarray(points, dtype=np.float64)
    tri = mesh.vertices[mesh.faces]
    cent = tri.mean(axis=1)
    k = min(k, len(cent))
    _, cand = cKDTree(cent).query(points, k=k)
    cand = cand.reshape(len(points), k)
    best = np.full(len(points), np.inf)
    for j in range(k):
        t = tri[cand[:, j]]
        q = closest_points_on_triangles(points, t[:, 0], t[:, 1], t[:, 2])
        best = np.minimum(best, np.linalg.norm(points - q, axis=1))
    return best


def chamfer_distance(a, b):
    """Symmetric mean nearest-neighbour distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return 0.5 * (float(dab.mean()) + float(dba.mean()))


def mesh_chamfer(mesh_a: TriMesh, mesh_b: TriMesh, n=20000, seed=0):
    """Bidirectional surface Chamfer: sample each surface, measure to the other surface."""
    rng = np.random.default_rng(seed)
    pa = sample_surface(mesh_a, n, rng)
    pb = sample_surface(mesh_b, n, rng)
    return 0.5 * (float(point_mesh_distance(pa, mesh_b).mean())
                  + float(point_mesh_distance(pb, mesh_a).mean()))


def bbox_diagonal(mesh: TriMesh):
    lo, hi = mesh.bounds()
    return float(np.linalg.norm(hi - lo))


# ----------------------------------------------------------------------------
# voxelization


def padded_bounds(*meshes, pad=0.05):
    """Union bounding box of the meshes, padded by ``pad`` of its extent per side."""
    lo = np.min([m.vertices.min(axis=0) for m in meshes], axis=0)
    hi = np.max([m.vertices.max(axis=0) for m in meshes], axis=0)
    ext = hi - lo
    return lo - pad * ext, hi + pad * ext


def _top_left(e0, e1):
    # half-open edge rule so a point on a shared edge is counted exactly once
    return (e1 > 0) | ((e1 == 0) & (e0 < 0))


def voxelize(mesh: TriMesh, resolution: int, bounds) -> VoxelGrid:
    """Inside/outside classification of voxel centers by +x ray-crossing parity."""
    if resolution < 8:
        raise ContractError(f"voxel resolution must be >= 8, got {resolution}")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if mesh.faces.size == 0 or not np.any(mesh.face_areas() > 0):
        raise GeometryError("cannot voxelize a mesh without positive-area faces")
    n = int(resolution)
    step = (hi - lo) / n
    # work in grid units relative to the lower corner; voxel centers sit at i + 0.5
    v = (mesh.vertices - lo) / step
    tri = v[mesh.faces]
    crossings = np.zeros((n, n, n + 1), dtype=np.int64)  # (j, k, i)
    centers = np.arange(n) + 0.5
    for a, b, c in tri:
        ya, yb, yc = a[1], b[1], c[1]
        za, zb, zc = a[2], b[2], c[2]
        area2 = (yb - ya) * (zc - za) - (zb - za) * (yc - ya)
        if area2 == 0:
            continue
        if area2 < 0:
            b, c = c, b
            yb, yc, zb, zc = yc, yb, zc, zb
            area2 = -area2
        jlo = max(int(math.ceil(min(ya, yb, yc) - 0.5)), 0)
        jhi = min(int(math.floor(max(ya, yb, yc) - 0.5)), n - 1)
        klo = max(int(math.ceil(min(za, zb, zc) - 0.5)), 0)
        khi = min(int(math.floor(max(za, zb, zc) - 0.5)), n - 1)
        if jlo > jhi or klo > khi:
            continue
        py, pz = np.meshgrid(centers[jlo:jhi + 1], centers[klo:khi + 1], indexing="ij")
        w0 = (yc - yb) * (pz - zb) - (zc - zb) * (py - yb)
        w1 = (ya - yc) * (pz - zc) - (za - zc) * (py - yc)
        w2 = (yb - ya) * (pz - za) - (zb - za) * (py - ya)
        inside = ((w0 > 0) | ((w0 == 0) & _top_left(yc - yb, zc - zb)))
        inside &= ((w1 > 0) | ((w1 == 0) & _top_left(ya - yc, za - zc)))
        inside &= ((w2 > 0) | ((w2 == 0) & _top_left(yb - ya, zb - za)))
        if not inside.any():
            continue
        jj, kk = np.nonzero(inside)
        l0, l1, l2 = w0[jj, kk] / area2, w1[jj, kk] / area2, w2[jj, kk] / area2
        xhit = l0 * a[0] + l1 * b[0] + l2 * c[0]
        # number of voxel centers strictly left of the hit: those see the crossing
        cnt = np.clip(np.ceil(xhit - 0.5).astype(np.int64), 0, n)
        np.add.at(crossings, (jj + jlo, kk + klo, np.zeros_like(cnt)), 1)
        np.add.at(crossings, (jj + jlo, kk + klo, cnt), -1)
    counts = np.cumsum(crossings[:, :, :n], axis=2)  # (j, k, i)
    occ = (counts % 2 == 1).transpose(2, 0, 1)  # -> (i, j, k)
    return VoxelGrid(n, np.ascontiguousarray(occ), (lo.copy(), hi.copy()))


def voxel_iou(a: VoxelGrid, b: VoxelGrid) -> float:
    if a.resolution != b.resolution or not all(
            np.array_equal(x, y) for x, y in zip(a.bounds, b.bounds)):
        raise ContractError("voxel_iou: grids differ in resolution or bounds")
    union = np.logical_or(a.occupancy, b.occupancy).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.occupancy, b.occupancy).sum() / union)


def mesh_iou(mesh_a: TriMesh, mesh_b: TriMesh, resolution=32):
    """Voxel IoU over the shared padded bounding box of both meshes."""
    bounds = padded_bounds(mesh_a, mesh_b)
    return voxel_iou(voxelize(mesh_a, resolution, bounds), voxelize(mesh_b, resolution, bounds))


# ----------------------------------------------------------------------------
# OBJ


def sphere_to_texcoord(u):
    u = np.asarray(u, dtype=np.float64)
    lon = np.arctan2(u[:, 0], u[:, 2])
    lat = np.arctan2(u[:, 1], np.hypot(u[:, 0], u[:, 2]))
    return np.stack([0.5 + lon / (2 * np.pi), 0.5 + lat / np.pi], axis=1)


def texcoord_to_sphere(t):
    t = np.asarray(t, dtype=np.float64)
    lon = (t[:, 0] - 0.5) * 2 * np.pi
    lat = (t[:, 1] - 0.5) * np.pi
    return np.stack([np.sin(lon) * np.cos(lat), np.sin(lat), np.cos(lon) * np.cos(lat)], axis=1)


def format_obj(mesh: TriMesh) -> str:
    lines = [OBJ_HEADER]
    lines += [f"v {x:.10g} {y:.10g} {z:.10g}" for x, y, z in mesh.vertices]
    if mesh.sphere_coords is not None:
        lines += [f"vt {s:.12g} {t:.12g}" for s, t in sphere_to_texcoord(mesh.sphere_coords)]
        lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def _obj_index(tok, count, lineno):
    try:
        i = int(tok)
    except ValueError:
        raise ParseError(f"bad index {tok!r}", lineno) from None
    if i == 0:
        raise ParseError("OBJ indices are 1-based; got 0", lineno)
    i = i - 1 if i > 0 else count + i
    if not 0 <= i < count:
        raise ParseError(f"index {tok} out of range", lineno)
    return i


def parse_obj(text: str) -> TriMesh:
    verts, tex, faces, face_tex = [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise ParseError(f"bad vertex record {raw!r}", lineno) from None
            if len(verts[-1]) != 3:
                raise ParseError("vertex needs three coordinates", lineno)
        elif tag == "vt":
            try:
                tex.append([float(x) for x in parts[1:3]])
            except ValueError:
                raise ParseError(f"bad texcoord record {raw!r}", lineno) from None
        elif tag == "f":
            if len(parts) < 4:
                raise ParseError("face needs at least three vertices", lineno)
            vi, ti = [], []
            for tok in parts[1:]:
                fields = tok.split("/")
                vi.append(_obj_index(fields[0], len(verts), lineno))
                if len(fields) > 1 and fields[1]:
                    ti.append(_obj_index(fields[1], len(tex), lineno))
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
                if len(ti) == len(vi):
                    face_tex.append([ti[0], ti[k], ti[k + 1]])
        elif tag in ("vn", "o", "g", "s", "usemtl", "mtllib", "l", "vp"):
            continue
        else:
            raise ParseError(f"unknown record {tag!r}", lineno)
    if not faces:
        log.warning("OBJ contains no faces")
    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    sphere = None
    if tex and len(face_tex) == len(faces) and faces:
        per_vertex = np.full(len(vertices), -1, dtype=np.int64)
        for fv, ft in zip(faces, face_tex):
            for a, b in zip(fv, ft):
                if per_vertex[a] < 0:
                    per_vertex[a] = b
        if np.all(per_vertex >= 0):
            sphere = texcoord_to_sphere(np.array(tex)[per_vertex])
    return TriMesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3), sphere)


def save_obj(mesh: TriMesh, path):
    with open(path, "w") as fh:
        fh.write(format_obj(mesh))


def load_obj(path) -> TriMesh:
    with open(path) as fh:
        return parse_obj(fh.read())
