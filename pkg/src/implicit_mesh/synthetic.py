"""Synthetic image collections with known shapes, cameras and keypoints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import WeakPerspectiveCamera, project, quat_from_view
from .errors import ContractError
from .geometry import TriMesh, ellipsoid_mesh
from .losses import KeypointSet
from .renderer import hard_rasterize


@dataclass
class Instance:
    """One image of an object with its foreground mask."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    id: str
    keypoints: KeypointSet | None = None
    shape_id: str | None = None  # views sharing a shape_id share one shape latent

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape[:2] != self.mask.shape:
            raise ContractError(f"instance {self.id}: image and mask sizes differ")
        if not self.mask.any():
            raise ContractError(f"instance {self.id}: empty mask")
        if self.shape_id is None:
            self.shape_id = self.id

    @property
    def size(self):
        return self.mask.shape


@dataclass
class DeformSpec:
    """Per-instance deformation family: anisotropic scaling and smooth bending.

    Every term is even in x, so deformed shapes keep the X=0 mirror symmetry.
    """

    scale_range: tuple = (0.7, 1.3)
    bend_range: tuple = (0.0, 0.25)  # y += b * z^2
    twist_range: tuple = (0.0, 0.15)  # y += c * z^3
    identity: bool = False

    @classmethod
    def none(cls):
        return cls(identity=True)


@dataclass
class InstanceDeformation:
    scale: np.ndarray
    bend: float
    twist: float
    taper: float = 0.0  # x and y widths scale by (1 + taper * z)

    def apply(self, p):
        p = np.asarray(p, dtype=np.float64) * self.scale
        z = p[:, 2]
        out = p.copy()
        widen = 1.0 + self.taper * z
        out[:, 0] = p[:, 0] * widen
        out[:, 1] = p[:, 1] * widen + self.bend * z ** 2 + self.twist * z ** 3
        return out


IDENTITY_DEFORMATION = InstanceDeformation(np.ones(3), 0.0, 0.0)


def sample_deformation(spec: DeformSpec, rng) -> InstanceDeformation:
    if spec.identity:
        # still consume draws so identity and non-identity datasets share camera streams
        rng.uniform(size=5)
        return IDENTITY_DEFORMATION
    scale = rng.uniform(*spec.scale_range, size=3)
    bend = rng.uniform(*spec.bend_range)
    twist = rng.uniform(*spec.twist_range)
    return InstanceDeformation(scale, float(bend), float(twist))


@dataclass
class SyntheticDataset:
    instances: list
    cameras: list  # WeakPerspectiveCamera per instance image
    meshes: dict  # shape_id -> ground-truth TriMesh
    deformations: dict  # shape_id -> InstanceDeformation
    keypoint_vertices: np.ndarray  # template vertex index per keypoint
    template: TriMesh
    config: dict = field(default_factory=dict)


def default_template(level=3):
    """Ellipsoid category template, tapered and bent so front and back differ."""
    base = ellipsoid_mesh((0.6, 0.4, 1.0), level)
    deform = InstanceDeformation(np.ones(3), 0.2, 0.0, taper=0.4)
    return TriMesh(deform.apply(base.vertices), base.faces, base.sphere_coords)


def procedural_texture(u):
    """Smooth colors on the sphere, mirror-symmetric in x."""
    u = np.asarray(u, dtype=np.float64)
    r = 0.5 + 0.4 * u[:, 2]
    g = 0.5 + 0.4 * u[:, 1]
    b = 0.5 + 0.4 * np.cos(3.0 * u[:, 2]) * np.abs(u[:, 0])
    return np.clip(np.stack([r, g, b], axis=1), 0.0, 1.0)


def render_view(mesh: TriMesh, cam: WeakPerspectiveCamera, size, texture=procedural_texture,
                background=(1.0, 1.0, 1.0)):
    """Hard-rasterized mask, color image and depth buffer of a mesh."""
    h, w = size
    v2d, z = project(cam, mesh.vertices, with_depth=True)
    mask, face_idx, bary, zbuf = hard_rasterize(v2d.data, mesh.faces, h, w, depth=z.data)
    image = np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3)).copy()
    if mask.any():
        fv = mesh.faces[face_idx[mask]]
        u = np.einsum("pk,pkc->pc", bary[mask], mesh.sphere_coords[fv])
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        image[mask] = texture(u)
    return mask, image, zbuf, v2d.data, z.data


def keypoint_visibility(v2d, z, zbuf, idx, size, tol):
    h, w = size
    pts = v2d[idx]
    col = np.floor(pts[:, 0]).astype(int)
    row = np.floor(pts[:, 1]).astype(int)
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    vis = np.zeros(len(idx), dtype=bool)
    for i in np.flatnonzero(inside):
        front = zbuf[row[i], col[i]]
        if not np.isfinite(front):
            # projected onto the silhouette rim: compare with the nearest covered neighbors
            r0, r1 = max(row[i] - 1, 0), min(row[i] + 2, h)
            c0, c1 = max(col[i] - 1, 0), min(col[i] + 2, w)
            near = zbuf[r0:r1, c0:c1]
            near = near[np.isfinite(near)]
            if near.size == 0:
                continue
            front = near.min()
        vis[i] = z[idx[i]] >= front - tol
    return vis


def generate_synthetic(template: TriMesh | None = None, n_instances=8, n_views=4,
                       deform_spec: DeformSpec | None = None, seed=0, image_size=(64, 64),
                       n_keypoints=12, elevation_range=(10.0, 30.0), scale_range=(0.26, 0.3),
                       jitter=2.0) -> SyntheticDataset:
    """Render deformed copies of ``template`` from random weak perspective views.

    Cameras: azimuth uniform on the circle, elevation uniform in
    ``elevation_range`` degrees, scale ``W * U(scale_range)`` pixels per unit,
    translation at the image center plus uniform ``jitter`` pixels.
    """
    template = template if template is not None else default_template()
    if template.sphere_coords is None:
        raise ContractError("template needs per-vertex sphere coordinates")
    deform_spec = deform_spec or DeformSpec()
    rng = np.random.default_rng(seed)
    h, w = image_size
    kp_idx = np.sort(rng.choice(len(template.vertices), size=n_keypoints, replace=False))
    canonical = template.sphere_coords[kp_idx]
    canonical = canonical / np.linalg.norm(canonical, axis=1, keepdims=True)
    extent = float(np.ptp(template.vertices, axis=0).max())
    instances, cameras, meshes, deformations = [], [], {}, {}
    for i in range(n_instances):
        sid = f"s{i:02d}"
        deformation = sample_deformation(deform_spec, rng)
        mesh = TriMesh(deformation.apply(template.vertices), template.faces.copy(),
                       template.sphere_coords.copy())
        meshes[sid] = mesh
        deformations[sid] = deformation
        for v in range(n_views):
            az = rng.uniform(0.0, 2.0 * math.pi)
            el = math.radians(rng.uniform(*elevation_range))
            s = w * rng.uniform(*scale_range)
            t = np.array([w / 2.0, h / 2.0]) + rng.uniform(-jitter, jitter, size=2)
            cam = WeakPerspectiveCamera(s, t, quat_from_view(az, el))
            mask, image, zbuf, v2d, z = render_view(mesh, cam, (h, w))
            vis = keypoint_visibility(v2d, z, zbuf, kp_idx, (h, w), tol=0.05 * extent)
            kps = KeypointSet(canonical.copy(), v2d[kp_idx].copy(), vis)
            instances.append(Instance(image, mask, f"{sid}_v{v}", kps, sid))
            cameras.append(cam)
    config = dict(n_instances=n_instances, n_views=n_views, seed=seed, image_size=list(image_size),
                  n_keypoints=n_keypoints, elevation_range=list(elevation_range),
                  scale_range=list(scale_range), jitter=jitter)
    return SyntheticDataset(instances, cameras, meshes, deformations, kp_idx, template, config)
