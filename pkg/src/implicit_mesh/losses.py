"""Training objectives.

All losses are means (over pixels, points, edges or keypoints) so that the
weights do not depend on image or atlas resolution.  Functions that take a
camera accept batched hypothesis cameras and then return one loss per
hypothesis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import project
from .errors import ContractError, NumericError
from .renderer import lookup_distance
from .shape_space import eval_mean, eval_shape
from .surface_map import sample_map
from .texture import eval_texture_flow

log = logging.getLogger(__name__)

COMPONENTS = ("mask", "boundary", "gcc", "kp", "rigid", "tex", "texfg")


@dataclass
class LossWeights:
    mask: float = 1.0
    boundary: float = 0.5
    gcc: float = 0.1
    kp: float = 1.0
    rigid: float = 0.25
    tex: float = 0.5
    texfg: float = 0.1

    def __post_init__(self):
        for name in COMPONENTS:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ContractError(f"loss weight {name} must be finite and >= 0, got {v}")

    def as_dict(self):
        return {name: getattr(self, name) for name in COMPONENTS}

    def scaled(self, factor):
        return LossWeights(**{k: v * factor for k, v in self.as_dict().items()})


@dataclass
class KeypointSet:
    canonical: np.ndarray  # (K, 3) unit sphere coordinates
    observed: np.ndarray  # (K, 2) pixel coordinates
    visible: np.ndarray  # (K,) bool
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.canonical = np.asarray(self.canonical, dtype=np.float64).reshape(-1, 3)
        self.observed = np.asarray(self.observed, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if not (len(self.canonical) == len(self.observed) == len(self.visible)):
            raise ContractError("keypoint arrays differ in length")
        if len(self.canonical) and np.abs(np.linalg.norm(self.canonical, axis=1) - 1).max() > 1e-6:
            raise ContractError("canonical keypoints must be unit vectors")
        if not self.names:
            self.names = [f"kp{i}" for i in range(len(self.canonical))]


def _per_camera_mean(x, batched):
    return ad.mean(x, axis=-1) if batched else ad.mean(x)


def loss_mask(rendered, target):
    """Mean absolute difference between a soft mask and the target mask."""
    rendered = ad.as_tensor(rendered)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if rendered.shape[-2:] != target.shape[-2:]:
        raise ContractError(f"mask sizes differ: {rendered.shape} vs {target.shape}")
    diff = ad.abs(rendered - target)
    if rendered.ndim == 3:
        return ad.mean(ad.reshape(diff, (rendered.shape[0], -1)), axis=1)
    return ad.mean(diff)


def boundary_terms(proj, dist_field, boundary, beta=1.0):
    """Both boundary terms from projected points (N, 2) or (K, N, 2).

    Returns ``(inside_term, contour_term)``; the contour term is the mean over
    boundary pixels of a softmin-weighted distance to the projections.
    """
    proj = ad.as_tensor(proj)
    batched = proj.ndim == 3
    p3 = proj if batched else ad.reshape(proj, (1,) + proj.shape)
    k, n = p3.shape[0], p3.shape[1]
    d_in = lookup_distance(dist_field, ad.reshape(p3, (k * n, 2)))
    inside = ad.mean(ad.reshape(d_in, (k, n)), axis=1)
    boundary = np.asarray(boundary, dtype=np.float64).reshape(-1, 2)
    if len(boundary) == 0:
        log.warning("empty mask boundary; contour term skipped")
        contour = Tensor(np.zeros(k))
    else:
        diff = ad.reshape(p3, (k, 1, n, 2)) - boundary.reshape(1, -1, 1, 2)
        dist = ad.l2norm(diff, axis=-1)  # (K, B, N)
        w = ad.softmax(dist * (-1.0 / beta), axis=-1)
        contour = ad.mean(ad.sum(w * dist, axis=-1), axis=-1)
    if not batched:
        inside, contour = inside[0], contour[0]
    return inside, contour


def loss_boundary(points, cam, dist_field, boundary, beta=1.0):
    """Projected points should fall inside the mask and cover its contour."""
    inside, contour = boundary_terms(project(cam, points), dist_field, boundary, beta)
    return inside + contour


def boundary_hard_metric(points, cam, dist_field, boundary):
    """Same objective with a hard minimum; evaluation only."""
    with ad.no_grad():
        proj = project(cam, points).data.reshape(-1, 2)
        d_in = lookup_distance(dist_field, proj).data.mean()
    b = np.asarray(boundary, dtype=np.float64).reshape(-1, 2)
    if len(b) == 0:
        return float(d_in)
    d = np.linalg.norm(b[:, None, :] - proj[None, :, :], axis=-1).min(axis=1)
    return float(d_in + d.mean())


def reprojection_distances(points, cam, targets):
    """‖project(points) − targets‖ per point; (N,) or (K, N)."""
    proj = project(cam, points)
    return ad.l2norm(proj - np.asarray(targets, dtype=np.float64), axis=-1)


def loss_gcc(smap, space, z, cam, fg_pixels, deform_frozen=False):
    """Mean pixel -> sphere -> surface -> pixel round-trip distance over foreground pixels."""
    fg_pixels = np.asarray(fg_pixels, dtype=np.float64).reshape(-1, 2)
    batched = ad.as_tensor(cam.scale).ndim == 1
    if len(fg_pixels) == 0:
        log.warning("no foreground pixels; cycle loss is zero")
        k = ad.as_tensor(cam.scale).shape
        return Tensor(np.zeros(k))
    u = sample_map(smap, fg_pixels)
    pts = eval_shape(space, u, z, deform_frozen=deform_frozen, check=False)
    return _per_camera_mean(reprojection_distances(pts, cam, fg_pixels), batched)


def loss_kp(kps: KeypointSet, space, z, cam, deform_frozen=False):
    """Mean reprojection error of visible keypoints."""
    vis = np.flatnonzero(kps.visible)
    batched = ad.as_tensor(cam.scale).ndim == 1
    if vis.size == 0:
        log.warning("no visible keypoints; keypoint loss is zero")
        return Tensor(np.zeros(ad.as_tensor(cam.scale).shape))
    pts = eval_shape(space, kps.canonical[vis], z, deform_frozen=deform_frozen, check=False)
    return _per_camera_mean(reprojection_distances(pts, cam, kps.observed[vis]), batched)


def rigid_from_points(deformed, mean_points, edges):
    """Mean absolute change of edge lengths between two samplings of the atlas."""
    edges = np.sort(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=1)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]  # canonical order: bit-exact under permutation
    deformed = ad.as_tensor(deformed)
    mean_points = ad.as_tensor(mean_points)
    dl = ad.l2norm(ad.take_rows(deformed, edges[:, 0]) - ad.take_rows(deformed, edges[:, 1]), axis=1)
    ml = ad.l2norm(ad.take_rows(mean_points, edges[:, 0]) - ad.take_rows(mean_points, edges[:, 1]), axis=1)
    return ad.mean(ad.abs(dl - ml))


def loss_rigid(space, z, atlas, deform_frozen=False):
    mean_pts = eval_mean(space, atlas.samples, check=False)
    shape_pts = eval_shape(space, atlas.samples, z, deform_frozen=deform_frozen, check=False)
    return rigid_from_points(shape_pts, mean_pts, atlas.edges)


def _pool2(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    s = ad.reshape(x, (h // 2, 2, w // 2, 2) + tuple(x.shape[2:]))
    return ad.mean(ad.mean(s, axis=3), axis=1)


def loss_texture(rendered, image, fg_mask, levels=3):
    """Foreground-masked L1 color error summed over an image pyramid.

    Each level average-pools the masked images and the mask; the per-level
    error is the mask-weighted mean absolute difference of masked averages.
    """
    rendered = ad.as_tensor(rendered)
    image = np.asarray(image, dtype=np.float64)
    m = np.asarray(fg_mask, dtype=np.float64)
    if rendered.shape != image.shape or image.shape[:2] != m.shape:
        raise ContractError("texture loss inputs differ in size")
    if m.sum() == 0:
        log.warning("empty foreground; texture loss is zero")
        return Tensor(0.0)
    r = rendered * m[..., None]
    t = Tensor(image * m[..., None])
    mm = Tensor(m)
    total = None
    for level in range(levels):
        if level:
            if min(mm.shape) < 2:
                break
            r, t, mm = _pool2(r), _pool2(t), _pool2(mm)
        weight = float(mm.data.sum()) * image.shape[2]
        if weight == 0:
            continue
        term = ad.sum(ad.abs(r - t)) / weight
        total = term if total is None else total + term
    return total


def loss_texture_fg(space_t, z_t, sphere_samples, dist_field):
    """Mean distance (pixels) from flow targets to the nearest foreground pixel."""
    flow = eval_texture_flow(space_t, sphere_samples, z_t, check=False)
    h, w = dist_field.shape
    return ad.mean(lookup_distance(dist_field, flow * np.array([w, h], dtype=np.float64)))


def total_loss(components, weights: LossWeights):
    """Weighted sum; ``components`` maps names to tensors or zero-argument callables.

    Components with zero weight are never evaluated.  Returns ``(total, values)``.
    """
    w = weights.as_dict() if isinstance(weights, LossWeights) else dict(weights)
    total = None
    values = {}
    for name, comp in components.items():
        wt = w.get(name, 0.0)
        if wt == 0:
            continue
        val = comp() if callable(comp) else comp
        val = ad.as_tensor(val)
        if not np.all(np.isfinite(val.data)):
            raise NumericError(f"loss component {name} is not finite")
        values[name] = val
        term = val * wt
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    return total, values
