"""Keypoint reprojection and transfer accuracy, and voxel IoU of reconstructions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import WeakPerspectiveCamera, project
from .errors import ContractError, GeometryError
from .geometry import TriMesh, icosphere, mesh_iou
from .losses import KeypointSet
from .renderer import SoftRasterConfig, rasterize_surface_coords
from .shape_space import ShapeSpace, eval_shape, extract_mesh
from .storage import write_csv

log = logging.getLogger(__name__)

PCK_NORMALIZATION = "threshold x max(H, W) pixels"
FALLBACK_RADIUS = 5.0  # px; uncovered keypoint pixels look this far for a covered one


@dataclass
class FittedView:
    """What the metrics need from a fit: shape, latent and camera of one image."""

    id: str
    shape_id: str
    space: ShapeSpace
    z_s: np.ndarray
    camera: WeakPerspectiveCamera
    image_size: tuple  # (H, W)

    def mesh(self, level=4) -> TriMesh:
        return extract_mesh(self.space, self.z_s, icosphere(level))


def views_from_result(result) -> dict:
    """FittedViews (best hypothesis) from a pipeline FitResult."""
    out = {}
    for st in result.states:
        out[st.instance.id] = FittedView(st.instance.id, st.instance.shape_id, result.shape_space,
                                         st.z_s.data.copy(), st.best_camera(), st.instance.mask.shape)
    return out


def views_from_checkpoint(ckpt) -> dict:
    return {rid: FittedView(rid, rec.shape_id, ckpt.shape_space, rec.z_s, rec.best_camera(),
                            tuple(rec.image_size))
            for rid, rec in ckpt.instances.items()}


@dataclass
class EvalReport:
    metric: str
    values: dict  # instance (or pair) id -> value
    threshold: float | None = None
    counts: dict = field(default_factory=dict)  # id -> number of scored items
    normalization: str = ""

    @property
    def mean(self):
        if not self.values:
            return float("nan")
        return float(np.mean(list(self.values.values())))

    def summary(self):
        head = f"== {self.metric}"
        if self.threshold is not None:
            head += f" @ {self.threshold:g}"
        if self.normalization:
            head += f" ({self.normalization})"
        lines = [head, f"mean {self.mean:.4f} over {len(self.values)} entries"]
        for k, v in self.values.items():
            n = self.counts.get(k)
            lines.append(f"  {k}: {v:.4f}" + (f" (n={n})" if n is not None else ""))
        return "\n".join(lines)

    def to_csv(self, path):
        rows = [[k, float(v), self.counts.get(k, "")] for k, v in self.values.items()]
        rows.append(["mean", self.mean, sum(self.counts.values()) if self.counts else ""])
        header = ["id", self.metric, "count"]
        kind = f"eval {self.metric} threshold={self.threshold} normalization={self.normalization or 'none'}"
        write_csv(path, kind, header, rows)
        return path


def _pixel_threshold(threshold, image_size):
    return float(threshold) * float(max(image_size))


# ----------------------------------------------------------------------------
# reprojection


def reprojected_keypoints(view: FittedView, kps: KeypointSet):
    with ad.no_grad():
        pts = eval_shape(view.space, kps.canonical, view.z_s, check=False)
        return project(view.camera, pts).data


def pck_reproject(view: FittedView, kps: KeypointSet, threshold=0.1):
    """Percentage of visible keypoints reprojected within ``threshold * max(H, W)`` pixels."""
    vis = np.flatnonzero(kps.visible)
    if vis.size == 0:
        raise ContractError(f"{view.id}: no visible keypoints to score")
    pred = reprojected_keypoints(view, kps)[vis]
    err = np.linalg.norm(pred - kps.observed[vis], axis=1)
    return 100.0 * float(np.mean(err <= _pixel_threshold(threshold, view.image_size)))


def pck_reproject_report(views: dict, keypoints: dict, threshold=0.1) -> EvalReport:
    values, counts = {}, {}
    for iid, kps in keypoints.items():
        if kps is None or not kps.visible.any() or iid not in views:
            continue
        values[iid] = pck_reproject(views[iid], kps, threshold)
        counts[iid] = int(kps.visible.sum())
    return EvalReport("PCK-R", values, threshold, counts, PCK_NORMALIZATION)


# ----------------------------------------------------------------------------
# transfer


def surface_coordinate_render(view: FittedView, level=4):
    h, w = view.image_size
    return rasterize_surface_coords(view.mesh(level), view.camera, SoftRasterConfig(h, w))


def _query_coords(buf, points):
    """Sphere coordinate under each point, from the nearest covered pixel within the fallback radius."""
    valid = np.asarray(buf.valid, dtype=bool)
    h, w = valid.shape
    rows, cols = np.nonzero(valid)
    centers = np.stack([cols + 0.5, rows + 0.5], axis=1)
    out = np.zeros((len(points), 3))
    found = np.zeros(len(points), dtype=bool)
    for i, p in enumerate(points):
        c, r = int(np.floor(p[0])), int(np.floor(p[1]))
        if 0 <= r < h and 0 <= c < w and valid[r, c]:
            out[i] = buf.surface_coords[r, c]
            found[i] = True
            continue
        if len(centers) == 0:
            continue
        d = np.linalg.norm(centers - p, axis=1)
        j = int(np.argmin(d))
        if d[j] <= FALLBACK_RADIUS:
            out[i] = buf.surface_coords[rows[j], cols[j]]
            found[i] = True
    return out, found


def transfer_keypoints(src: FittedView, tgt: FittedView, points, level=4):
    """Transfer image points of ``src`` to ``tgt`` through rendered sphere coordinates.

    Returns ``(predicted (N, 2) pixel centers, found (N,) bool)``; points with
    no covered pixel within the fallback radius are not found.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tbuf = surface_coordinate_render(tgt, level)
    tvalid = np.asarray(tbuf.valid, dtype=bool)
    if not tvalid.any():
        raise GeometryError(f"target {tgt.id} renders no pixels")
    sbuf = tbuf if src is tgt else surface_coordinate_render(src, level)
    query, found = _query_coords(sbuf, points)
    if found.any() and np.any(np.abs(query[found, 0]) < 1e-3):
        log.info("query on the symmetry plane: mirrored matches are equally valid")
    rows, cols = np.nonzero(tvalid)
    tu = tbuf.surface_coords[rows, cols]
    best = np.argmax(query @ tu.T, axis=1)
    pred = np.stack([cols[best] + 0.5, rows[best] + 0.5], axis=1).astype(np.float64)
    pred[~found] = np.nan
    return pred, found


def pck_transfer_pair(src: FittedView, tgt: FittedView, src_kps: KeypointSet, tgt_kps: KeypointSet,
                      threshold=0.1, level=4):
    """(percentage, count) over keypoints visible in both images; misses count as failures."""
    both = np.flatnonzero(src_kps.visible & tgt_kps.visible)
    if both.size == 0:
        return None, 0
    pred, found = transfer_keypoints(src, tgt, src_kps.observed[both], level)
    err = np.linalg.norm(pred - tgt_kps.observed[both], axis=1)
    hit = found & (err <= _pixel_threshold(threshold, tgt.image_size))
    return 100.0 * float(np.mean(hit)), int(both.size)


def pck_transfer(views: dict, keypoints: dict, pairs, threshold=0.1, level=4) -> EvalReport:
    """Transfer accuracy averaged over ordered (src, tgt) id pairs."""
    values, counts = {}, {}
    for s, t in pairs:
        pct, n = pck_transfer_pair(views[s], views[t], keypoints[s], keypoints[t], threshold, level)
        if pct is None:
            continue
        values[f"{s}->{t}"] = pct
        counts[f"{s}->{t}"] = n
    if not values:
        raise ContractError("no pair shares a visible keypoint")
    return EvalReport("PCK-T", values, threshold, counts, PCK_NORMALIZATION)


def self_pairs(ids):
    return [(i, i) for i in ids]


def cross_pairs(views: dict):
    """Ordered pairs of views of different shapes."""
    ids = list(views)
    return [(a, b) for a in ids for b in ids if views[a].shape_id != views[b].shape_id]


# ----------------------------------------------------------------------------
# 3D


def reconstruction_iou(fit_meshes: dict, gt_meshes: dict, resolution=32) -> EvalReport:
    """Voxel IoU per shape over the shared padded bounding box; no alignment."""
    keys = [k for k in gt_meshes if k in fit_meshes]
    if not keys:
        raise ContractError("no shape has both a fitted and a ground-truth mesh")
    values = {k: mesh_iou(fit_meshes[k], gt_meshes[k], resolution) for k in keys}
    return EvalReport("IoU", values, None, {}, f"voxel grid {resolution}^3")
