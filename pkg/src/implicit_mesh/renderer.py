"""Soft rasterization of projected triangle meshes.

Pixel (row, col) has continuous center (col + 0.5, row + 0.5) in the same
pixel units that cameras project to.  Triangle coverage at a pixel is
``sigmoid(sign * d^2 / sigma)`` with ``d`` the distance to the triangle
boundary and ``sign`` +1 inside, -1 outside; coverages aggregate as
``1 - prod(1 - D)``.  Only pixel/face pairs whose coverage exceeds
``exp(-cutoff)`` are materialized, which keeps the work proportional to the
projected mesh perimeter rather than to pixels x faces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .camera import WeakPerspectiveCamera, project
from .errors import ContractError, NumericError
from .geometry import TriMesh


@dataclass
class SoftRasterConfig:
    height: int = 64
    width: int = 64
    sigma: float | None = None  # px^2; defaults to 1e-4 * width^2
    gamma: float = 1e-4
    background: tuple = (1.0, 1.0, 1.0)
    cutoff: float = 18.0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ContractError("image sides must be at least 8 pixels")
        if self.sigma is None:
            self.sigma = 1e-4 * self.width ** 2
        if self.sigma <= 0 or self.gamma <= 0:
            raise ContractError("sigma and gamma must be positive")


@dataclass
class RenderBuffers:
    mask: np.ndarray | None = None
    color: np.ndarray | None = None
    surface_coords: np.ndarray | None = None
    valid: np.ndarray | None = None
    depth: np.ndarray | None = None


def pixel_centers(height, width):
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([cols + 0.5, rows + 0.5], axis=-1).reshape(-1, 2).astype(np.float64)


def _mesh_parts(mesh):
    if isinstance(mesh, TriMesh):
        return Tensor(mesh.vertices), mesh.faces, mesh.sphere_coords
    verts, faces = mesh[0], mesh[1]
    coords = mesh[2] if len(mesh) > 2 else None
    return ad.as_tensor(verts), np.asarray(faces, dtype=np.int64), coords


# ----------------------------------------------------------------------------
# candidate pixel/face pairs


def _candidate_pairs(tri2d, height, width, margin):
    """Pixels whose centers lie within the face bounding boxes grown by ``margin``.

    ``tri2d`` is (F, 3, 2).  Returns (face index, pixel index) arrays.
    """
    lo = tri2d.min(axis=1) - margin
    hi = tri2d.max(axis=1) + margin
    c0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, width).astype(np.int64)
    c1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, width - 1).astype(np.int64)
    r0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, height).astype(np.int64)
    r1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, height - 1).astype(np.int64)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    counts = nc * nr
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    face = np.repeat(np.arange(len(tri2d)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    ncf = nc[face]
    row = r0[face] + local // ncf
    col = c0[face] + local % ncf
    return face, row * width + col


def _edge_functions(a, b, c, p):
    def cross(o, e, q):
        return (e[:, 0] - o[:, 0]) * (q[:, 1] - o[:, 1]) - (e[:, 1] - o[:, 1]) * (q[:, 0] - o[:, 0])
    return cross(b, c, p), cross(c, a, p), cross(a, b, p)


def _inside(w0, w1, w2):
    area = w0 + w1 + w2
    pos = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    neg = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
    return (area != 0) & (pos | neg)


def _seg_dist2_np(p, a, b):
    ab = b - a
    ap = p - a
    den = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", ap, ab) / np.where(den > 0, den, 1.0), 0.0, 1.0)
    d = ap - t[:, None] * ab
    return np.einsum("ij,ij->i", d, d)


def _seg_dist2(p, a, b):
    """Differentiable squared distance from constant points ``p`` to segments (a, b)."""
    ab = b - a
    ap = p - a
    den = ad.sum(ab * ab, axis=1)
    safe = ad.where(den.data > 0, den, 1.0)
    t = ad.clip(ad.sum(ap * ab, axis=1) / safe, 0.0, 1.0)
    d = ap - ad.reshape(t, (-1, 1)) * ab
    return ad.sum(d * d, axis=1)


@dataclass
class _Pairs:
    batch: np.ndarray  # camera index per pair
    face: np.ndarray
    pixel: np.ndarray  # flat pixel index within one image
    inside: np.ndarray
    d2: np.ndarray
    edge: np.ndarray  # nearest boundary edge index 0..2
    bary: np.ndarray  # (P, 3) barycentric weights, clipped and renormalized


def _build_pairs(v2d, faces, cfg, margin):
    """Enumerate contributing pairs for each camera of a (K, V, 2) projection."""
    w = cfg.width
    limit = cfg.cutoff * cfg.sigma
    parts = []
    for k in range(v2d.shape[0]):
        tri = v2d[k][faces]
        face, pixel = _candidate_pairs(tri, cfg.height, w, margin)
        if face.size == 0:
            continue
        # edges b->c, c->a, a->b: edge function i is the one opposite vertex i
        origin = tri[:, [1, 2, 0]]
        evec = tri[:, [2, 0, 1]] - origin
        ex, ey = evec[..., 0], evec[..., 1]
        len2 = ex * ex + ey * ey
        inv = np.where(len2 > 0, 1.0 / np.where(len2 > 0, len2, 1.0), 0.0)
        px = (pixel % w + 0.5)[:, None]
        py = (pixel // w + 0.5)[:, None]
        ax = px - np.take(origin[..., 0], face, axis=0)
        ay = py - np.take(origin[..., 1], face, axis=0)
        exf = np.take(ex, face, axis=0)
        eyf = np.take(ey, face, axis=0)
        wfun = exf * ay - eyf * ax  # (P, 3)
        t = np.clip((ax * exf + ay * eyf) * np.take(inv, face, axis=0), 0.0, 1.0)
        dx = ax - t * exf
        dy = ay - t * eyf
        d2s = dx * dx + dy * dy
        edge = np.argmin(d2s, axis=1)
        d2 = np.take_along_axis(d2s, edge[:, None], axis=1)[:, 0]
        w0, w1, w2 = wfun[:, 0], wfun[:, 1], wfun[:, 2]
        inside = _inside(w0, w1, w2)
        keep = inside | (d2 < limit)
        if not keep.any():
            continue
        wk = wfun[keep]
        area = wk.sum(axis=1, keepdims=True)
        bary = np.clip(wk / np.where(area != 0, area, 1.0), 0.0, 1.0)
        bary = bary / np.maximum(bary.sum(axis=1, keepdims=True), 1e-12)
        parts.append(_Pairs(np.full(int(keep.sum()), k), face[keep], pixel[keep], inside[keep],
                            d2[keep], edge[keep], bary))
    if not parts:
        return None
    return _Pairs(*[np.concatenate([getattr(p, f) for p in parts]) for f in
                    ("batch", "face", "pixel", "inside", "d2", "edge", "bary")])


def _pair_log_vis(v2d_t, faces, pairs, cfg):
    """log(1 - D) per pair as a tensor, D the soft coverage."""
    k_count, n_vert = v2d_t.shape[0], v2d_t.shape[1]
    flat = ad.reshape(v2d_t, (k_count * n_vert, 2))
    base = pairs.batch * n_vert
    fv = faces[pairs.face]
    a = ad.take_rows(flat, base + fv[:, 0])
    b = ad.take_rows(flat, base + fv[:, 1])
    c = ad.take_rows(flat, base + fv[:, 2])
    p = pixel_centers(cfg.height, cfg.width)[pairs.pixel]
    # distance to the nearest edge only; the argmin is a constant selection
    groups, parts = [], []
    for e, (s, t) in enumerate(((b, c), (c, a), (a, b))):
        sel = np.flatnonzero(pairs.edge == e)
        if sel.size:
            groups.append(sel)
            parts.append(_seg_dist2(p[sel], ad.take_rows(s, sel), ad.take_rows(t, sel)))
    order = np.concatenate(groups)
    d2 = ad.take_rows(ad.concat(parts), np.argsort(order, kind="stable"))
    sign = np.where(pairs.inside, 1.0, -1.0)
    # log(1 - sigmoid(x)) = -softplus(x)
    return -ad.softplus(d2 * (sign / cfg.sigma))


def _check_finite(v2d):
    if not np.all(np.isfinite(v2d)):
        raise NumericError("projected vertices are not finite")


def _as_batched(v2d):
    t = ad.as_tensor(v2d)
    _check_finite(t.data)
    if t.ndim == 2:
        return ad.reshape(t, (1,) + t.shape), True
    return t, False


def soft_silhouette(v2d, faces, cfg: SoftRasterConfig):
    """Differentiable occupancy image(s) from projected vertices (V, 2) or (K, V, 2)."""
    v2d, single = _as_batched(v2d)
    faces = np.asarray(faces, dtype=np.int64)
    k_count = v2d.shape[0]
    hw = cfg.height * cfg.width
    margin = math.sqrt(cfg.cutoff * cfg.sigma)
    pairs = _build_pairs(v2d.data, faces, cfg, margin) if faces.size else None
    if pairs is None:
        out = Tensor(np.zeros((k_count, cfg.height, cfg.width)))
        return out[0] if single else out
    log_vis = _pair_log_vis(v2d, faces, pairs, cfg)
    total = ad.segment_sum(log_vis, pairs.batch * hw + pairs.pixel, k_count * hw)
    occ = 1.0 - ad.exp(total)
    occ = ad.reshape(occ, (k_count, cfg.height, cfg.width))
    return occ[0] if single else occ


def rasterize_mask(mesh, cam: WeakPerspectiveCamera, cfg: SoftRasterConfig):
    """Soft mask of a mesh (TriMesh or (vertices tensor, faces)) under ``cam``."""
    verts, faces, _ = _mesh_parts(mesh)
    if faces.size == 0 or verts.shape[0] == 0:
        shape = (cfg.height, cfg.width)
        k = ad.as_tensor(cam.scale).shape
        return Tensor(np.zeros(k + shape))
    return soft_silhouette(project(cam, verts), faces, cfg)


def rasterize_color(mesh, cam: WeakPerspectiveCamera, texture_at_u, cfg: SoftRasterConfig,
                    return_mask=False, weight_floor=1e-10):
    """Soft-z-buffered color image.

    Each pixel blends face colors with weights proportional to coverage times
    ``exp(depth / gamma)`` (depth normalized to [0, 1] over the mesh, larger is
    nearer); face color is the texture evaluated at the barycentric-interpolated
    sphere coordinate.  The result is composited over the background by the
    soft occupancy.
    """
    verts, faces, coords = _mesh_parts(mesh)
    bg = np.asarray(cfg.background, dtype=np.float64)
    h, w = cfg.height, cfg.width
    if faces.size == 0 or verts.shape[0] == 0:
        img = Tensor(np.broadcast_to(bg, (h, w, 3)).copy())
        return (img, Tensor(np.zeros((h, w)))) if return_mask else img
    if coords is None:
        raise ContractError("color rendering needs per-vertex sphere coordinates")
    uv, depth = project(cam, verts, with_depth=True)
    uv, single = _as_batched(uv)
    depth, _ = _as_batched(depth)
    if not single:
        raise ContractError("color rendering takes a single camera")
    hw = h * w
    pairs = _build_pairs(uv.data, faces, cfg, math.sqrt(cfg.cutoff * cfg.sigma))
    if pairs is None:
        img = Tensor(np.broadcast_to(bg, (h, w, 3)).copy())
        return (img, Tensor(np.zeros((h, w)))) if return_mask else img
    log_vis = _pair_log_vis(uv, faces, pairs, cfg)
    occ = 1.0 - ad.exp(ad.segment_sum(log_vis, pairs.pixel, hw))

    # soft z-buffer weights: coverage * exp((z - zmax_pixel) / gamma)
    dz = depth.data[0]
    zlo, zhi = dz.min(), dz.max()
    zscale = 1.0 / max(zhi - zlo, 1e-12)
    fv = faces[pairs.face]
    zdepth = ad.take_rows(ad.reshape(depth, (-1,)), fv.reshape(-1))
    zdepth = ad.sum(ad.reshape(zdepth, (-1, 3)) * pairs.bary, axis=1)
    znorm = (zdepth - zlo) * zscale
    cover = 1.0 - ad.exp(log_vis)
    logit = ad.log(ad.maximum(cover, 1e-300)) + znorm * (1.0 / cfg.gamma)
    # per-pixel max shift (constant) for a stable softmax
    shift = np.full(hw, -np.inf)
    np.maximum.at(shift, pairs.pixel, logit.data)
    weights_raw = ad.exp(logit - shift[pairs.pixel])
    denom = ad.segment_sum(weights_raw, pairs.pixel, hw)
    keep = np.flatnonzero(weights_raw.data / denom.data[pairs.pixel] > weight_floor)
    sc = coords[fv[keep]]  # (P, 3, 3)
    u = np.einsum("pk,pkc->pc", pairs.bary[keep], sc)
    u = u / np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
    rgb = ad.as_tensor(texture_at_u(u))
    wk = ad.take_rows(weights_raw, keep) / ad.take_rows(denom, pairs.pixel[keep])
    fg = ad.segment_sum(rgb * ad.reshape(wk, (-1, 1)), pairs.pixel[keep], hw)
    occ_col = ad.reshape(occ, (-1, 1))
    img = fg * occ_col + (1.0 - occ_col) * bg
    img = ad.reshape(img, (h, w, 3))
    if return_mask:
        return img, ad.reshape(occ, (h, w))
    return img


# ----------------------------------------------------------------------------
# hard rasterization


def hard_rasterize(v2d, faces, height, width, depth=None, attributes=None):
    """Point-in-triangle z-buffer rasterization (non-differentiable).

    Returns ``(mask, face_index, bary, zbuf)``; ``face_index`` is -1 where
    uncovered.  With ``depth`` omitted, the first covering face wins.
    """
    v2d = np.asarray(v2d, dtype=np.float64)
    _check_finite(v2d)
    faces = np.asarray(faces, dtype=np.int64)
    hw = height * width
    face_idx = np.full(hw, -1, dtype=np.int64)
    zbuf = np.full(hw, -np.inf)
    bary_out = np.zeros((hw, 3))
    if faces.size:
        tri = v2d[faces]
        face, pixel = _candidate_pairs(tri, height, width, 0.0)
        if face.size:
            p = pixel_centers(height, width)[pixel]
            a, b, c = tri[face, 0], tri[face, 1], tri[face, 2]
            w0, w1, w2 = _edge_functions(a, b, c, p)
            inside = _inside(w0, w1, w2)
            face, pixel = face[inside], pixel[inside]
            area = (w0 + w1 + w2)[inside]
            bary = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / area[:, None]
            if depth is not None:
                z = np.einsum("pk,pk->p", bary, np.asarray(depth)[faces[face]])
            else:
                z = -face.astype(np.float64)
            # nearest (largest z) per pixel, ties broken toward the lower face index
            order = np.lexsort((-face, z, pixel))
            last = np.ones(len(order), dtype=bool)
            last[:-1] = pixel[order][1:] != pixel[order][:-1]
            pick = order[last]
            face_idx[pixel[pick]] = face[pick]
            zbuf[pixel[pick]] = z[pick]
            bary_out[pixel[pick]] = bary[pick]
    mask = face_idx >= 0
    return (mask.reshape(height, width), face_idx.reshape(height, width),
            bary_out.reshape(height, width, 3), zbuf.reshape(height, width))


def rasterize_hard_mask(mesh: TriMesh, cam: WeakPerspectiveCamera, height, width):
    with ad.no_grad():
        v2d = project(cam, mesh.vertices).data
    return hard_rasterize(v2d, mesh.faces, height, width)[0]


def rasterize_surface_coords(mesh: TriMesh, cam: WeakPerspectiveCamera, cfg: SoftRasterConfig):
    """Hard z-buffered per-pixel sphere coordinates, depth and validity."""
    if mesh.sphere_coords is None:
        raise ContractError("mesh carries no sphere coordinates")
    with ad.no_grad():
        v2d, z = project(cam, mesh.vertices, with_depth=True)
    mask, face_idx, bary, zbuf = hard_rasterize(v2d.data, mesh.faces, cfg.height, cfg.width, depth=z.data)
    coords = np.zeros((cfg.height, cfg.width, 3))
    if mask.any():
        fv = mesh.faces[face_idx[mask]]
        u = np.einsum("pk,pkc->pc", bary[mask], mesh.sphere_coords[fv])
        coords[mask] = u / np.linalg.norm(u, axis=1, keepdims=True)
    depth = np.where(mask, zbuf, np.nan)
    return RenderBuffers(mask=mask.astype(np.float64), surface_coords=coords, valid=mask, depth=depth)


# ----------------------------------------------------------------------------
# mask utilities


def distance_field(mask):
    """Euclidean distance (pixels) from each pixel center to the nearest foreground center."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ContractError("distance field of an empty mask is undefined")
    return ndimage.distance_transform_edt(~mask)


def lookup_distance(field, xy):
    """Differentiable distance-field lookup at continuous pixel coordinates (N, 2).

    Points outside the pixel-center lattice add their Euclidean distance to it,
    so the value keeps growing away from the image.
    """
    xy = ad.as_tensor(xy)
    h, w = field.shape
    lo = np.array([0.5, 0.5])
    hi = np.array([w - 0.5, h - 0.5])
    inner = ad.bilinear_gather(field, xy)
    clamped = np.clip(xy.data, lo, hi)
    outside = np.any(xy.data != clamped, axis=1)
    if not outside.any():
        return inner
    excess = ad.l2norm(xy - clamped, axis=1)
    return inner + ad.where(outside, excess, 0.0)


def boundary_pixels(mask):
    """Foreground pixels with a background 4-neighbour, as (x, y) pixel centers."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    rows, cols = np.nonzero(mask & ~interior)
    return np.stack([cols + 0.5, rows + 0.5], axis=1).astype(np.float64)


def foreground_pixels(mask):
    rows, cols = np.nonzero(np.asarray(mask).astype(bool))
    return np.stack([cols + 0.5, rows + 0.5], axis=1).astype(np.float64)
