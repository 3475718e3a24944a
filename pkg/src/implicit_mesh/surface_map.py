"""Per-image pixel-to-sphere maps, stored as a coarse optimizable grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError


@dataclass(eq=False)
class PixelSurfaceMap:
    grid: Tensor  # (Hc, Wc, 3), unnormalized
    image_size: tuple  # (H, W) of the image the grid spans

    def normalized(self):
        g = self.grid.data
        return g / np.linalg.norm(g, axis=-1, keepdims=True)


def init_map(h_c, w_c, seed, image_size=(64, 64)) -> PixelSurfaceMap:
    if h_c < 4 or w_c < 4:
        raise ContractError("surface map grid must be at least 4x4")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((h_c, w_c, 3))
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    return PixelSurfaceMap(Tensor(g, requires_grad=True, name="surface_map"), tuple(image_size))


def sample_map(smap: PixelSurfaceMap, p):
    """Unit sphere points for image pixel coordinates ``p`` (N, 2), bilinear on the grid."""
    p = np.atleast_2d(np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64))
    h, w = smap.image_size
    hc, wc = smap.grid.shape[:2]
    gxy = p * np.array([wc / w, hc / h])
    v = ad.bilinear_gather(smap.grid, gxy)
    norm = ad.l2norm(v, axis=1, keepdims=True)
    if np.any(norm.data < 1e-8):
        raise NumericError("surface map interpolant vanished")
    return v / norm


def map_to_rgb(smap: PixelSurfaceMap, mask=None):
    """False-color (u + 1) / 2 image at full image resolution."""
    h, w = smap.image_size
    rows, cols = np.mgrid[0:h, 0:w]
    p = np.stack([cols + 0.5, rows + 0.5], axis=-1).reshape(-1, 2)
    with ad.no_grad():
        u = sample_map(smap, p).data
    rgb = ((u + 1.0) / 2.0).reshape(h, w, 3)
    if mask is not None:
        rgb = np.where(np.asarray(mask, dtype=bool)[..., None], rgb, 1.0)
    return rgb
