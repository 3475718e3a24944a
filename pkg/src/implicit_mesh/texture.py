"""Implicit texture flow: each sphere point copies its color from an image location."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .shape_space import MLP, _as_points, _latent, mlp_widths


@dataclass(eq=False)
class TextureSpace:
    flow_net: MLP
    latent_dim: int

    def __post_init__(self):
        if self.flow_net.in_width != 3 + self.latent_dim or self.flow_net.out_width != 2:
            raise ContractError("flow network must map 3 + latent_dim inputs to 2 outputs")

    def parameters(self):
        return self.flow_net.parameters()


def build_texture_space(latent_dim=16, hidden=64, seed=1) -> TextureSpace:
    rng = np.random.default_rng(seed)
    return TextureSpace(MLP(mlp_widths(3 + latent_dim, 2, hidden), rng, prefix="flow"), latent_dim)


def fold(u):
    """Map sphere points onto the x >= 0 hemisphere; points on the plane stay put."""
    u = ad.as_tensor(u)
    sign = np.where(u.data[:, :1] < 0, -1.0, 1.0)
    return u * np.concatenate([sign, np.ones((len(sign), 2))], axis=1)


def eval_texture_flow(space: TextureSpace, u, z, check=True):
    """Normalized source-image coordinates in (0, 1)^2, mirror-symmetric in u."""
    t, single = _as_points(u, check)
    z = _latent(space.latent_dim, z)
    folded = fold(t)
    zz = ad.broadcast(ad.reshape(z, (1, -1)), (t.shape[0], space.latent_dim))
    flow = ad.sigmoid(space.flow_net(ad.concat([folded, zz], axis=1)))
    return flow[0] if single else flow


def bilinear_sample(image, xy):
    """Sample an (H, W, C) image at normalized coordinates (N, 2) in [0, 1]^2.

    Normalized (x, y) maps to pixel coordinates (x * W, y * H); pixel centers
    therefore sit at ((c + 0.5) / W, (r + 0.5) / H).  Out-of-range inputs clamp.
    """
    image = ad.as_tensor(image)
    xy = ad.as_tensor(xy)
    single = xy.ndim == 1
    if single:
        xy = ad.reshape(xy, (1, 2))
    h, w = image.shape[:2]
    out = ad.bilinear_gather(image, xy * np.array([w, h], dtype=np.float64))
    return out[0] if single else out


def texture_at(space: TextureSpace, z, source_image):
    """Closure u -> rgb copying colors from ``source_image`` along the flow."""
    source_image = np.asarray(source_image, dtype=np.float64)

    def texture(u):
        return bilinear_sample(source_image, eval_texture_flow(space, u, z, check=False))

    return texture
