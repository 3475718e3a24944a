"""Latent-conditioned implicit surfaces: mean shape plus symmetric deformation.

A shape is a map from the unit sphere to R^3.  The mean network gives the
category shape, the deformation network (conditioned on a latent code) adds
an instance offset, and both are mirror-symmetrized about the X=0 plane so
that ``phi(R(u))`` is exactly ``R(phi(u))``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .geometry import (SphereAtlas, TriMesh, bbox_diagonal, icosphere, mesh_chamfer,
                       random_sphere_points, sample_surface)
from .optim import Adam

log = logging.getLogger(__name__)

MIRROR = np.array([-1.0, 1.0, 1.0])


class MLP:
    """Feedforward network with tanh hidden activations and a linear head."""

    def __init__(self, widths, rng, zero_last=False, prefix="net"):
        self.widths = tuple(int(w) for w in widths)
        self.prefix = prefix
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            last = i == len(self.widths) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(Tensor(w, requires_grad=True, name=f"{prefix}.W{i}"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.b{i}"))

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]

    def parameters(self):
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out

    def __call__(self, x):
        h = ad.as_tensor(x)
        if h.shape[-1] != self.in_width:
            raise DimensionError(f"{self.prefix}: input width {h.shape[-1]}, expected {self.in_width}")
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, w) + b
            if i < n - 1:
                h = ad.tanh(h)
        return h

    def frozen_call(self, x):
        """Evaluate with parameters treated as constants."""
        h = ad.as_tensor(x)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, w.data) + b.data
            if i < n - 1:
                h = ad.tanh(h)
        return h


def mlp_widths(in_width, out_width, hidden=64, layers=4):
    return [in_width] + [hidden] * (layers - 1) + [out_width]


@dataclass(eq=False)
class ShapeSpace:
    mean_net: MLP
    deform_net: MLP
    latent_dim: int

    def __post_init__(self):
        if self.deform_net.in_width != 3 + self.latent_dim:
            raise ContractError("deformation network input width must be 3 + latent_dim")

    def parameters(self):
        out = dict(self.mean_net.parameters())
        out.update(self.deform_net.parameters())
        return out


class _FrozenNet:
    """An MLP whose weights act as constants."""

    def __init__(self, net: MLP):
        self.net = net
        self.in_width = net.in_width
        self.out_width = net.out_width
        self.prefix = net.prefix

    def __call__(self, x):
        return self.net.frozen_call(x)

    frozen_call = __call__

    def parameters(self):
        return {}


def frozen_view(space: ShapeSpace) -> ShapeSpace:
    """Same shapes, no gradient path to any network weight."""
    return ShapeSpace(_FrozenNet(space.mean_net), _FrozenNet(space.deform_net), space.latent_dim)


def build_shape_space(latent_dim=16, hidden=64, seed=0) -> ShapeSpace:
    rng = np.random.default_rng(seed)
    mean_net = MLP(mlp_widths(3, 3, hidden), rng, prefix="mean")
    deform_net = MLP(mlp_widths(3 + latent_dim, 3, hidden), rng, zero_last=True, prefix="deform")
    return ShapeSpace(mean_net, deform_net, latent_dim)


def _as_points(u, check=True):
    t = ad.as_tensor(u)
    single = t.ndim == 1
    if single:
        t = ad.reshape(t, (1, 3))
    if t.ndim != 2 or t.shape[1] != 3:
        raise DimensionError(f"sphere points must have shape (N, 3), got {t.shape}")
    if check:
        dev = np.abs(np.linalg.norm(t.data, axis=1) - 1.0)
        if dev.size and dev.max() > 1e-6:
            raise ContractError(f"sphere point off the unit sphere by {dev.max():.3g}")
    return t, single


def _latent(space_dim, z):
    z = ad.as_tensor(z)
    if z.shape != (space_dim,):
        raise ContractError(f"latent code must have length {space_dim}, got shape {z.shape}")
    return z


def _symmetrized(net_fn, u, extra=None):
    """(f(u) + R(f(R(u)))) / 2, with both halves evaluated in one batch."""
    n = u.shape[0]
    both = ad.concat([u, u * MIRROR], axis=0)
    if extra is not None:
        z = ad.broadcast(ad.reshape(extra, (1, -1)), (2 * n, extra.shape[0]))
        both = ad.concat([both, z], axis=1)
    out = net_fn(both)
    return (out[:n] + out[n:] * MIRROR) * 0.5


def eval_mean(space: ShapeSpace, u, check=True):
    t, single = _as_points(u, check)
    out = _symmetrized(space.mean_net, t)
    return out[0] if single else out


def eval_deform(space: ShapeSpace, u, z, frozen=False, check=True):
    """Symmetrized deformation.

    ``frozen`` treats the network weights as constants; gradients still reach
    ``u`` and ``z``.
    """
    t, single = _as_points(u, check)
    z = _latent(space.latent_dim, z)
    net = space.deform_net.frozen_call if frozen else space.deform_net
    out = _symmetrized(net, t, z)
    return out[0] if single else out


def eval_shape(space: ShapeSpace, u, z, deform_frozen=False, check=True):
    t, single = _as_points(u, check)
    out = eval_mean(space, t, check=False) + eval_deform(space, t, z, frozen=deform_frozen, check=False)
    return out[0] if single else out


def shape_vertices(space, z, atlas: SphereAtlas, deform_frozen=False):
    """Differentiable vertex positions of the mesh sampled at the atlas."""
    if z is None:
        return eval_mean(space, atlas.samples, check=False)
    return eval_shape(space, atlas.samples, z, deform_frozen=deform_frozen, check=False)


def extract_mesh(space: ShapeSpace, z, atlas: SphereAtlas) -> TriMesh:
    with ad.no_grad():
        v = shape_vertices(space, z, atlas).data.copy()
    return TriMesh(v, np.array(atlas.faces), np.array(atlas.samples))


# ----------------------------------------------------------------------------
# template initialization


def hungarian_match(p, q):
    """Minimum-cost perfect matching under squared Euclidean distance.

    Returns ``(assignment, cost)`` where ``p[i]`` is matched to
    ``q[assignment[i]]``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"hungarian_match needs equal-size sets, got {p.shape} and {q.shape}")
    cost = cdist(p, q, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(len(p), dtype=np.int64)
    assignment[rows] = cols
    return assignment, float(cost[rows, cols].sum())


def brute_force_match(p, q):
    """Exhaustive search over permutations; for small sets only."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    cost = cdist(p, q, "sqeuclidean")
    n = len(p)
    best, best_perm = np.inf, None
    for perm in permutations(range(n)):
        c = cost[np.arange(n), perm].sum()
        if c < best:
            best, best_perm = c, perm
    return np.array(best_perm, dtype=np.int64), float(best)


@dataclass
class TemplateFitConfig:
    iterations: int = 600
    batch: int = 1000
    lr: float = 5e-3
    lr_final: float = 1e-5  # cosine decay from lr to lr_final over the run
    tolerance: float = 0.02  # fraction of the template bbox diagonal
    seed: int = 0
    atlas_level: int = 3
    chamfer_samples: int = 20000


@dataclass
class TemplateFitResult:
    converged: bool
    chamfer: float
    threshold: float
    losses: list = field(default_factory=list)

    def summary(self):
        status = "converged" if self.converged else "FAILED"
        return (f"template fit {status}: chamfer {self.chamfer:.5f} "
                f"(threshold {self.threshold:.5f}, final matching loss {self.losses[-1]:.6f})")


def mean_shape_chamfer(space, template: TriMesh, level=3, samples=20000, seed=0):
    mesh = extract_mesh(space, None, icosphere(level))
    return mesh_chamfer(mesh, template, n=samples, seed=seed)


def fit_template(space: ShapeSpace, template: TriMesh, cfg: TemplateFitConfig = None,
                 callback=None) -> TemplateFitResult:
    """Fit the mean network to a template surface by repeated optimal matching.

    Every iteration draws fresh surface samples and fresh sphere samples,
    matches the two clouds, and takes an Adam step on the matched squared
    distances.  Only the mean network is updated.
    """
    cfg = cfg or TemplateFitConfig()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(space.mean_net.parameters(), cfg.lr)
    losses = []
    for it in range(cfg.iterations):
        opt.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * it / cfg.iterations))
        target = sample_surface(template, cfg.batch, rng)
        u = random_sphere_points(cfg.batch, rng)
        pred = eval_mean(space, u, check=False)
        assignment, _ = hungarian_match(pred.data, target)
        diff = pred - target[assignment]
        loss = ad.mean(ad.sum(diff * diff, axis=1))
        grads = ad.backward(loss)
        opt.step({t.name: g for t, g in grads.items()})
        losses.append(float(loss.data))
        if callback is not None:
            callback(it, losses[-1])
    chamfer = mean_shape_chamfer(space, template, cfg.atlas_level, cfg.chamfer_samples, cfg.seed)
    threshold = cfg.tolerance * bbox_diagonal(template)
    result = TemplateFitResult(chamfer < threshold, chamfer, threshold, losses)
    if not result.converged:
        log.warning(result.summary())
    return result
