"""Analysis-by-synthesis fitting of images and image collections.

Every image owns a set of camera hypotheses and a pixel-to-sphere map; every
shape (one per instance, shared by that instance's views) owns a shape and a
texture latent.  The shape and texture networks are shared across the
collection.  Latents are free variables (auto-decoder), so fitting a single
image is the one-instance case of collection fitting with frozen networks.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import (CameraHypothesisSet, WeakPerspectiveCamera, expected_from_losses,
                     initial_rotations, project)
from .errors import ContractError, NumericError
from .geometry import (TriMesh, closest_points_on_triangles, icosphere, random_sphere_points)
from .losses import (KeypointSet, LossWeights, boundary_terms, loss_gcc, loss_kp, loss_mask,
                     loss_texture, loss_texture_fg, rigid_from_points, total_loss)
from .optim import AdamState, optimizer_step
from .renderer import (SoftRasterConfig, boundary_pixels, distance_field, foreground_pixels,
                       hard_rasterize, rasterize_color, soft_silhouette)
from .shape_space import ShapeSpace, eval_deform, eval_mean, eval_shape, extract_mesh, frozen_view
from .surface_map import PixelSurfaceMap, init_map
from .synthetic import Instance, generate_synthetic
from .texture import TextureSpace, texture_at

log = logging.getLogger(__name__)

__all__ = ["FitConfig", "FitState", "FitResult", "Instance", "fit_instance", "fit_collection",
           "generate_synthetic", "optimizer_step", "associate_keypoints"]


@dataclass
class FitConfig:
    iterations: int = 300  # steps per instance (= epochs for collections)
    lr_nets: float = 1e-4
    lr_latent: float = 1e-2
    lr_camera: float = 1e-2
    lr_map: float = 1e-2
    lr_texture: float = 1e-4
    delta_enable_fraction: float = 1.0 / 3.0
    hypotheses: int = 8
    hypothesis_elevation: float = 10.0
    prune_iteration: int | None = None  # default: iterations // 5
    gcc_warmup: int = 20  # iterations in which the cycle term trains only the surface maps
    weights: LossWeights = field(default_factory=LossWeights)
    atlas_level: int = 2
    boundary_samples: int = 500
    boundary_beta: float = 1.0
    map_size: int = 32
    sigma: float | None = None  # soft rasterizer sigma in px^2; None = 1e-4 * W^2
    latent_init: float = 0.01
    train_mean: bool = True  # False pins the mean shape and with it the global scale
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if not 0.0 <= self.delta_enable_fraction <= 1.0:
            raise ContractError("delta_enable_fraction must lie in [0, 1]")
        if self.hypotheses < 1:
            raise ContractError("need at least one camera hypothesis")
        if self.prune_iteration is not None and self.prune_iteration < 0:
            raise ContractError("prune_iteration must be >= 0")

    @property
    def gate_iteration(self):
        return int(math.ceil(self.delta_enable_fraction * self.iterations))

    @property
    def prune_at(self):
        return self.iterations // 5 if self.prune_iteration is None else self.prune_iteration

    def gcc_phase(self, iteration):
        """None before the cycle term starts, "map" while it trains only the maps, then "full".

        With several hypotheses the term starts at pruning: one map per image
        cannot agree with eight different cameras.
        """
        start = self.prune_at if self.hypotheses > 1 else 0
        if iteration < start:
            return None
        return "map" if iteration < start + self.gcc_warmup else "full"

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.as_dict()
        return d


# ----------------------------------------------------------------------------
# per-image state


@dataclass(eq=False)
class FitState:
    """Variables of one image; ``z_s``/``z_t`` are shared by views of one shape."""

    instance: Instance
    z_s: Tensor
    z_t: Tensor
    scale_n: Tensor  # (K,) scale / W
    trans_n: Tensor  # (K, 2) translation / W
    quat: Tensor  # (K, 4)
    logits: Tensor  # (K,)
    smap: PixelSurfaceMap
    active: np.ndarray  # surviving hypothesis indices
    last_losses: np.ndarray | None = None  # per active hypothesis, most recent step
    pruned_at: int | None = None

    @property
    def width(self):
        return self.instance.mask.shape[1]

    def cameras(self, idx=None):
        """Batched tensor camera over hypotheses ``idx`` (default: all active)."""
        idx = self.active if idx is None else np.asarray(idx)
        w = float(self.width)
        if len(idx) == self.scale_n.shape[0]:
            s, t, q = self.scale_n, self.trans_n, self.quat
        else:
            s, t, q = self.scale_n[idx], self.trans_n[idx], self.quat[idx]
        return WeakPerspectiveCamera(s * w, t * w, q)

    def camera_at(self, k) -> WeakPerspectiveCamera:
        w = float(self.width)
        q = self.quat.data[k]
        return WeakPerspectiveCamera(float(self.scale_n.data[k]) * w, self.trans_n.data[k] * w,
                                     q / np.linalg.norm(q))

    def best_index(self):
        if len(self.active) == 1:
            return int(self.active[0])
        if self.last_losses is not None:
            return int(self.active[int(np.argmin(self.last_losses))])
        return int(self.active[int(np.argmax(self.logits.data[self.active]))])

    def best_camera(self) -> WeakPerspectiveCamera:
        return self.camera_at(self.best_index())

    def hypothesis_set(self) -> CameraHypothesisSet:
        cams = [self.camera_at(k) for k in self.active]
        return CameraHypothesisSet(cams, self.logits.data[self.active].copy())

    def prune(self, iteration):
        """Keep only the hypothesis with the lowest loss at this iteration."""
        if self.last_losses is None:
            raise ContractError("cannot prune before any loss was evaluated")
        keep = int(self.active[int(np.argmin(self.last_losses))])
        self.active = np.array([keep])
        self.last_losses = np.array([float(np.min(self.last_losses))])
        self.pruned_at = iteration
        return keep

    def variables(self):
        iid = self.instance.id
        return {f"{iid}/scale": self.scale_n, f"{iid}/trans": self.trans_n,
                f"{iid}/quat": self.quat, f"{iid}/logits": self.logits,
                f"{iid}/map": self.smap.grid}


@dataclass
class _ImageData:
    mask: np.ndarray
    field: np.ndarray
    boundary: np.ndarray
    fg: np.ndarray


@dataclass
class FitResult:
    shape_space: ShapeSpace
    texture_space: TextureSpace
    states: list
    history: list  # one dict of mean component values per epoch
    step_log: list  # one dict per optimization step
    config: FitConfig
    seconds: float = 0.0

    @property
    def epoch_totals(self):
        return [h["total"] for h in self.history]

    def final_losses(self):
        return dict(self.history[-1]) if self.history else {}

    def state(self, instance_id) -> FitState:
        for s in self.states:
            if s.instance.id == instance_id:
                return s
        raise KeyError(instance_id)

    def mesh(self, shape_id, level=3) -> TriMesh:
        z = next(s.z_s for s in self.states if s.instance.shape_id == shape_id)
        return extract_mesh(self.shape_space, z, icosphere(level))


# ----------------------------------------------------------------------------
# initialization


def _mask_moments(mask):
    rows, cols = np.nonzero(mask)
    return np.array([cols.mean() + 0.5, rows.mean() + 0.5]), float(mask.sum())


def init_cameras(space: ShapeSpace, mask, rotations, atlas, z_s=None):
    """Hypothesis scales and translations matching the mask area and centroid.

    Each rotation renders the current shape (hard rasterizer, probe scale W/4)
    and its scale is corrected by the square root of the area ratio.
    """
    h, w = mask.shape
    centroid, area = _mask_moments(mask)
    with ad.no_grad():
        verts = (eval_mean(space, atlas.samples, check=False) if z_s is None
                 else eval_shape(space, atlas.samples, z_s, check=False)).data
    probe = w / 4.0
    scales, trans = [], []
    for q in rotations:
        v2d = project(WeakPerspectiveCamera(probe, np.zeros(2), q), verts).data
        c0 = v2d.mean(axis=0)
        m, _, _, _ = hard_rasterize(v2d - c0 + np.array([w / 2.0, h / 2.0]), atlas.faces, h, w)
        s = probe * math.sqrt(area / max(float(m.sum()), 1.0))
        # put the projected vertex centroid on the mask centroid
        scales.append(s)
        trans.append(centroid - c0 * (s / probe))
    return np.array(scales), np.array(trans)


def _new_state(inst: Instance, space, cfg: FitConfig, atlas, z_s, z_t, map_seed):
    h, w = inst.mask.shape
    rot = initial_rotations(cfg.hypotheses, cfg.hypothesis_elevation)
    scales, trans = init_cameras(space, inst.mask, rot, atlas)
    iid = inst.id
    return FitState(
        instance=inst, z_s=z_s, z_t=z_t,
        scale_n=Tensor(scales / w, requires_grad=True, name=f"{iid}/scale"),
        trans_n=Tensor(trans / w, requires_grad=True, name=f"{iid}/trans"),
        quat=Tensor(rot.copy(), requires_grad=True, name=f"{iid}/quat"),
        logits=Tensor(np.zeros(cfg.hypotheses), requires_grad=True, name=f"{iid}/logits"),
        smap=init_map(cfg.map_size, cfg.map_size, map_seed, (h, w)),
        active=np.arange(cfg.hypotheses))


def _image_data(inst: Instance):
    m = inst.mask
    return _ImageData(m.astype(np.float64), distance_field(m), boundary_pixels(m), foreground_pixels(m))


# ----------------------------------------------------------------------------
# keypoint association


def template_points(template: TriMesh, u):
    """Template surface points at sphere coordinates ``u`` of its own parametrization."""
    if template.sphere_coords is None:
        raise ContractError("template has no sphere coordinates")
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    sc = template.sphere_coords
    tri = sc[template.faces]
    # candidate faces around the nearest vertices, then closest point on the sphere mesh
    out = np.empty((len(u), 3))
    for i, q in enumerate(u):
        near = np.argsort(-(sc @ q))[:6]
        cand = np.flatnonzero(np.isin(template.faces, near).any(axis=1))
        a, b, c = tri[cand, 0], tri[cand, 1], tri[cand, 2]
        p = np.broadcast_to(q, a.shape)
        cp = closest_points_on_triangles(p, a, b, c)
        j = int(np.argmin(np.linalg.norm(cp - p, axis=1)))
        bary = _barycentric(cp[j], a[j], b[j], c[j])
        out[i] = bary @ template.vertices[template.faces[cand[j]]]
    return out


def _barycentric(p, a, b, c):
    m = np.stack([a - c, b - c], axis=1)
    l12, *_ = np.linalg.lstsq(m, p - c, rcond=None)
    return np.array([l12[0], l12[1], 1.0 - l12.sum()])


def associate_keypoints(space: ShapeSpace, points, level=5, refine=100, lr=1e-3):
    """Sphere coordinates whose mean-shape points are closest to 3D ``points``.

    Dense search over an icosphere followed by projected gradient refinement.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    samples = icosphere(level).samples
    with ad.no_grad():
        dense = eval_mean(space, samples, check=False).data
    d = ((dense[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    u = samples[np.argmin(d, axis=0)].copy()
    for _ in range(refine):
        t = Tensor(u, requires_grad=True)
        diff = eval_mean(space, t / ad.l2norm(t, axis=1, keepdims=True), check=False) - points
        loss = ad.sum(diff * diff)
        (g,) = ad.backward(loss, [t])
        u = u - lr * g
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u


def align_keypoint_sets(instances, space: ShapeSpace, template: TriMesh):
    """Replace canonical keypoints (template sphere coordinates) by mean-shape ones."""
    cache = {}
    for inst in instances:
        kps = inst.keypoints
        if kps is None or len(kps.canonical) == 0:
            continue
        key = kps.canonical.tobytes()
        if key not in cache:
            cache[key] = associate_keypoints(space, template_points(template, kps.canonical))
        inst.keypoints = KeypointSet(cache[key], kps.observed, kps.visible, list(kps.names))
    return instances


# ----------------------------------------------------------------------------
# fitting


class _Fitter:
    def __init__(self, instances, shape_space, texture_space, cfg: FitConfig, train_shared):
        if not instances:
            raise ContractError("nothing to fit")
        ids = [inst.id for inst in instances]
        if len(set(ids)) != len(ids):
            raise ContractError("instance ids must be unique")
        self.cfg = cfg
        self.space = shape_space
        self.tspace = texture_space
        self.train_shared = train_shared
        self.atlas = icosphere(cfg.atlas_level)
        self.frozen_space = frozen_view(shape_space)
        self.rng = np.random.default_rng(cfg.seed)
        self.weights = cfg.weights
        h, w = instances[0].mask.shape
        for inst in instances:
            if inst.mask.shape != (h, w):
                raise ContractError("all instances must share one image size")
        self.raster = SoftRasterConfig(h, w, sigma=cfg.sigma)
        self.groups = {}
        for inst in instances:
            self.groups.setdefault(inst.shape_id, []).append(inst)
        self.latents = {}
        for sid in self.groups:
            zs = self.rng.standard_normal(shape_space.latent_dim) * cfg.latent_init
            zt = self.rng.standard_normal(texture_space.latent_dim) * cfg.latent_init
            self.latents[sid] = (Tensor(zs, requires_grad=True, name=f"{sid}/z_s"),
                                 Tensor(zt, requires_grad=True, name=f"{sid}/z_t"))
        self.states = {}
        self.data = {}
        for n, inst in enumerate(instances):
            zs, zt = self.latents[inst.shape_id]
            self.states[inst.id] = _new_state(inst, shape_space, cfg, self.atlas, zs, zt,
                                              map_seed=cfg.seed * 100003 + n)
            self.data[inst.id] = _image_data(inst)
        self.adam = AdamState()
        self.params = {}
        self.lr = {}
        if train_shared:
            nets = shape_space.parameters() if cfg.train_mean else shape_space.deform_net.parameters()
            for name, p in nets.items():
                self._register(name, p, cfg.lr_nets)
            if self._texture_on():
                for name, p in texture_space.parameters().items():
                    self._register(name, p, cfg.lr_texture)
        for sid, (zs, zt) in self.latents.items():
            self._register(zs.name, zs, cfg.lr_latent)
            if self._texture_on():
                self._register(zt.name, zt, cfg.lr_latent)
        for st in self.states.values():
            for name, p in st.variables().items():
                lr = cfg.lr_map if name.endswith("/map") else cfg.lr_camera
                self._register(name, p, lr)
        self.unit_norm = tuple(st.quat.name for st in self.states.values())

    def _register(self, name, p, lr):
        p.name = name
        self.params[name] = p
        self.lr[name] = lr

    def _texture_on(self):
        return self.weights.tex > 0 or self.weights.texfg > 0

    # -- losses ------------------------------------------------------------

    def group_loss(self, sid, iteration):
        cfg = self.cfg
        frozen = iteration < cfg.gate_iteration
        zs, zt = self.latents[sid]
        space = self.space
        u_b = random_sphere_points(cfg.boundary_samples, self.rng)
        samples = np.concatenate([self.atlas.samples, u_b], axis=0)
        nv = self.atlas.samples.shape[0]
        mean_all = eval_mean(space, samples, check=False)
        pts = mean_all + eval_deform(space, samples, zs, frozen=frozen, check=False)
        verts = pts[:nv]
        pb = pts[nv:]
        comps = {}
        rigid = rigid_from_points(verts, mean_all[:nv], self.atlas.edges)
        total = rigid * self.weights.rigid if self.weights.rigid else Tensor(0.0)
        comps["rigid"] = float(rigid.data)
        view_comps = []
        for inst in self.groups[sid]:
            st = self.states[inst.id]
            d = self.data[inst.id]
            cam = st.cameras()
            k = len(st.active)
            terms = {}
            if self.weights.mask:
                sil = soft_silhouette(project(cam, verts), self.atlas.faces, self.raster)
                terms["mask"] = loss_mask(sil, d.mask)
            if self.weights.boundary:
                inside, contour = boundary_terms(project(cam, pb), d.field, d.boundary, cfg.boundary_beta)
                terms["boundary"] = inside + contour
            phase = cfg.gcc_phase(iteration)
            if self.weights.gcc and phase == "full":
                terms["gcc"] = loss_gcc(st.smap, space, zs, cam, d.fg, deform_frozen=frozen)
            elif self.weights.gcc and phase == "map":
                fixed = WeakPerspectiveCamera(Tensor(cam.scale.data), Tensor(cam.translation.data),
                                              Tensor(cam.rotation.data))
                terms["gcc"] = loss_gcc(st.smap, self.frozen_space, Tensor(zs.data), fixed, d.fg)
            if self.weights.kp and inst.keypoints is not None and inst.keypoints.visible.any():
                terms["kp"] = loss_kp(inst.keypoints, space, zs, cam, deform_frozen=frozen)
            per_hyp, vals = total_loss(terms, self.weights)
            if per_hyp.ndim == 0:
                per_hyp = ad.broadcast(per_hyp, (k,))
            if not np.all(np.isfinite(per_hyp.data)):
                raise NumericError(f"iteration {iteration}: non-finite loss for {inst.id}")
            st.last_losses = per_hyp.data.copy()
            logits = st.logits if k == st.logits.shape[0] else st.logits[st.active]
            view_total = expected_from_losses(logits, per_hyp) if k > 1 else per_hyp[0]
            vc = {name: float(np.dot(ad.softmax(logits).data, v.data)) if k > 1 else float(v.data[0])
                  for name, v in vals.items()}
            if self._texture_on():
                tex_total, tex_vals = total_loss(self._texture_terms(st, d, verts, zt), self.weights)
                view_total = view_total + tex_total
                vc.update({n: float(v.data) for n, v in tex_vals.items()})
            view_comps.append(vc)
            total = total + view_total
        for name in view_comps[0]:
            comps[name] = float(np.mean([vc.get(name, 0.0) for vc in view_comps]))
        if not math.isfinite(float(total.data)):
            raise NumericError(f"iteration {iteration}: total loss is not finite")
        comps["total"] = float(total.data)
        return total, comps

    def _texture_terms(self, st: FitState, d: _ImageData, verts, zt):
        terms = {}
        best = st.best_index()
        if self.weights.tex:
            w = float(st.width)
            cam = WeakPerspectiveCamera(st.scale_n[best] * w, st.trans_n[best] * w, st.quat[best])
            texture = texture_at(self.tspace, zt, st.instance.image)
            mesh = (verts, self.atlas.faces, self.atlas.samples)
            color = rasterize_color(mesh, cam, texture, self.raster)
            terms["tex"] = loss_texture(color, st.instance.image, d.mask)
        if self.weights.texfg:
            u = random_sphere_points(self.cfg.boundary_samples, self.rng)
            terms["texfg"] = loss_texture_fg(self.tspace, zt, u, d.field)
        return terms

    # -- optimization ------------------------------------------------------

    def step(self, sid, iteration):
        total, comps = self.group_loss(sid, iteration)
        wrt_names = [n for n, p in self.params.items() if self._involved(n, sid)]
        grads = ad.backward(total, [self.params[n] for n in wrt_names])
        gmap = dict(zip(wrt_names, grads))
        if iteration < self.cfg.gate_iteration:
            for n in self.space.deform_net.parameters():
                gmap.pop(n, None)
        for st in (self.states[i.id] for i in self.groups[sid]):
            if len(st.active) == 1:
                gmap.pop(st.logits.name, None)
        optimizer_step({n: self.params[n] for n in gmap}, gmap, self.adam, self.lr,
                       unit_norm=self.unit_norm)
        return comps

    def _involved(self, name, sid):
        if "/" not in name:
            return True  # shared network parameter
        owner = name.rsplit("/", 1)[0]
        return owner == sid or any(owner == inst.id for inst in self.groups[sid])

    def maybe_prune(self, iteration):
        if iteration != self.cfg.prune_at:
            return
        for sid, insts in self.groups.items():
            if any(self.states[i.id].last_losses is None for i in insts):
                with ad.no_grad():
                    self.group_loss(sid, iteration)
        for st in self.states.values():
            if len(st.active) > 1:
                keep = st.prune(iteration)
                log.debug("pruned %s to hypothesis %d", st.instance.id, keep)


def fit_collection(instances, shape_space: ShapeSpace, texture_space: TextureSpace,
                   cfg: FitConfig | None = None, train_shared=True, callback=None,
                   checkpoint_fn=None, epoch_fn=None) -> FitResult:
    """Jointly fit shared networks and per-image variables.

    One epoch visits every shape group once, in an order shuffled by the fit
    seed; each visit is one Adam step on the group's loss (all its views).
    Hypotheses are pruned to the lowest-loss one at ``cfg.prune_at``.
    ``callback(epoch, summary)`` and ``epoch_fn(epoch, result)`` run after
    every epoch; ``checkpoint_fn(epoch, result)`` every ``cfg.checkpoint_every``
    epochs.
    """
    cfg = cfg or FitConfig()
    start = time.perf_counter()
    fitter = _Fitter(list(instances), shape_space, texture_space, cfg, train_shared)
    order_rng = np.random.default_rng(cfg.seed + 1)
    sids = list(fitter.groups)
    history, step_log = [], []
    result = FitResult(shape_space, texture_space, list(fitter.states.values()), history, step_log, cfg)
    for it in range(cfg.iterations):
        fitter.maybe_prune(it)
        epoch = []
        for j in order_rng.permutation(len(sids)):
            sid = sids[j]
            try:
                comps = fitter.step(sid, it)
            except NumericError as exc:
                raise NumericError(f"fit aborted at iteration {it}: {exc}") from exc
            comps = {"iteration": it, "shape": sid, **comps}
            step_log.append(comps)
            epoch.append(comps)
        keys = [k for k in epoch[0] if k not in ("iteration", "shape")]
        summary = {"epoch": it, **{k: float(np.mean([e.get(k, 0.0) for e in epoch])) for k in keys}}
        history.append(summary)
        if callback is not None:
            callback(it, summary)
        if epoch_fn is not None:
            epoch_fn(it, result)
        if checkpoint_fn is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            checkpoint_fn(it, result)
    result.seconds = time.perf_counter() - start
    return result


def fit_instance(instance: Instance, shape_space: ShapeSpace, texture_space: TextureSpace,
                 cfg: FitConfig | None = None, train_shared=False, callback=None) -> FitResult:
    """Fit one image (all views sharing its ``shape_id`` if a list is given)."""
    instances = instance if isinstance(instance, (list, tuple)) else [instance]
    return fit_collection(instances, shape_space, texture_space, cfg, train_shared, callback)
