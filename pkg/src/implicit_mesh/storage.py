"""On-disk formats: PNG images and masks, dataset directories, CSV tables, checkpoints.

Every text format starts with a version line (``# implicit_mesh <kind> v1`` for
CSV, a ``format`` field for JSON checkpoints).  Readers accept CSV files
without the version line so that hand-made keypoint tables load too.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from .autodiff import Tensor
from .camera import WeakPerspectiveCamera
from .errors import ContractError, DataError, GeometryError, ParseError
from .geometry import TriMesh, load_obj, save_obj
from .losses import KeypointSet
from .shape_space import MLP, ShapeSpace
from .surface_map import PixelSurfaceMap
from .synthetic import Instance
from .texture import TextureSpace

CHECKPOINT_FORMAT = "implicit_mesh checkpoint v1"
CSV_VERSION = "v1"
PNG_TAG = "implicit_mesh png v1"


# ----------------------------------------------------------------------------
# PNG


def save_png(path, array):
    """Write a float image in [0, 1] (H, W[, 3]) or a boolean mask as 8-bit PNG."""
    a = np.asarray(array)
    if a.dtype == bool:
        a8 = np.where(a, 255, 0).astype(np.uint8)
    else:
        a8 = np.clip(np.round(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if a8.ndim not in (2, 3):
        raise ContractError(f"cannot write an array of shape {a.shape} as PNG")
    info = PngImagePlugin.PngInfo()
    info.add_text("Software", PNG_TAG)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a8).save(path, format="PNG", pnginfo=info)


def _open_png(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from None


def load_image(path):
    """RGB image as floats in [0, 1], shape (H, W, 3)."""
    im = _open_png(path)
    return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path):
    """Binary mask: 8-bit gray values above 127 are foreground."""
    im = _open_png(path)
    return np.asarray(im.convert("L")) > 127


# ----------------------------------------------------------------------------
# CSV


def write_csv(path, kind, header, rows):
    """CSV with a version line, a header row and ``repr``-exact floats."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# implicit_mesh {kind} {CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path, required=()):
    """Rows of a CSV file as dicts; ``#`` lines are skipped."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.lstrip().startswith("#") and ln.strip()]
    reader = csv.DictReader(io.StringIO("".join(lines)))
    rows = list(reader)
    missing = [c for c in required if c not in (reader.fieldnames or [])]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return rows


def _float(row, key, path):
    try:
        return float(row[key])
    except (TypeError, ValueError):
        raise DataError(f"{path}: bad number {row.get(key)!r} in column {key}") from None


def _flag(value, path):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise DataError(f"{path}: bad visibility flag {value!r}")


# ----------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Images on disk plus optional ground truth (synthetic datasets only)."""

    instances: list
    cameras: dict = field(default_factory=dict)  # id -> WeakPerspectiveCamera
    meshes: dict = field(default_factory=dict)  # shape_id -> TriMesh
    template: TriMesh | None = None
    root: Path | None = None

    def instance(self, iid) -> Instance:
        for inst in self.instances:
            if inst.id == iid:
                return inst
        raise KeyError(iid)


def save_dataset(root, instances, cameras=None, meshes=None, template=None):
    """Write a dataset directory.

    ``cameras`` (list aligned with ``instances`` or id -> camera) and
    ``meshes`` (shape_id -> TriMesh) are optional ground truth.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for inst in instances:
        save_png(root / "images" / f"{inst.id}.png", inst.image)
        save_png(root / "masks" / f"{inst.id}.png", inst.mask)
    write_csv(root / "instances.csv", "instances", ["id", "shape_id"],
              [[inst.id, inst.shape_id] for inst in instances])
    with_kp = [inst for inst in instances if inst.keypoints is not None]
    if with_kp:
        ref = with_kp[0].keypoints
        write_csv(root / "canonical_keypoints.csv", "canonical_keypoints", ["kp_name", "ux", "uy", "uz"],
                  [[n, *map(float, u)] for n, u in zip(ref.names, ref.canonical)])
        rows = []
        for inst in with_kp:
            k = inst.keypoints
            for n, xy, vis in zip(k.names, k.observed, k.visible):
                rows.append([inst.id, n, float(xy[0]), float(xy[1]), int(bool(vis))])
        write_csv(root / "keypoints.csv", "keypoints", ["id", "kp_name", "x", "y", "visible"], rows)
    if cameras is not None:
        if not isinstance(cameras, dict):
            cameras = {inst.id: cam for inst, cam in zip(instances, cameras)}
        write_csv(root / "cameras.csv", "cameras", ["id", "s", "tx", "ty", "qw", "qx", "qy", "qz"],
                  [[iid, *cam.to_record()] for iid, cam in cameras.items()])
    if meshes:
        (root / "meshes").mkdir(exist_ok=True)
        for sid, mesh in meshes.items():
            save_obj(mesh, root / "meshes" / f"{sid}.obj")
    if template is not None:
        save_obj(template, root / "template.obj")
    return root


def _dataset_ids(root):
    if (root / "instances.csv").is_file():
        rows = read_csv(root / "instances.csv", required=("id",))
        return [(r["id"], r.get("shape_id") or r["id"]) for r in rows]
    images = root / "images"
    if not images.is_dir():
        raise DataError(f"missing directory: {images}")
    return [(p.stem, p.stem) for p in sorted(images.glob("*.png"))]


def load_dataset(root) -> Dataset:
    """Read a dataset directory written by :func:`save_dataset` or by hand."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"missing dataset directory: {root}")
    ids = _dataset_ids(root)
    if not ids:
        raise DataError(f"no images found under {root / 'images'}")
    keypoints = _load_keypoints(root)
    instances = []
    for iid, sid in ids:
        image = load_image(root / "images" / f"{iid}.png")
        mask = load_mask(root / "masks" / f"{iid}.png")
        if image.shape[:2] != mask.shape:
            raise DataError(f"image and mask sizes differ for {iid}")
        if not mask.any():
            raise DataError(f"empty mask: {root / 'masks' / f'{iid}.png'}")
        instances.append(Instance(image, mask, iid, keypoints.get(iid), sid))
    cameras = {}
    if (root / "cameras.csv").is_file():
        path = root / "cameras.csv"
        for r in read_csv(path, required=("id", "s", "tx", "ty", "qw", "qx", "qy", "qz")):
            rec = [_float(r, k, path) for k in ("s", "tx", "ty", "qw", "qx", "qy", "qz")]
            cameras[r["id"]] = WeakPerspectiveCamera.from_record(rec)
    meshes = {}
    if (root / "meshes").is_dir():
        for p in sorted((root / "meshes").glob("*.obj")):
            meshes[p.stem] = _load_mesh(p)
    template = _load_mesh(root / "template.obj") if (root / "template.obj").is_file() else None
    return Dataset(instances, cameras, meshes, template, root)


def _load_mesh(path):
    try:
        return load_obj(path)
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except (ParseError, GeometryError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_keypoints(root):
    kp_path, can_path = root / "keypoints.csv", root / "canonical_keypoints.csv"
    if not kp_path.is_file():
        return {}
    if not can_path.is_file():
        raise DataError(f"missing file: {can_path} (needed by {kp_path.name})")
    canon = {}
    for r in read_csv(can_path, required=("kp_name", "ux", "uy", "uz")):
        u = np.array([_float(r, k, can_path) for k in ("ux", "uy", "uz")])
        n = np.linalg.norm(u)
        if n == 0:
            raise DataError(f"{can_path}: zero canonical coordinate for {r['kp_name']}")
        canon[r["kp_name"]] = u / n
    names = list(canon)
    per_id = {}
    for r in read_csv(kp_path, required=("id", "kp_name", "x", "y", "visible")):
        if r["kp_name"] not in canon:
            raise DataError(f"{kp_path}: keypoint {r['kp_name']!r} has no canonical coordinate")
        entry = per_id.setdefault(r["id"], {})
        entry[r["kp_name"]] = (_float(r, "x", kp_path), _float(r, "y", kp_path), _flag(r["visible"], kp_path))
    out = {}
    for iid, entry in per_id.items():
        obs = np.zeros((len(names), 2))
        vis = np.zeros(len(names), dtype=bool)
        for j, n in enumerate(names):
            if n in entry:
                obs[j] = entry[n][:2]
                vis[j] = entry[n][2]
        out[iid] = KeypointSet(np.array([canon[n] for n in names]), obs, vis, list(names))
    return out


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class InstanceRecord:
    """Per-image variables restored from a checkpoint."""

    id: str
    shape_id: str
    z_s: np.ndarray
    z_t: np.ndarray
    cameras: list  # one WeakPerspectiveCamera per hypothesis
    logits: np.ndarray
    active: np.ndarray
    smap: PixelSurfaceMap

    def best_camera(self) -> WeakPerspectiveCamera:
        if len(self.active) == 1:
            return self.cameras[int(self.active[0])]
        act = np.asarray(self.active)
        return self.cameras[int(act[np.argmax(self.logits[act])])]

    @property
    def image_size(self):
        return self.smap.image_size


@dataclass
class Checkpoint:
    shape_space: ShapeSpace
    texture_space: TextureSpace | None
    instances: dict  # id -> InstanceRecord
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def record(self, iid) -> InstanceRecord:
        try:
            return self.instances[iid]
        except KeyError:
            raise DataError(f"checkpoint has no instance {iid!r}") from None


def _net_to_json(net: MLP):
    return {"widths": list(net.widths), "prefix": net.prefix,
            "params": {name: p.data.tolist() for name, p in net.parameters().items()}}


def _net_from_json(d):
    net = MLP(d["widths"], np.random.default_rng(0), prefix=d["prefix"])
    params = net.parameters()
    for name, value in d["params"].items():
        if name not in params:
            raise DataError(f"checkpoint parameter {name!r} does not fit the network")
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != params[name].data.shape:
            raise DataError(f"checkpoint parameter {name!r} has shape {arr.shape}")
        params[name].data = arr
    return net


def _state_to_json(st):
    """FitState or InstanceRecord -> JSON dict."""
    if isinstance(st, InstanceRecord):
        cams = [c.to_record() for c in st.cameras]
        return {"id": st.id, "shape_id": st.shape_id, "z_s": list(map(float, st.z_s)),
                "z_t": list(map(float, st.z_t)), "cameras": cams, "logits": list(map(float, st.logits)),
                "active": [int(a) for a in st.active], "map": st.smap.grid.data.tolist(),
                "image_size": list(st.smap.image_size)}
    k = st.scale_n.shape[0]
    cams = [st.camera_at(i).to_record() for i in range(k)]
    return {"id": st.instance.id, "shape_id": st.instance.shape_id,
            "z_s": st.z_s.data.tolist(), "z_t": st.z_t.data.tolist(), "cameras": cams,
            "logits": st.logits.data.tolist(), "active": [int(a) for a in st.active],
            "map": st.smap.grid.data.tolist(), "image_size": list(st.smap.image_size)}


def _state_from_json(d):
    try:
        cams = [WeakPerspectiveCamera.from_record(r) for r in d["cameras"]]
        grid = np.asarray(d["map"], dtype=np.float64)
        return InstanceRecord(d["id"], d["shape_id"], np.asarray(d["z_s"], dtype=np.float64),
                              np.asarray(d["z_t"], dtype=np.float64), cams,
                              np.asarray(d["logits"], dtype=np.float64), np.asarray(d["active"], dtype=np.int64),
                              PixelSurfaceMap(Tensor(grid), tuple(d["image_size"])))
    except (KeyError, TypeError, ValueError, ContractError) as exc:
        raise DataError(f"malformed instance record: {exc}") from None


def save_checkpoint(path, shape_space: ShapeSpace, texture_space: TextureSpace | None = None,
                    states=(), config=None, meta=None):
    """JSON checkpoint of shared networks and per-image variables.

    Floats are written with ``repr`` precision, so a reload is bit-exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "shape_space": {"latent_dim": shape_space.latent_dim,
                        "mean": _net_to_json(shape_space.mean_net),
                        "deform": _net_to_json(shape_space.deform_net)},
        "texture_space": None if texture_space is None else
        {"latent_dim": texture_space.latent_dim, "flow": _net_to_json(texture_space.flow_net)},
        "instances": [_state_to_json(st) for st in states],
        "config": config or {},
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a JSON checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format {doc.get('format') if isinstance(doc, dict) else None!r}")
    try:
        s = doc["shape_space"]
        space = ShapeSpace(_net_from_json(s["mean"]), _net_from_json(s["deform"]), int(s["latent_dim"]))
        t = doc.get("texture_space")
        tspace = None if t is None else TextureSpace(_net_from_json(t["flow"]), int(t["latent_dim"]))
    except (KeyError, TypeError, ValueError, ContractError) as exc:
        raise DataError(f"{path}: malformed network record ({exc})") from None
    records = {}
    for d in doc.get("instances", []):
        rec = _state_from_json(d)
        records[rec.id] = rec
    return Checkpoint(space, tspace, records, doc.get("config", {}), doc.get("meta", {}))
