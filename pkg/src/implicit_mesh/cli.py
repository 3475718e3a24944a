"""Command-line entry point.

Every command resolves its settings from built-in defaults, then an optional
``--config`` key=value file, then ``--key value`` flags, and echoes the result
as key=value lines that can be fed back through ``--config``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .camera import WeakPerspectiveCamera, quat_from_view
from .errors import ContractError, DataError, GeometryError, NumericError, ParseError
from .evaluation import (cross_pairs, pck_reproject_report, pck_transfer, reconstruction_iou,
                         self_pairs, transfer_keypoints, views_from_checkpoint)
from .geometry import TriMesh, ellipsoid_mesh, icosphere, load_obj, save_obj
from .losses import COMPONENTS, LossWeights
from .pipeline import FitConfig, align_keypoint_sets, fit_collection
from .renderer import SoftRasterConfig, rasterize_surface_coords
from .reporting import dump_renders, plot_losses, plot_metric, plot_transfer, write_loss_csv
from .shape_space import TemplateFitConfig, build_shape_space, extract_mesh, fit_template
from .storage import (Dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, save_png,
                      write_csv)
from .synthetic import DeformSpec, default_template, generate_synthetic
from .texture import build_texture_space

log = logging.getLogger("implicit_mesh")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_HEADER = "# implicit_mesh config v1"


class UsageError(Exception):
    """Bad command line or configuration."""


# ----------------------------------------------------------------------------
# settings


def _fit_defaults():
    cfg = FitConfig()
    out = {f.name: getattr(cfg, f.name) for f in fields(FitConfig)
           if f.name not in ("weights", "checkpoint_every")}
    out.update({f"w_{k}": v for k, v in cfg.weights.as_dict().items()})
    return out


COMMON = {"seed": 0, "log_level": "warning"}

COMMANDS = {
    "init-template": {
        "template": "default", "out": "template_out", "iterations": 600, "lr": 5e-3, "lr_final": 1e-5,
        "batch": 1000, "tolerance": 0.02, "latent_dim": 16, "hidden": 64, "texture_latent_dim": 16,
    },
    "synth": {
        "template": "default", "out": "synth_out", "instances": 8, "views": 4, "size": 64,
        "keypoints": 12, "deform": True,
    },
    "fit": {
        "data": "", "checkpoint": "", "out": "fit_out", "id": "", "dump_every": 0,
        "align_keypoints": True, **_fit_defaults(),
    },
    "fit-collection": {
        "data": "", "checkpoint": "", "out": "fit_out", "dump_every": 0, "checkpoint_every": 0,
        "align_keypoints": True, **_fit_defaults(),
    },
    "render": {
        "checkpoint": "", "id": "", "out": "render_out", "views": "", "size": 0, "level": 4,
    },
    "eval": {
        "checkpoint": "", "data": "", "out": "eval_out", "threshold": 0.1, "resolution": 32,
        "level": 4, "align_keypoints": True,
    },
    "transfer": {
        "checkpoint": "", "data": "", "src": "", "tgt": "", "out": "transfer_out", "threshold": 0.1,
        "level": 4,
    },
}
for _d in COMMANDS.values():
    for _k, _v in COMMON.items():
        _d.setdefault(_k, _v)

REQUIRED = {
    "fit": ("data", "checkpoint", "id"),
    "fit-collection": ("data", "checkpoint"),
    "render": ("checkpoint", "id"),
    "eval": ("checkpoint", "data"),
    "transfer": ("checkpoint", "data", "src", "tgt"),
}

HELP = {
    "init-template": "fit the mean shape network to a template mesh",
    "synth": "render a synthetic dataset of deformed templates",
    "fit": "fit one image (or all views of one shape) with frozen networks",
    "fit-collection": "jointly fit shared networks and per-image variables",
    "render": "render a fitted instance to PNG and export its mesh as OBJ",
    "eval": "keypoint reprojection/transfer accuracy and voxel IoU",
    "transfer": "transfer keypoints between two fitted images",
}


def _coerce(key, raw, default):
    if isinstance(raw, str):
        text = raw.strip()
    else:
        return raw
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if default is None:
            if text.lower() in ("none", ""):
                return None
            return int(text) if text.lstrip("-").isdigit() else float(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing file: {p}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command, file_values, flag_values):
    defaults = COMMANDS[command]
    resolved = dict(defaults)
    for source in (file_values, flag_values):
        for k, v in source.items():
            if k not in defaults:
                raise UsageError(f"unknown setting {k!r} for {command}")
            resolved[k] = _coerce(k, v, defaults[k])
    for k in REQUIRED.get(command, ()):
        if resolved[k] in ("", None):
            raise UsageError(f"{command} needs --{k.replace('_', '-')}")
    return resolved


def format_config(command, resolved):
    lines = [CONFIG_HEADER, f"# command = {command}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in resolved.items()]
    return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def fit_config_from(resolved) -> FitConfig:
    names = {f.name for f in fields(FitConfig)}
    kwargs = {k: v for k, v in resolved.items() if k in names}
    kwargs["weights"] = LossWeights(**{c: resolved[f"w_{c}"] for c in COMPONENTS})
    return FitConfig(**kwargs)


# ----------------------------------------------------------------------------
# helpers


def _template(spec, level=3) -> TriMesh:
    """Builtin template name or OBJ path."""
    if spec == "default":
        return default_template(level)
    if spec == "sphere":
        return ellipsoid_mesh((1.0, 1.0, 1.0), level)
    if spec == "ellipsoid":
        return ellipsoid_mesh((1.0, 0.6, 0.4), level)
    path = Path(spec)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        mesh = load_obj(path)
    except (ParseError, GeometryError) as exc:
        raise DataError(f"{path}: {exc}") from None
    if len(mesh.faces) == 0:
        raise DataError(f"{path}: template has no faces")
    if mesh.sphere_coords is None:
        # star-shaped templates: radial projection gives the sphere parametrization
        c = mesh.vertices.mean(axis=0)
        d = mesh.vertices - c
        n = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(n == 0):
            raise DataError(f"{path}: cannot derive sphere coordinates (vertex at the centroid)")
        mesh = TriMesh(mesh.vertices, mesh.faces, d / n)
    return mesh


def _prepare(out):
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _align(dataset: Dataset, space):
    if dataset.template is None or dataset.template.sphere_coords is None:
        log.info("no template.obj in the dataset; canonical keypoints used as given")
        return
    align_keypoint_sets(dataset.instances, space, dataset.template)


def _progress(every=10):
    def cb(epoch, summary):
        if epoch % every == 0:
            parts = " ".join(f"{k}={v:.4g}" for k, v in summary.items() if k != "epoch")
            print(f"epoch {epoch}: {parts}", flush=True)
    return cb


# ----------------------------------------------------------------------------
# commands


def cmd_init_template(c):
    out = _prepare(c["out"])
    template = _template(c["template"])
    space = build_shape_space(c["latent_dim"], c["hidden"], seed=c["seed"])
    tcfg = TemplateFitConfig(iterations=c["iterations"], batch=c["batch"], lr=c["lr"],
                             lr_final=c["lr_final"], tolerance=c["tolerance"], seed=c["seed"])
    res = fit_template(space, template, tcfg)
    tspace = build_texture_space(c["texture_latent_dim"], c["hidden"], seed=c["seed"] + 1)
    meta = {"chamfer": res.chamfer, "threshold": res.threshold, "converged": res.converged}
    save_checkpoint(out / "template.ckpt.json", space, tspace, config=c, meta=meta)
    save_obj(extract_mesh(space, None, icosphere(3)), out / "mean_shape.obj")
    write_csv(out / "template_losses.csv", "template_losses", ["iteration", "matching_loss"],
              [[i, v] for i, v in enumerate(res.losses)])
    plot_losses([{"epoch": i, "matching": v} for i, v in enumerate(res.losses)], out / "template_losses.png",
                "template matching loss")
    print(res.summary())
    return EXIT_OK


def cmd_synth(c):
    out = _prepare(c["out"])
    template = _template(c["template"])
    spec = DeformSpec() if c["deform"] else DeformSpec.none()
    ds = generate_synthetic(template, c["instances"], c["views"], spec, seed=c["seed"],
                            image_size=(c["size"], c["size"]), n_keypoints=c["keypoints"])
    save_dataset(out, ds.instances, ds.cameras, ds.meshes, ds.template)
    print(f"wrote {len(ds.instances)} images of {len(ds.meshes)} shapes to {out}")
    return EXIT_OK


def _run_fit(c, instances, dataset, train_shared):
    out = _prepare(c["out"])
    ckpt = load_checkpoint(c["checkpoint"])
    space = ckpt.shape_space
    tspace = ckpt.texture_space or build_texture_space(seed=c["seed"] + 1)
    cfg = fit_config_from(c)
    if cfg.weights.kp > 0 and c["align_keypoints"]:
        _align(Dataset(instances, template=dataset.template), space)
    cfg.checkpoint_every = c.get("checkpoint_every", 0)
    dump_every = c["dump_every"]

    def checkpoint_fn(epoch, result):
        save_checkpoint(out / f"checkpoint_{epoch + 1:04d}.json", result.shape_space, result.texture_space,
                        result.states, config=c)

    def epoch_fn(epoch, result):
        if dump_every and (epoch + 1) % dump_every == 0:
            dump_renders(result, out / "renders", epoch + 1)

    res = fit_collection(instances, space, tspace, cfg, train_shared=train_shared, callback=_progress(),
                         checkpoint_fn=checkpoint_fn, epoch_fn=epoch_fn)
    save_checkpoint(out / "fit.ckpt.json", res.shape_space, res.texture_space, res.states, config=c,
                    meta={"final_losses": res.final_losses(), "seconds": res.seconds})
    write_loss_csv(res.history, out / "losses.csv")
    write_loss_csv(res.step_log, out / "steps.csv")
    plot_losses(res.history, out / "losses.png")
    dump_renders(res, out / "renders", cfg.iterations)
    final = res.final_losses()
    print("final " + " ".join(f"{k}={v:.6g}" for k, v in final.items() if k != "epoch"))
    print(f"fit time {res.seconds:.1f} s")
    return EXIT_OK


def cmd_fit(c):
    ds = load_dataset(c["data"])
    try:
        inst = ds.instance(c["id"])
    except KeyError:
        raise DataError(f"no image {c['id']!r} in {c['data']}") from None
    group = [i for i in ds.instances if i.shape_id == inst.shape_id]
    return _run_fit(c, group, ds, train_shared=False)


def cmd_fit_collection(c):
    ds = load_dataset(c["data"])
    if len(ds.instances) < 2:
        raise DataError(f"{c['data']}: a collection needs at least two images")
    return _run_fit(c, ds.instances, ds, train_shared=True)


def _parse_views(text):
    """``az:el,az:el`` in degrees."""
    views = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            az, el = (float(v) for v in part.split(":"))
        except ValueError:
            raise UsageError(f"views: expected az:el pairs, got {part!r}") from None
        views.append((az, el))
    return views


def cmd_render(c):
    out = _prepare(c["out"])
    ckpt = load_checkpoint(c["checkpoint"])
    rec = ckpt.record(c["id"])
    mesh = extract_mesh(ckpt.shape_space, rec.z_s, icosphere(c["level"]))
    save_obj(mesh, out / f"{rec.id}.obj")
    h, w = rec.image_size
    if c["size"]:
        h = w = c["size"]
    base = rec.best_camera()
    ratio = w / rec.image_size[1]
    cams = [("fit", WeakPerspectiveCamera(base.scale * ratio, np.asarray(base.translation) * ratio,
                                         base.rotation))]
    for az, el in _parse_views(c["views"]):
        q = quat_from_view(math.radians(az), math.radians(el))
        cams.append((f"az{az:g}_el{el:g}", WeakPerspectiveCamera(base.scale * ratio, np.array([w / 2, h / 2]), q)))
    for name, cam in cams:
        buf = rasterize_surface_coords(mesh, cam, SoftRasterConfig(h, w))
        valid = np.asarray(buf.valid, dtype=bool)
        rgb = np.where(valid[..., None], (buf.surface_coords + 1.0) / 2.0, 1.0)
        save_png(out / f"{rec.id}_{name}.png", rgb)
        save_png(out / f"{rec.id}_{name}_mask.png", valid)
    print(f"wrote {len(cams)} renders and {rec.id}.obj to {out}")
    return EXIT_OK


def _eval_inputs(c):
    ckpt = load_checkpoint(c["checkpoint"])
    ds = load_dataset(c["data"])
    if c.get("align_keypoints", True):
        _align(ds, ckpt.shape_space)
    views = views_from_checkpoint(ckpt)
    missing = [i.id for i in ds.instances if i.id not in views]
    if missing:
        raise DataError(f"checkpoint lacks fitted images {missing[:3]}")
    return ckpt, ds, views


def cmd_eval(c):
    out = _prepare(c["out"])
    ckpt, ds, views = _eval_inputs(c)
    kps = {i.id: i.keypoints for i in ds.instances if i.keypoints is not None}
    reports = []
    if kps:
        reports.append(("pck_r", pck_reproject_report(views, kps, c["threshold"])))
        ids = [i for i in views if i in kps]
        reports.append(("pck_t_self", pck_transfer(views, kps, self_pairs(ids), c["threshold"], c["level"])))
        sub = {i: views[i] for i in ids}
        if cross_pairs(sub):
            try:
                reports.append(("pck_t_cross", pck_transfer(views, kps, cross_pairs(sub), c["threshold"],
                                                            c["level"])))
            except ContractError:
                log.warning("no cross-shape pair shares a visible keypoint; cross transfer not scored")
    if ds.meshes:
        fitted = {}
        for v in views.values():
            fitted.setdefault(v.shape_id, v.mesh(3))
        reports.append(("iou", reconstruction_iou(fitted, ds.meshes, c["resolution"])))
    if not reports:
        raise DataError(f"{c['data']}: nothing to evaluate (no keypoints, no ground-truth meshes)")
    for name, rep in reports:
        rep.to_csv(out / f"{name}.csv")
        plot_metric(rep, out / f"{name}.png")
        print(rep.summary())
    return EXIT_OK


def cmd_transfer(c):
    out = _prepare(c["out"])
    ckpt, ds, views = _eval_inputs({**c, "align_keypoints": False})
    for key in ("src", "tgt"):
        if c[key] not in views:
            raise DataError(f"no fitted image {c[key]!r}")
    src, tgt = ds.instance(c["src"]), ds.instance(c["tgt"])
    if src.keypoints is None:
        raise DataError(f"image {src.id} has no keypoints to transfer")
    vis = np.flatnonzero(src.keypoints.visible)
    pts = src.keypoints.observed[vis]
    pred, found = transfer_keypoints(views[src.id], views[tgt.id], pts, c["level"])
    gt = tgt.keypoints.observed[vis] if tgt.keypoints is not None else None
    rows = []
    for j, k in enumerate(vis):
        err = float(np.linalg.norm(pred[j] - gt[j])) if (gt is not None and found[j]) else float("nan")
        tv = bool(tgt.keypoints.visible[k]) if tgt.keypoints is not None else False
        rows.append([src.keypoints.names[k], float(pts[j, 0]), float(pts[j, 1]), float(pred[j, 0]),
                     float(pred[j, 1]), int(found[j]), int(tv), err])
    write_csv(out / f"{src.id}_to_{tgt.id}.csv", "transfer",
              ["kp_name", "src_x", "src_y", "pred_x", "pred_y", "found", "tgt_visible", "error_px"], rows)
    plot_transfer(src.image, tgt.image, pts, pred, gt, out / f"{src.id}_to_{tgt.id}.png")
    thr = c["threshold"] * max(tgt.mask.shape)
    scored = [r for r in rows if r[6] and r[5]]
    if gt is not None and scored:
        hit = np.mean([r[7] <= thr for r in scored]) * 100.0
        print(f"transferred {int(found.sum())}/{len(vis)} keypoints; "
              f"{hit:.1f}% of target-visible within {thr:g} px (threshold x max(H, W))")
    else:
        print(f"transferred {int(found.sum())}/{len(vis)} keypoints")
    return EXIT_OK


HANDLERS = {
    "init-template": cmd_init_template, "synth": cmd_synth, "fit": cmd_fit,
    "fit-collection": cmd_fit_collection, "render": cmd_render, "eval": cmd_eval,
    "transfer": cmd_transfer,
}


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="implicit-mesh", description="Implicit mesh inverse rendering toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, defaults in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="key=value settings file (flags override it)")
        for key, value in defaults.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar=type(value).__name__.upper()
                           if value is not None else "VALUE", help=f"default: {_fmt(value)}")
    return parser


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        if not argv or argv[0] in ("-h", "--help"):
            parser.print_help()
            return EXIT_OK if argv else EXIT_USAGE
        try:
            ns = parser.parse_args(argv)
        except SystemExit as exc:  # --help inside a subcommand
            return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
        values = vars(ns)
        command = values.pop("command")
        if command is None:
            raise UsageError("missing command")
        config_path = values.pop("config", None)
        file_values = read_config_file(config_path) if config_path else {}
        resolved = resolve(command, file_values, values)
        logging.basicConfig(level=getattr(logging, str(resolved["log_level"]).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        echo = format_config(command, resolved)
        print(echo, end="", flush=True)
        if "out" in resolved:
            out = _prepare(resolved["out"])
            # the saved copy omits the output path so identical runs give identical trees
            saved = {k: v for k, v in resolved.items() if k != "out"}
            (out / "config.txt").write_text(format_config(command, saved))
        return HANDLERS[command](resolved)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, GeometryError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
