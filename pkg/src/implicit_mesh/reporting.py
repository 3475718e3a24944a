"""Run artifacts: loss logs, render dumps and matplotlib figures written to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import autodiff as ad  # noqa: E402
from .camera import project  # noqa: E402
from .geometry import icosphere  # noqa: E402
from .renderer import hard_rasterize  # noqa: E402
from .shape_space import shape_vertices  # noqa: E402
from .storage import save_png, write_csv  # noqa: E402
from .surface_map import map_to_rgb  # noqa: E402

STYLE = {"figure.dpi": 100, "font.size": 9, "axes.grid": True, "grid.alpha": 0.3,
         "axes.spines.top": False, "axes.spines.right": False}


def write_loss_csv(history, path):
    """One row per epoch; columns are the union of logged components."""
    keys = []
    for h in history:
        keys += [k for k in h if k not in keys]
    write_csv(path, "losses", keys, [[h.get(k, "") for k in keys] for h in history])
    return path


def predicted_mask(space, z_s, cam, size, level=3):
    atlas = icosphere(level)
    with ad.no_grad():
        v = shape_vertices(space, z_s, atlas).data
        v2d = project(cam, v).data
    return hard_rasterize(v2d, atlas.faces, size[0], size[1])[0]


def _outline(mask):
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def render_panel(image, target_mask, pred_mask, smap=None):
    """Image with the predicted outline in red, the target/predicted mask overlay, and the surface map."""
    img = np.asarray(image, dtype=np.float64).copy()
    img[_outline(pred_mask)] = (1.0, 0.0, 0.0)
    overlay = np.ones(img.shape)
    t = np.asarray(target_mask, dtype=bool)
    p = np.asarray(pred_mask, dtype=bool)
    overlay[t & p] = (0.5, 0.5, 0.5)
    overlay[t & ~p] = (0.2, 0.4, 1.0)
    overlay[~t & p] = (1.0, 0.5, 0.2)
    parts = [img, overlay]
    if smap is not None:
        parts.append(map_to_rgb(smap, t))
    gap = np.ones((img.shape[0], 2, 3))
    row = []
    for part in parts:
        row += [part, gap]
    return np.concatenate(row[:-1], axis=1)


def dump_renders(result, directory, epoch):
    """One PNG per image: current fit against its mask."""
    out = Path(directory) / f"epoch_{epoch:04d}"
    for st in result.states:
        inst = st.instance
        pm = predicted_mask(result.shape_space, st.z_s, st.best_camera(), inst.mask.shape)
        save_png(out / f"{inst.id}.png", render_panel(inst.image, inst.mask, pm, st.smap))
    return out


def plot_losses(history, path, title="training losses"):
    """Per-component loss curves on a log axis."""
    skip = {"epoch", "iteration", "shape"}
    keys = [k for k in (history[0] if history else {}) if k not in skip]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        epochs = [h.get("epoch", i) for i, h in enumerate(history)]
        for k in keys:
            vals = np.array([h.get(k, np.nan) for h in history], dtype=np.float64)
            if np.all(vals[np.isfinite(vals)] > 0):
                ax.plot(epochs, vals, label=k, linewidth=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_metric(report, path):
    """Bar chart of per-entry metric values with the mean as a line."""
    keys = list(report.values)
    vals = [report.values[k] for k in keys]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.25 * len(keys) + 2), 3.5))
        ax.bar(range(len(keys)), vals, color="#4477aa")
        ax.axhline(report.mean, color="#cc3311", linewidth=1.2, label=f"mean {report.mean:.3g}")
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys, rotation=90, fontsize=6)
        title = report.metric if report.threshold is None else f"{report.metric} @ {report.threshold:g}"
        ax.set_title(title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_transfer(src_image, tgt_image, src_points, pred_points, gt_points, path):
    """Source keypoints and their transferred locations on the target image."""
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(1, 2, figsize=(6, 3))
        axes[0].imshow(src_image)
        axes[0].scatter(src_points[:, 0] - 0.5, src_points[:, 1] - 0.5, s=12, c="#cc3311")
        axes[0].set_title("source")
        axes[1].imshow(tgt_image)
        ok = np.all(np.isfinite(pred_points), axis=1)
        if gt_points is not None:
            axes[1].scatter(gt_points[:, 0] - 0.5, gt_points[:, 1] - 0.5, s=12, facecolors="none",
                            edgecolors="#228833", label="annotation")
        axes[1].scatter(pred_points[ok, 0] - 0.5, pred_points[ok, 1] - 0.5, s=12, c="#cc3311",
                        label="transferred")
        axes[1].set_title("target")
        axes[1].legend(fontsize=6, loc="lower right")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path
