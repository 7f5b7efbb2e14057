"""Metric tables, CSV output and matplotlib figures written to files."""
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ParameterError  # noqa: E402
from .optim.metrics import psnr, ssim  # noqa: E402


def write_csv(path, rows, columns=None):
    """One header line plus one line per row; missing cells are left empty."""
    rows = list(rows)
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return columns


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def eval_metrics(renders, targets, masks=None, depths=None, depth_targets=None, names=None, skip_empty=False):
    """Per-frame PSNR / SSIM (and depth MAE when depths are given) plus a mean row.

    Metrics are taken over ``masks`` (e.g. the rasterization coverage) when given.
    With ``skip_empty`` a frame whose mask is empty gets NaN instead of raising,
    and the mean row averages the remaining frames.
    """
    renders, targets = list(renders), list(targets)
    n = len(renders)
    if len(targets) != n:
        raise ParameterError(f"{n} renders but {len(targets)} targets")
    masks = [None] * n if masks is None else list(masks)
    if len(masks) != n:
        raise ParameterError(f"{n} renders but {len(masks)} masks")
    with_depth = depths is not None
    if with_depth:
        depths, depth_targets = list(depths), list(depth_targets)
        if len(depths) != n or len(depth_targets) != n:
            raise ParameterError("depth lists must match the image count")
    names = list(range(n)) if names is None else list(names)
    rows = []
    for i in range(n):
        if skip_empty and masks[i] is not None and not np.any(masks[i]):
            r = {"name": names[i], "psnr": float("nan"), "ssim": float("nan")}
        else:
            r = {"name": names[i], "psnr": psnr(targets[i], renders[i], masks[i]),
                 "ssim": ssim(targets[i], renders[i], masks[i])}
        if with_depth:
            m = np.isfinite(depths[i]) & np.isfinite(depth_targets[i])
            if masks[i] is not None:
                m &= np.asarray(masks[i], dtype=bool)
            r["depth_mae"] = float(np.mean(np.abs(depths[i][m] - depth_targets[i][m]))) if m.any() else float("nan")
        rows.append(r)
    mean = {"name": "mean"}
    for k in rows[0] if rows else ():
        if k != "name":
            vals = np.array([r[k] for r in rows], dtype=np.float64)
            mean[k] = float(np.mean(vals[~np.isnan(vals)])) if (~np.isnan(vals)).any() else float("nan")
    return rows, mean


# ---------------------------------------------------------------------------
# figures


def _show(ax, img, title):
    img = np.asarray(img)
    if img.ndim == 2:
        ax.imshow(img, cmap="viridis", interpolation="nearest")
    else:
        ax.imshow(np.clip(img, 0.0, 1.0), interpolation="nearest")
    ax.set_title(title, fontsize=8)
    ax.axis("off")


def plot_curves(path, log, keys=None, title=None):
    """Training curves (one panel per logged quantity) against the iteration number."""
    if not log:
        return None
    keys = keys or [k for k in log[0] if k not in ("iter", "frame", "view")]
    cols = min(4, len(keys))
    rows = int(np.ceil(len(keys) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.4 * rows), squeeze=False)
    it = [r["iter"] for r in log]
    for ax, k in zip(axes.ravel(), keys):
        ax.plot(it, [r.get(k, np.nan) for r in log], lw=0.8)
        ax.set_title(k, fontsize=8)
        ax.tick_params(labelsize=7)
        if k != "psnr" and all(np.asarray([r.get(k, 0) for r in log], dtype=float) > 0):
            ax.set_yscale("log")
    for ax in axes.ravel()[len(keys):]:
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_comparison(path, pairs, titles=None):
    """Rows of target / render / absolute error."""
    pairs = list(pairs)
    if not pairs:
        return None
    fig, axes = plt.subplots(len(pairs), 3, figsize=(7.5, 2.6 * len(pairs)), squeeze=False)
    for i, (target, render) in enumerate(pairs):
        label = titles[i] if titles else str(i)
        _show(axes[i, 0], target, f"{label} target")
        _show(axes[i, 1], render, f"{label} render")
        _show(axes[i, 2], np.abs(np.asarray(render) - np.asarray(target)).mean(axis=-1), "abs error")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_blend_maps(path, image, occlusion, soft, hair_alpha, blend):
    fig, axes = plt.subplots(1, 5, figsize=(13, 2.8))
    for ax, img, t in zip(axes, (image, occlusion.astype(float), soft, hair_alpha, blend),
                          ("composite", "occlusion", "smoothed occlusion", "hair opacity", "blend weight")):
        _show(ax, img, t)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_metric_bars(path, rows, key="psnr"):
    names = [str(r["name"]) for r in rows]
    vals = [float(r[key]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(rows) + 2), 2.8))
    ax.bar(range(len(vals)), vals)
    ax.set_xticks(range(len(vals)))
    ax.set_xticklabels(names, rotation=90, fontsize=6)
    ax.set_ylabel(key)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
