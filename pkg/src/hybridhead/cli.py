"""Command-line entry point.

A dataset directory (written by ``gen-synthetic``) holds ``avatar/`` (the
ground-truth bundle, whose head model the training commands reuse) and
``frames/`` (every frame/view record plus the split). Training commands write
an avatar bundle, a CSV log, a CSV summary and PNG curves into ``--out``.
"""
import argparse
import os
import shutil
import sys
import warnings

import numpy as np
import yaml

from . import io
from .avatar import render_frame
from .camera import Camera
from .errors import (AlignmentError, ConfigurationError, ContractViolation, HybridHeadWarning, ParameterError,
                     RankDeficiencyError, TopologyError, UndefinedMetricError)
from .geometry import ExpressionParams
from .optim.config import TrainConfig
from .optim.editing import edit_texture, swap_hair
from .optim.metrics import psnr
from .optim.stages import train_face, train_hair, train_joint
from .report import eval_metrics, plot_blend_maps, plot_comparison, plot_curves, plot_metric_bars, write_csv
from .splat.cloud import SplatOptions
from .synthetic import blank_avatar, make_scene

KNOWN_ERRORS = (ParameterError, TopologyError, ContractViolation, ConfigurationError, RankDeficiencyError,
                AlignmentError, UndefinedMetricError, FileNotFoundError, NotADirectoryError, yaml.YAMLError)


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# output bookkeeping


class OutputDir:
    """Creates ``path`` and, on failure, removes everything that was not there before."""

    def __init__(self, path):
        self.path = path
        self.existed = os.path.isdir(path)
        self.before = set()
        if self.existed:
            for root, dirs, files in os.walk(path):
                self.before.update(os.path.join(root, n) for n in dirs + files)

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        if not self.existed:
            shutil.rmtree(self.path, ignore_errors=True)
            return False
        for root, dirs, files in os.walk(self.path, topdown=False):
            for n in files:
                p = os.path.join(root, n)
                if p not in self.before:
                    os.remove(p)
            for n in dirs:
                p = os.path.join(root, n)
                if p not in self.before:
                    shutil.rmtree(p, ignore_errors=True)
        return False

    def __call__(self, *parts):
        return os.path.join(self.path, *parts)


# ---------------------------------------------------------------------------
# argument helpers


def parse_list(text):
    """``"0,2,5-7"`` -> [0, 2, 5, 6, 7]."""
    if text is None:
        return None
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            if hi < lo:
                raise CliError(f"bad range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return out


def load_config(args):
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def splat_overrides(opts: SplatOptions, args):
    d = opts.to_dict()
    if getattr(args, "blend_mode", None):
        d["depth_mode"] = "nearz" if args.blend_mode == "nearz" else "accumulated"
    if getattr(args, "early_stop", None):
        d["early_stop"] = args.early_stop == "on"
    return SplatOptions(**d)


def load_dataset(path):
    return io.load_frames(os.path.join(path, "frames"))


def select(records, frames=None, views=None):
    out = [r for r in records if (frames is None or r.frame in frames) and (views is None or r.view in views)]
    if not out:
        raise CliError("no frame records match the requested frames/views")
    return out


def split_frames(manifest, name):
    if name == "train":
        return set(manifest["train_frames"])
    if name == "test":
        return set(manifest["test_frames"])
    if name == "canonical":
        return {manifest["canonical_frame"]}
    return None


def save_log(out: OutputDir, result, title):
    write_csv(out("log.csv"), result.log)
    write_csv(out("summary.csv"), [result.summary])
    plot_curves(out("curves.png"), result.log, title=title)


def _load_avatar(path, args=None):
    av = io.load_avatar(path)
    if args is not None:
        av.splat = splat_overrides(av.splat, args)
    return av


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args):
    seed = 0 if args.seed is None else args.seed
    if args.n_frames < 2:
        raise CliError("need at least two frames (one held out)")
    test = [f for f in parse_list(args.test_frames) if 0 < f < args.n_frames] or [args.n_frames - 1]
    scene = make_scene(seed=seed, n_views=args.n_views, n_frames=args.n_frames, size=args.size,
                       n_gaussians=args.gaussians, test_frames=tuple(test))
    views = parse_list(args.views)
    with OutputDir(args.out) as out:
        io.save_avatar(out("avatar"), scene.avatar)
        records = scene.records if views is None else select(scene.records, views=set(views))
        extra = {"train_frames": scene.train_frames, "test_frames": scene.test_frames,
                 "canonical_frame": scene.canonical_frame, "seed": seed, "size": args.size}
        io.save_frames(out("frames"), records, extra)
        first = [r for r in records if r.frame == scene.canonical_frame][:4]
        plot_comparison(out("preview.png"), [(r.image, r.head) for r in first],
                        [f"view {r.view}" for r in first])
    print(f"wrote {len(records)} records and the ground-truth avatar to {args.out}")
    return 0


def _frame_inputs(args, records):
    """(camera, params, frame, target record or None) tuples for render-like commands."""
    if args.camera or args.params:
        if not (args.camera and args.params):
            raise CliError("--camera and --params must be given together")
        with open(args.camera) as fh:
            cam = Camera.from_dict(yaml.safe_load(fh))
        with open(args.params) as fh:
            prm = ExpressionParams.from_dict(yaml.safe_load(fh))
        return [(cam, prm, args.frame, None, 0)]
    views = parse_list(args.views)
    recs = select(records, {args.frame}, None if views is None else set(views))
    return [(r.camera, r.params, r.frame, r, r.view) for r in recs]


def cmd_render(args):
    avatar = _load_avatar(args.avatar, args)
    records = load_dataset(args.data)[0] if args.data else []
    if not records and not (args.camera and args.params):
        raise CliError("render needs --data or both --camera and --params")
    items = _frame_inputs(args, records)
    rows = []
    with OutputDir(args.out) as out:
        for cam, prm, frame, rec, view in items:
            fr = render_frame(avatar, prm, cam, frame=frame)
            stem = f"f{frame:03d}_v{view:02d}"
            io.save_png(out(f"render_{stem}.png"), fr.image)
            row = {"frame": frame, "view": view}
            if rec is not None:
                row["psnr"] = psnr(rec.image, fr.image)
            rows.append(row)
            if args.dump_buffers:
                b = fr.face.buffers
                io.save_pfm(out(f"mesh_depth_{stem}.pfm"), np.where(np.isfinite(b.mesh_depth), b.mesh_depth, 0.0))
                io.save_png(out(f"coverage_{stem}.png"), b.coverage.astype(float))
                io.save_png(out(f"face_{stem}.png"), fr.face.image)
                if fr.hair is not None:
                    nz = fr.hair.result.nearz
                    io.save_pfm(out(f"nearz_{stem}.pfm"), np.where(np.isfinite(nz), nz, 0.0))
                    io.save_png(out(f"hair_{stem}.png"), fr.hair.result.color)
                    io.save_png(out(f"hair_alpha_{stem}.png"), fr.hair.result.alpha)
                io.save_blob(out(f"buffers_{stem}.blob"), _buffer_arrays(fr))
        write_csv(out("render.csv"), rows)
    for r in rows:
        print(", ".join(f"{k}={v}" for k, v in r.items()))
    return 0


def _buffer_arrays(fr):
    b = fr.face.buffers
    arrays = {"image": fr.image, "face": fr.face.image, "mesh_depth": b.mesh_depth, "coverage": b.coverage,
              "uv": b.uv, "face_id": b.face_id}
    if fr.hair is not None:
        arrays.update(hair=fr.hair.result.color, hair_alpha=fr.hair.result.alpha, nearz=fr.hair.result.nearz,
                      occlusion=fr.maps.occlusion, soft=fr.maps.soft, blend=fr.maps.hair_alpha)
    return arrays


def _train_frames(args, records, manifest, default_split):
    frames = split_frames(manifest, args.split or default_split)
    views = parse_list(args.views)
    return select(records, frames, None if views is None else set(views))


def cmd_train_face(args):
    cfg = load_config(args)
    records, manifest = load_dataset(args.data)
    train = _train_frames(args, records, manifest, "train")
    if args.avatar:
        avatar = _load_avatar(args.avatar, args)
    else:
        gt = io.load_avatar(os.path.join(args.data, "avatar"))
        canonical = next(r.params for r in records if r.frame == manifest["canonical_frame"])
        res = {"tex_resolution": gt.textures.diffuse.shape[0], "view_resolution": gt.textures.view.shape[0],
               "dyn_resolution": gt.textures.dynamic.shape[0], "disp_resolution": gt.displacement.resolution[0]}
        avatar = blank_avatar(gt.head, canonical, seed=cfg.seed, splat=splat_overrides(gt.splat, args),
                              blur_sigma=cfg.blur_sigma, **res)
    avatar.config = cfg.to_dict()
    result = train_face(train, avatar, cfg, iters=args.iters, progress=_progress(args, "psnr"))
    with OutputDir(args.out) as out:
        io.save_avatar(out("avatar"), result.avatar)
        cfg.dump(out("config.yaml"))
        save_log(out, result, "face stage")
    _print_summary(result.summary)
    return 0


def cmd_train_hair(args):
    cfg = load_config(args)
    records, manifest = load_dataset(args.data)
    recs = _train_frames(args, records, manifest, "canonical")
    avatar = _load_avatar(args.avatar, args)
    avatar.cloud = None if args.reinit else avatar.cloud
    result = train_hair(recs, avatar, cfg, iters=args.iters, n_init=args.gaussians, progress=_progress(args, "psnr"))
    result.avatar.config = cfg.to_dict()
    with OutputDir(args.out) as out:
        io.save_avatar(out("avatar"), result.avatar)
        cfg.dump(out("config.yaml"))
        save_log(out, result, "hair stage")
    _print_summary(result.summary)
    return 0


def cmd_train_joint(args):
    cfg = load_config(args)
    records, manifest = load_dataset(args.data)
    recs = _train_frames(args, records, manifest, "train")
    avatar = _load_avatar(args.avatar, args)
    result = train_joint(recs, avatar, cfg, iters=args.iters, progress=_progress(args, "psnr"))
    result.avatar.config = cfg.to_dict()
    with OutputDir(args.out) as out:
        io.save_avatar(out("avatar"), result.avatar)
        cfg.dump(out("config.yaml"))
        save_log(out, result, "joint stage")
    _print_summary(result.summary)
    return 0


def cmd_swap_hair(args):
    face = _load_avatar(args.face, args)
    hair = _load_avatar(args.hair, args)
    avatar, fit = swap_hair(face, hair, with_scale=not args.rigid)
    with OutputDir(args.out) as out:
        io.save_avatar(out("avatar"), avatar)
        t = fit.transform
        with open(out("alignment.yaml"), "w") as fh:
            yaml.safe_dump({"transform": t.to_list(with_scale=True), "scale": t.scale,
                            "residual": float(fit.residual), "iterations": int(fit.iterations)}, fh, sort_keys=True)
        if args.data:
            records, manifest = load_dataset(args.data)
            views = parse_list(args.views)
            frame = manifest["canonical_frame"] if args.frame is None else args.frame
            for r in select(records, {frame}, None if views is None else set(views)):
                io.save_png(out(f"render_f{r.frame:03d}_v{r.view:02d}.png"),
                            render_frame(avatar, r.params, r.camera, frame=r.frame).image)
    print(f"scale={t.scale:.6g} residual={fit.residual:.3g} iterations={fit.iterations}")
    return 0


def cmd_edit_texture(args):
    cfg = load_config(args)
    avatar = _load_avatar(args.avatar, args)
    records, _ = load_dataset(args.data)
    view = 0 if args.view is None else args.view
    main = select(records, {args.frame}, {view})[0]
    painted = io.load_png(args.painted)[..., :3]
    mask = io.load_png(args.mask)
    mask = (mask if mask.ndim == 2 else mask[..., 0]) > 0.5
    others = parse_list(args.other_views) or []
    other = [(r.camera, r.params) for r in select(records, {args.frame}, set(others))] if others else []
    iters = cfg.edit_iters if args.iters is None else args.iters
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", HybridHeadWarning)
        res = edit_texture(avatar, painted, mask, main.camera, main.params, other, steps=iters,
                           lr_diffuse=cfg.edit_lr["diffuse"], lr_pix=cfg.edit_lr["pix"], frame=main.frame)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    with OutputDir(args.out) as out:
        io.save_avatar(out("avatar"), res.avatar)
        io.save_png(out("uv_mask.png"), res.uv_mask.astype(float))
        after = render_frame(res.avatar, main.params, main.camera, frame=main.frame).image
        io.save_png(out("edited.png"), after)
        if res.log:
            write_csv(out("log.csv"), res.log)
            plot_curves(out("curves.png"), res.log, title="texture edit")
    return 0


def cmd_eval(args):
    if args.renders or args.targets:
        return _eval_images(args)
    avatar = _load_avatar(args.avatar, args)
    records, manifest = load_dataset(args.data)
    recs = _train_frames(args, records, manifest, "test")
    renders, targets, masks, depths, dtargets, names, pairs = [], [], [], [], [], [], []
    faces, face_targets, face_masks = [], [], []
    for r in recs:
        fr = render_frame(avatar, r.params, r.camera, frame=r.frame)
        renders.append(fr.image)
        targets.append(r.image)
        masks.append(r.coverage if args.mask == "coverage" else None)
        depths.append(fr.face.buffers.mesh_depth)
        dtargets.append(r.depth if r.depth is not None else np.full(r.coverage.shape, np.nan))
        names.append(f"f{r.frame:03d}_v{r.view:02d}")
        faces.append(fr.face.image)
        face_targets.append(r.head)
        face_masks.append(r.face_mask & fr.face.buffers.coverage)
        if len(pairs) < 4:
            pairs.append((r.image, fr.image))
    rows, mean = eval_metrics(renders, targets, masks, depths, dtargets, names)
    frows, fmean = eval_metrics(faces, face_targets, face_masks, names=names, skip_empty=True)
    for r, f in zip(rows + [mean], frows + [fmean]):
        r["face_psnr"] = f["psnr"]
        r["face_ssim"] = f["ssim"]
    with OutputDir(args.out) as out:
        write_csv(out("metrics.csv"), rows + [mean])
        plot_metric_bars(out("psnr.png"), rows)
        plot_comparison(out("comparison.png"), pairs, names[:len(pairs)])
    print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in mean.items()))
    return 0


def _list_images(path):
    return sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))


def _eval_images(args):
    if not (args.renders and args.targets):
        raise CliError("--renders and --targets must be given together")
    names = _list_images(args.renders)
    tnames = _list_images(args.targets)
    if names != tnames:
        raise ParameterError(f"{len(names)} renders but {len(tnames)} matching targets")
    renders = [io.load_png(os.path.join(args.renders, n))[..., :3] for n in names]
    targets = [io.load_png(os.path.join(args.targets, n))[..., :3] for n in names]
    masks = None
    if args.masks:
        masks = []
        for n in names:
            m = io.load_png(os.path.join(args.masks, n))
            masks.append((m if m.ndim == 2 else m[..., 0]) > 0.5)
    rows, mean = eval_metrics(renders, targets, masks, names=names)
    with OutputDir(args.out) as out:
        write_csv(out("metrics.csv"), rows + [mean])
        plot_metric_bars(out("psnr.png"), rows)
    print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in mean.items()))
    return 0


def cmd_dump_blend_maps(args):
    avatar = _load_avatar(args.avatar, args)
    records, manifest = load_dataset(args.data)
    frame = manifest["canonical_frame"] if args.frame is None else args.frame
    views = parse_list(args.views)
    recs = select(records, {frame}, None if views is None else set(views))
    if avatar.cloud is None:
        raise ConfigurationError("avatar has no hair; there is nothing to blend")
    with OutputDir(args.out) as out:
        for r in recs:
            fr = render_frame(avatar, r.params, r.camera, frame=r.frame)
            stem = f"f{r.frame:03d}_v{r.view:02d}"
            m = fr.maps
            io.save_png(out(f"occlusion_{stem}.png"), m.occlusion.astype(float))
            io.save_png(out(f"soft_occlusion_{stem}.png"), m.soft)
            io.save_png(out(f"hair_alpha_{stem}.png"), m.hair_alpha)
            io.save_blob(out(f"blend_{stem}.blob"), {"occlusion": m.occlusion, "soft": m.soft,
                                                     "hair_alpha": m.hair_alpha, "alpha": fr.hair.result.alpha})
            plot_blend_maps(out(f"blend_{stem}_figure.png"), fr.image, m.occlusion, m.soft,
                            fr.hair.result.alpha, m.hair_alpha)
    print(f"wrote blend maps for {len(recs)} view(s) to {args.out}")
    return 0


def _progress(args, key):
    every = getattr(args, "print_every", 0) or 0
    if not every:
        return None

    def report(row):
        if row["iter"] % every == 0:
            print(f"iter {row['iter']}: total={row['total']:.5g} {key}={row.get(key, float('nan')):.2f}", flush=True)
    return report


def _print_summary(summary):
    print(", ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML training config")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--views", help="comma separated view ids or ranges, e.g. 0,2,4-7")
    common.add_argument("--iters", type=int, help="iteration count (overrides the config)")
    common.add_argument("--blend-mode", choices=("nearz", "gsdepth"), help="hair depth used for the occlusion test")
    common.add_argument("--early-stop", choices=("on", "off"), help="cut hair accumulation at large depth gaps")
    common.add_argument("--dump-buffers", action="store_true", help="also write depth/alpha buffers")
    common.add_argument("--print-every", type=int, default=0, help="progress line every N iterations")

    p = argparse.ArgumentParser(prog="hybridhead", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", parents=[common], help="write a ground-truth avatar and its frame set")
    g.add_argument("--n-views", type=int, default=8)
    g.add_argument("--n-frames", type=int, default=20)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--gaussians", type=int, default=200)
    g.add_argument("--test-frames", default="7,15", help="held-out frames (out-of-range ids are dropped)")
    g.set_defaults(func=cmd_gen_synthetic)

    r = sub.add_parser("render", parents=[common], help="render an avatar to PNG")
    r.add_argument("--avatar", required=True)
    r.add_argument("--data")
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--camera", help="YAML camera (instead of a dataset view)")
    r.add_argument("--params", help="YAML expression parameters (instead of a dataset frame)")
    r.set_defaults(func=cmd_render)

    for name, func, helptext in (("train-face", cmd_train_face, "stage 1: face textures and geometry"),
                                 ("train-hair", cmd_train_hair, "stage 2: canonical Gaussian hair"),
                                 ("train-joint", cmd_train_joint, "stage 3: hair deformation and textures")):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--data", required=True)
        t.add_argument("--avatar", required=name != "train-face", help="input avatar bundle")
        t.add_argument("--split", choices=("train", "test", "canonical", "all"))
        if name == "train-hair":
            t.add_argument("--gaussians", type=int, default=200, help="initial Gaussian count")
            t.add_argument("--reinit", action="store_true", help="discard an existing cloud")
        t.set_defaults(func=func)

    s = sub.add_parser("swap-hair", parents=[common], help="put one avatar's hair on another's head")
    s.add_argument("--face", required=True)
    s.add_argument("--hair", required=True)
    s.add_argument("--rigid", action="store_true", help="no scale in the alignment")
    s.add_argument("--data")
    s.add_argument("--frame", type=int)
    s.set_defaults(func=cmd_swap_hair)

    e = sub.add_parser("edit-texture", parents=[common], help="paint into the face texture")
    e.add_argument("--avatar", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--frame", type=int, default=0)
    e.add_argument("--view", type=int)
    e.add_argument("--painted", required=True)
    e.add_argument("--mask", required=True)
    e.add_argument("--other-views")
    e.set_defaults(func=cmd_edit_texture)

    v = sub.add_parser("eval", parents=[common], help="PSNR / SSIM / depth MAE table")
    v.add_argument("--avatar")
    v.add_argument("--data")
    v.add_argument("--split", choices=("train", "test", "canonical", "all"))
    v.add_argument("--mask", choices=("coverage", "none"), default="coverage")
    v.add_argument("--renders", help="directory of PNG renders (with --targets)")
    v.add_argument("--targets", help="directory of PNG targets with the same file names")
    v.add_argument("--masks", help="directory of PNG masks with the same file names")
    v.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-blend-maps", parents=[common], help="write occlusion, smoothed occlusion and opacity maps")
    d.add_argument("--avatar", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--frame", type=int)
    d.set_defaults(func=cmd_dump_blend_maps)
    return p


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "eval" and not (args.renders or args.targets) and not (args.avatar and args.data):
        print("error: eval needs --avatar and --data, or --renders and --targets", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError,) + KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
