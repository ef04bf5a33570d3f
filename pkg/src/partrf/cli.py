"""Command-line surface: gen, train, render, parts, edit, eval.

All flags are long-form. Outputs are deterministic under a fixed --seed;
metric tables are tab-separated with a header row. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data, metrics, parts, pngio, render, train


def _cmd_gen(args) -> int:
    with open(args.scene_spec) as fh:
        spec = data.parse_scene_spec(fh.read())
    data.generate_synthetic(spec, args.out)
    print(f"wrote {spec.frames} frames to {args.out}")
    return 0


def _cmd_train(args) -> int:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = train.config_from_sources(args.config, overrides)
    dataset = data.load_dataset(args.data, split=args.split, background=cfg.background)
    trainer = train.Trainer(cfg, dataset, out_dir=args.out)
    log_path = os.path.join(args.out, "train_log.tsv")
    final = trainer.run(log_path=log_path)
    print(f"checkpoint: {final}")
    print(f"log: {log_path}")
    return 0


def _render_settings(settings, args):
    n_samples = args.samples if args.samples else settings["n_samples"]
    return settings["near"], settings["far"], n_samples, settings["background"]


def _cmd_render(args) -> int:
    model, settings = train.load_model(args.checkpoint)
    dataset = data.load_dataset(args.data, split=args.split,
                                background=settings["background"])
    near, far, n_samples, bg = _render_settings(settings, args)
    os.makedirs(args.out, exist_ok=True)
    indices = range(len(dataset.frames)) if args.frame < 0 else [args.frame]
    for i in indices:
        cam = dataset.camera(i)
        t = dataset.frames[i].time
        rgb, depth, _ = render.render_image(model, cam, t, near, far, n_samples,
                                            background=bg)
        pngio.write_png(os.path.join(args.out, f"r_{i:03d}.png"), pngio.to_uint8(rgb))
        norm = np.clip((depth - near) / (far - near), 0.0, 1.0)
        pngio.write_png(os.path.join(args.out, f"d_{i:03d}.png"), pngio.to_uint16(norm))
    print(f"rendered {len(list(indices))} frame(s) to {args.out}")
    return 0


def _cmd_parts(args) -> int:
    model, settings = train.load_model(args.checkpoint)
    pm, trace, points, _ = parts.extract_parts(
        model, res=args.grid, eps=settings["density_eps"], n_times=args.times)
    os.makedirs(args.out, exist_ok=True)
    trace.save_text(os.path.join(args.out, "merge_trace.tsv"))
    parts.save_part_model(pm, args.out)
    print(f"{len(pm.parts)} part(s) from {len(points)} occupied points")

    if args.data:
        dataset = data.load_dataset(args.data, split=args.split,
                                    background=settings["background"])
        seg_dir = os.path.join(args.out, "segmentation")
        os.makedirs(seg_dir, exist_ok=True)
        near, far, n_samples, _ = _render_settings(settings, args)
        indices = range(len(dataset.frames)) if args.frame < 0 else [args.frame]
        for i in indices:
            seg = parts.render_segmentation(
                model, pm, dataset.camera(i), dataset.frames[i].time,
                near, far, n_samples)
            pngio.write_png(os.path.join(seg_dir, f"s_{i:03d}.png"), seg)
        print(f"segmentation frames in {seg_dir}")
    return 0


def _cmd_edit(args) -> int:
    model, settings = train.load_model(args.checkpoint)
    pm = parts.load_part_model(args.parts)
    with open(args.script) as fh:
        script = parts.parse_edit_script(fh.read())
    script.validate(pm)
    dataset = data.load_dataset(args.data, split=args.split,
                                background=settings["background"])
    near, far, n_samples, bg = _render_settings(settings, args)
    os.makedirs(args.out, exist_ok=True)
    indices = range(len(dataset.frames)) if args.frame < 0 else [args.frame]
    for i in indices:
        rgb = parts.render_edited(model, pm, script, dataset.camera(i),
                                  dataset.frames[i].time, near, far, n_samples,
                                  background=bg)
        pngio.write_png(os.path.join(args.out, f"e_{i:03d}.png"), pngio.to_uint8(rgb))
    print(f"edited frames in {args.out}")
    return 0


def _load_image_dir(path):
    names = sorted(n for n in os.listdir(path) if n.endswith(".png"))
    if not names:
        raise FileNotFoundError(f"{path}: no .png files")
    return names, [pngio.read_png(os.path.join(path, n)) for n in names]


def _as_float_rgb(img: np.ndarray) -> np.ndarray:
    """Any PNG payload to float [0,1] HxWx3 (gray promoted, alpha dropped)."""
    peak = 65535.0 if img.dtype == np.uint16 else 255.0
    f = img.astype(np.float64) / peak
    if f.ndim == 2:
        f = np.repeat(f[..., None], 3, axis=2)
    return f[..., :3]


def _cmd_eval(args) -> int:
    rows = ["metric\tname\tvalue"]
    if args.images:
        pred_dir, gt_dir = args.images
        names, preds = _load_image_dir(pred_dir)
        _, gts = _load_image_dir(gt_dir)
        if len(preds) != len(gts):
            raise ValueError(f"{pred_dir} and {gt_dir} hold different frame counts")
        psnrs, ssims = [], []
        for name, p, g in zip(names, preds, gts):
            pf = _as_float_rgb(p)
            gf = _as_float_rgb(g)
            psnrs.append(metrics.psnr(pf, gf))
            ssims.append(metrics.ssim(pf, gf))
            rows.append(f"psnr\t{name}\t{psnrs[-1]:.4f}")
            rows.append(f"ssim\t{name}\t{ssims[-1]:.6f}")
        rows.append(f"psnr\tmean\t{np.mean(psnrs):.4f}")
        rows.append(f"ssim\tmean\t{np.mean(ssims):.6f}")
    if args.masks:
        pred_dir, gt_dir = args.masks
        _, preds = _load_image_dir(pred_dir)
        _, gts = _load_image_dir(gt_dir)
        pred_seq = np.stack([p if p.ndim == 2 else p[..., 0] for p in preds])
        gt_seq = np.stack([g if g.ndim == 2 else g[..., 0] for g in gts])
        mean, per_label, mapping = metrics.miou(pred_seq, gt_seq)
        for label, value in sorted(per_label.items()):
            rows.append(f"iou\tlabel_{label}\t{value:.6f}")
        for part, label in sorted(mapping.items()):
            rows.append(f"assignment\tpart_{part}\t{label}")
        rows.append(f"miou\tmean\t{mean:.6f}")
    if not args.images and not args.masks:
        raise ValueError("eval needs --images and/or --masks")
    table = "\n".join(rows) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partrf",
                                description="dynamic scene reconstruction with rigid part discovery")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic dataset from a scene spec")
    g.add_argument("--scene-spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="optimize a scene from a dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--split", default="train")
    r.add_argument("--frame", type=int, default=-1, help="-1 renders every frame")
    r.add_argument("--samples", type=int, default=0)
    r.add_argument("--seed", type=int, default=None)
    r.set_defaults(func=_cmd_render)

    pa = sub.add_parser("parts", help="discover parts, merge trace, segmentation")
    pa.add_argument("--checkpoint", required=True)
    pa.add_argument("--out", required=True)
    pa.add_argument("--data", default=None, help="dataset for segmentation frames")
    pa.add_argument("--split", default="train")
    pa.add_argument("--frame", type=int, default=-1)
    pa.add_argument("--grid", type=int, default=64, help="occupancy lattice resolution")
    pa.add_argument("--times", type=int, default=16, help="trajectory sample count")
    pa.add_argument("--samples", type=int, default=0)
    pa.add_argument("--seed", type=int, default=None)
    pa.set_defaults(func=_cmd_parts)

    e = sub.add_parser("edit", help="render frames under an edit script")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--parts", required=True)
    e.add_argument("--script", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="train")
    e.add_argument("--frame", type=int, default=-1)
    e.add_argument("--samples", type=int, default=0)
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(func=_cmd_edit)

    ev = sub.add_parser("eval", help="metric tables for renders and segmentations")
    ev.add_argument("--images", nargs=2, metavar=("PRED_DIR", "GT_DIR"))
    ev.add_argument("--masks", nargs=2, metavar=("PRED_DIR", "GT_DIR"))
    ev.add_argument("--out", default=None)
    ev.add_argument("--seed", type=int, default=None)
    ev.set_defaults(func=_cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
