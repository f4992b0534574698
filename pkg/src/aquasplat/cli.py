"""Command-line surface: generate, train, render, restore, eval, dump-water.

Exit codes: 0 success, 2 usage or configuration problem, 3 numerical failure
during optimisation. All randomness flows from --seed through named
substreams, so identical invocations produce identical artifacts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import ckpt, figures, optim, scenegen
from .compositor import compose, write_float_dump, write_png
from .errors import ConfigError, ContractViolation, NumericalFailure
from .gaussians import project
from .geom import load_cameras, pixel_directions
from .losses import ssim_map
from .metrics import chart_eval, psnr, ssim
from .rasterize import rasterize
from .waterfield import field_forward

from PIL import Image


def _parse_resolution(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return h, w
    except ValueError as exc:
        raise ConfigError(f"bad resolution {text!r}, expected HxW") from exc


def _write_display_png(path, display_rgb):
    data = np.round(np.clip(display_rgb, 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def cmd_generate(args) -> int:
    scenegen.generate(
        recipe=args.recipe, out_dir=args.out, views=args.views,
        resolution=_parse_resolution(args.resolution), water=args.water,
        seed=args.seed, threads=args.threads,
    )
    print(f"dataset written to {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = scenegen.load_dataset(args.data)
    cfg = optim.TrainConfig()
    if args.config:
        cfg = optim.config_from_text(Path(args.config).read_text(encoding="utf-8"), cfg)
    if args.iters is not None:
        cfg.iterations = args.iters
    if args.freeze is not None:
        cfg.freeze = args.freeze
    if args.seed is not None:
        cfg.seed = args.seed
    cfg = optim.config_from_text("", cfg)  # re-validate merged values

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    state, _ = optim.train(dataset, cfg, log_path=log_path, dump_dir=out)
    tmp = out / "model.ckpt.tmp"
    ckpt.save_checkpoint(tmp, state)
    tmp.replace(out / "model.ckpt")
    figures.save_loss_curves(log_path, out / "loss_curves.png")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return 0


def _camera_for_render(args, state):
    if args.pose_file:
        cams = load_cameras(args.pose_file)
        if not cams:
            raise ConfigError(f"{args.pose_file} holds no camera records")
        return cams[0]
    if args.data is None:
        raise ConfigError("render needs --data for --camera-index (or use --pose-file)")
    cams = load_cameras(Path(args.data) / "cameras.txt")
    if not (0 <= args.camera_index < len(cams)):
        raise ConfigError(f"camera index {args.camera_index} outside [0, {len(cams)})")
    return cams[args.camera_index]


def cmd_render(args) -> int:
    state = ckpt.load_checkpoint(args.ckpt)
    cam = _camera_for_render(args, state)
    bundle = rasterize(project(state.cloud, cam), cam)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.mode == "clean":
        write_png(out, np.clip(bundle.color, 0, 1))
    elif args.mode == "underwater":
        dirs = pixel_directions(cam).reshape(-1, 3)
        ambient, atten, back, _ = field_forward(state.water, dirs)
        shape = (cam.height, cam.width, 3)
        under = compose(bundle.color, bundle.dist, ambient.reshape(shape),
                        atten.reshape(shape), back.reshape(shape))
        write_png(out, under.clamped_view)
    elif args.mode in ("depth", "distance"):
        buf = bundle.depth if args.mode == "depth" else bundle.dist
        _write_display_png(out, figures.depth_to_turbo(buf, cam.r_max))
        write_float_dump(out.with_suffix(".f32"), buf)
    elif args.mode == "opacity":
        _write_display_png(out, np.repeat(bundle.alpha[..., None], 3, axis=-1))
        write_float_dump(out.with_suffix(".f32"), bundle.alpha)
    print(f"wrote {out}")
    return 0


def cmd_restore(args) -> int:
    state = ckpt.load_checkpoint(args.ckpt)
    dataset = scenegen.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    names, psnrs, ssims = [], [], []
    for i, cam in enumerate(dataset.cameras):
        bundle = rasterize(project(state.cloud, cam), cam)
        restored = np.clip(bundle.color, 0, 1)
        write_png(out / f"{i:03d}_restored.png", restored)
        if dataset.clean:
            names.append(f"{i:03d}")
            psnrs.append(psnr(restored, dataset.clean[i]))
            ssims.append(ssim(restored, dataset.clean[i]))
    if names:
        _write_metric_report(out, names, psnrs, ssims, title="restoration vs clean renders")
    print(f"restored {dataset.n_views} views into {out}")
    return 0


def _write_metric_report(out_dir, names, psnrs, ssims, title):
    out_dir = Path(out_dir)
    with open(out_dir / "per_view.csv", "w", encoding="utf-8") as fh:
        fh.write("view,psnr,ssim\n")
        for n, p, s in zip(names, psnrs, ssims):
            fh.write(f"{n},{p!r},{s!r}\n")
    lines = [title, ""]
    lines.append(f"{'view':>8} {'PSNR':>10} {'SSIM':>8}")
    for n, p, s in zip(names, psnrs, ssims):
        lines.append(f"{n:>8} {p:>10.4f} {s:>8.4f}")
    lines.append(f"{'mean':>8} {np.mean(psnrs):>10.4f} {np.mean(ssims):>8.4f}")
    table = "\n".join(lines) + "\n"
    (out_dir / "metrics.txt").write_text(table, encoding="utf-8")
    figures.save_metric_bars(names, psnrs, ssims, out_dir / "metrics.png")
    print(table)


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.charts:
        if not (args.data and args.ckpt):
            raise ConfigError("chart evaluation needs --data and --ckpt")
        state = ckpt.load_checkpoint(args.ckpt)
        dataset = scenegen.load_dataset(args.data)
        charts = scenegen.load_charts(args.charts)
        rows = []
        for i, cam in enumerate(dataset.cameras):
            bundle = rasterize(project(state.cloud, cam), cam)
            res = chart_eval(np.clip(bundle.color, 0, 1), charts, cam, bundle.depth)
            rows.append((f"{i:03d}", res))
        lines = ["chart color fidelity", ""]
        lines.append(f"{'view':>8} {'dE00':>8} {'dE00 std':>9} {'psi':>8} {'psi std':>8}")
        with open(out / "charts.csv", "w", encoding="utf-8") as fh:
            fh.write("view,delta_e_mean,delta_e_std,angular_mean,angular_std\n")
            for name, res in rows:
                fh.write(f"{name},{res.delta_e_mean!r},{res.delta_e_std!r},"
                         f"{res.angular_mean!r},{res.angular_std!r}\n")
                lines.append(f"{name:>8} {res.delta_e_mean:>8.3f} {res.delta_e_std:>9.3f} "
                             f"{res.angular_mean:>8.3f} {res.angular_std:>8.3f}")
        table = "\n".join(lines) + "\n"
        (out / "metrics.txt").write_text(table, encoding="utf-8")
        des = [r.delta_e_mean for _, r in rows]
        psis = [r.angular_mean for _, r in rows]
        figures.save_metric_bars([n for n, _ in rows], des, psis, out / "metrics.png")
        print(table)
        return 0

    if not (args.pred_dir and args.gt_dir):
        raise ConfigError("eval needs --pred-dir and --gt-dir (or --charts)")
    from .compositor import read_png

    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    shared = sorted(
        {p.name for p in pred_dir.glob("*.png")} & {g.name for g in gt_dir.glob("*.png")}
    )
    if not shared:
        raise ConfigError("no identically named .png pairs between the two directories")
    names, psnrs, ssims = [], [], []
    for name in shared:
        a, b = read_png(pred_dir / name), read_png(gt_dir / name)
        names.append(Path(name).stem)
        psnrs.append(psnr(a, b))
        ssims.append(ssim(a, b))
    _write_metric_report(out, names, psnrs, ssims, title="prediction vs reference")
    return 0


def cmd_dump_water(args) -> int:
    state = ckpt.load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ambient, atten, back = figures.water_maps(state.water, args.grid)
    write_png(out / "ambient.png", np.clip(ambient, 0, 1))
    for name, buf in (("attenuation", atten), ("backscatter", back)):
        write_png(out / f"{name}.png", np.clip(buf / max(buf.max(), 1e-9), 0, 1))
        write_float_dump(out / f"{name}.f32", buf)
    write_float_dump(out / "ambient.f32", ambient)
    figures.save_water_figure(state.water, out / "water_maps.png", args.grid)
    print(f"water maps written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aquasplat",
        description="Gaussian-splat underwater scene representation and restoration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset archive")
    p.add_argument("--recipe", required=True, choices=scenegen.RECIPES)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--resolution", default="128x160", help="HxW")
    p.add_argument("--water", default="varying", choices=("uniform", "varying"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="optimise a scene on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--iters", type=int)
    p.add_argument("--freeze", choices=("none", "water", "gaussians"))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--camera-index", type=int, default=0)
    p.add_argument("--pose-file")
    p.add_argument("--mode", default="underwater",
                   choices=("underwater", "clean", "depth", "distance", "opacity"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("restore", help="water-free renders for every dataset view")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="metric tables for predictions or charts")
    p.add_argument("--pred-dir")
    p.add_argument("--gt-dir")
    p.add_argument("--charts")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-water", help="ambient/attenuation/backscatter maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_water)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.dump_path:
            print(f"state dump: {exc.dump_path}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
