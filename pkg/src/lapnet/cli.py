"""Command-line entry point: ``lapnet {analyze,train,infer,eval,gradcheck,export-toy}``.

Every subcommand prints its resolved configuration (as ``# key = value`` lines)
before doing any work. Data goes to stdout and files; diagnostics go to stderr.
Set ``LAP_LOG=info`` or ``LAP_LOG=debug`` for progress logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import cost
from .checkpoint import CheckpointError, load_checkpoint
from .data import export_toy_dataset, load_netpbm, save_netpbm, split_indices
from .gradcheck import render_results, run_gradchecks
from .heatmap import read_keypoint_file, schema_for, write_keypoint_file
from .metrics import render_report
from .network import ConfigError, LAPNet, config_to_text, load_config
from .tensor import ShapeError
from .train import (Dataset, TrainingError, evaluate_model, load_dataset_spec, load_toy, load_train_config,
                    predict, predict_keypoints, train, train_config_to_text)

log = logging.getLogger("lapnet")

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_SHAPE = 3


def _print_config(title: str, text: str):
    print(f"# {title}")
    for line in text.splitlines():
        print(f"#   {line}")


def _parse_size(s: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in s.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {s!r}") from None
    return h, w


# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    if args.input_size:
        cfg = cfg.replace(input_h=args.input_size[0], input_w=args.input_size[1])
    _print_config(f"network ({args.config})", config_to_text(cfg))
    report = cost.count_network(cfg, include_elementwise=args.elementwise, name=str(args.config))
    print(cost.render_table(report, depth=args.depth))
    if not args.elementwise:
        enumerated = LAPNet(cfg).num_parameters()
        status = "match" if enumerated == report.total_params else "MISMATCH"
        print(f"enumerated trainable scalars: {enumerated:,} ({status})")
    comparisons = {}
    reports = [report]
    if args.baseline:
        base_cfg = load_config(args.baseline)
        if args.input_size:
            base_cfg = base_cfg.replace(input_h=args.input_size[0], input_w=args.input_size[1])
        _print_config(f"baseline ({args.baseline})", config_to_text(base_cfg))
        base = cost.count_network(base_cfg, include_elementwise=args.elementwise, name=str(args.baseline))
        print(cost.render_table(base, depth=args.depth))
        comparisons["counted"] = cost.compare(report, base)
        print(cost.render_comparison(comparisons["counted"], "counted"))
        reports.append(base)
    comparisons["reference"] = cost.reference_comparison()
    print(cost.render_comparison(comparisons["reference"], "reference totals self-check"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(cost.render_tsv(report, comparisons))
    print(f"wrote {out}")
    if not args.no_figure:
        from .plotting import plot_cost_comparison
        fig = plot_cost_comparison(reports, out.with_suffix(".png"))
        print(f"wrote {fig}")
    return 0


def cmd_train(args) -> int:
    net_cfg = load_config(args.net)
    tcfg = load_train_config(args.train)
    overrides = {}
    if args.seed is not None:
        overrides.update(seed=args.seed, init_seed=args.seed)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    tcfg = tcfg.replace(**overrides)
    _print_config(f"network ({args.net})", config_to_text(net_cfg))
    _print_config(f"training ({args.train})", train_config_to_text(tcfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "network.cfg").write_text(config_to_text(net_cfg))
    (out / "train.cfg").write_text(train_config_to_text(tcfg))
    t0 = time.perf_counter()
    result = train(net_cfg, tcfg, out, record_time=args.record_time)
    print("\n".join(result.log_lines))
    _, val_idx = split_indices(tcfg.data)
    metrics = evaluate_model(result.best.build_network(), load_toy(tcfg.data, val_idx))
    (out / "val_metrics.tsv").write_text(render_report(metrics, schema_for(net_cfg.schema,
                                                                           net_cfg.num_keypoints).joints))
    print(f"best checkpoint (epoch {result.best.epoch}) on validation: "
          + ", ".join(f"PCK@{t:g} {v:.4f}" for t, v in metrics.pck.items()) + f", AP {metrics.ap:.4f}")
    if not args.no_figure:
        from .plotting import plot_loss_curves
        h = result.history
        plot_loss_curves([r.epoch for r in h], [r.train_loss for r in h], [r.val_loss for r in h],
                         out / "loss_curves.png")
    print(f"wall time {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    return 0


def _overlay(image: np.ndarray, kps, schema, scale: int = 4) -> Image.Image:
    gray = np.clip(np.rint(image.mean(axis=0) * 255.0), 0, 255).astype(np.uint8)
    canvas = Image.fromarray(gray).convert("RGB")
    canvas = canvas.resize((canvas.width * scale, canvas.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    pts = [((x + 0.5) * scale, (y + 0.5) * scale) for x, y in kps.xy]
    for a, b in schema.limbs:
        draw.line([pts[a], pts[b]], fill=(0, 200, 255), width=max(1, scale // 2))
    r = max(2, scale)
    for (x, y), vis in zip(pts, kps.visible):
        if vis:
            draw.ellipse([x - r, y - r, x + r, y + r], outline=(255, 60, 0), width=max(1, scale // 2))
    return canvas


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    _print_config(f"checkpoint ({args.ckpt}, epoch {ckpt.epoch})", config_to_text(cfg))
    image = load_netpbm(args.image)
    expected = (cfg.in_channels, cfg.input_h, cfg.input_w)
    if image.shape != expected:
        print(f"error: image size mismatch: expected {'x'.join(map(str, expected))} (CxHxW), "
              f"got {'x'.join(map(str, image.shape))}", file=sys.stderr)
        return EXIT_SHAPE
    net = ckpt.build_network()
    schema = schema_for(cfg.schema, cfg.num_keypoints)
    heatmaps = predict(net, image[None])
    kps = predict_keypoints(net, image[None])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_keypoint_file(out / "keypoints.txt", [(Path(args.image).stem, kps)], schema)
    for j, name in enumerate(schema.joints):
        save_netpbm(out / f"heatmap_{j:02d}_{name}.pgm", np.clip(heatmaps[0, j], 0.0, 1.0)[None])
    _overlay(image, kps, schema).save(out / "overlay.ppm", format="PPM")
    for name, (x, y), c in zip(schema.joints, kps.xy, kps.confidence):
        print(f"{name}\t{x:.2f}\t{y:.2f}\t{c:.4f}")
    return 0


def _load_eval_data(arg: str, cfg, split: str) -> Dataset:
    p = Path(arg)
    if p.is_dir():
        schema = schema_for(cfg.schema, cfg.num_keypoints)
        records = read_keypoint_file(p / "keypoints.txt", schema)
        images = np.stack([load_netpbm(p / f"{sid}.pgm") for sid, _ in records])
        _print_config(f"dataset directory ({arg})", f"samples = {len(records)}")
        return Dataset(images, [k for _, k in records], list(range(len(records))))
    spec = load_dataset_spec(arg)
    _print_config(f"dataset ({arg}, split {split})", "\n".join(f"{k} = {v}" for k, v in vars(spec).items()))
    train_idx, val_idx = split_indices(spec)
    idx = {"val": val_idx, "train": train_idx, "all": sorted(train_idx + val_idx)}[split]
    return load_toy(spec, idx)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    _print_config(f"checkpoint ({args.ckpt}, epoch {ckpt.epoch})", config_to_text(cfg))
    data = _load_eval_data(args.dataset, cfg, args.split)
    if data.images.shape[1:] != (cfg.in_channels, cfg.input_h, cfg.input_w):
        print(f"error: dataset images are {'x'.join(map(str, data.images.shape[1:]))}, network expects "
              f"{cfg.in_channels}x{cfg.input_h}x{cfg.input_w}", file=sys.stderr)
        return EXIT_SHAPE
    result = evaluate_model(ckpt.build_network(), data)
    text = render_report(result, schema_for(cfg.schema, cfg.num_keypoints).joints)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_gradcheck(args) -> int:
    _print_config("gradcheck", f"module = {args.module or 'all'}\nseed = {args.seed}\nsamples = {args.samples}")
    try:
        results = run_gradchecks(args.module, args.seed, args.samples)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    sys.stdout.write(render_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


def cmd_export_toy(args) -> int:
    spec = load_dataset_spec(args.dataset)
    _print_config(f"dataset ({args.dataset})", "\n".join(f"{k} = {v}" for k, v in vars(spec).items()))
    out = export_toy_dataset(spec, args.out)
    print(f"wrote {spec.num_samples} images and keypoints.txt to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lapnet", description="Lightweight attention hourglass pose network.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter and MAC report")
    p.add_argument("--config", default="lap2", help="config file or preset name (default lap2)")
    p.add_argument("--baseline", help="config file or preset to compare against")
    p.add_argument("--input-size", type=_parse_size, help="override the input size, HxW")
    p.add_argument("--out", default="cost_report.tsv", help="tab-separated report path")
    p.add_argument("--depth", type=int, default=2, help="name depth for the grouped table")
    p.add_argument("--elementwise", action="store_true", help="also count bias adds, BN and activations")
    p.add_argument("--no-figure", action="store_true", help="skip the PNG bar chart")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train on the synthetic keypoint set")
    p.add_argument("--net", default="toy", help="network config file or preset (default toy)")
    p.add_argument("--train", default="toy", help="training config file or preset (default toy)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override shuffling and initialization seeds")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--record-time", action="store_true", help="write wall time into the epoch log")
    p.add_argument("--no-figure", action="store_true", help="skip the loss-curve PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="keypoints, heatmaps and overlay for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PGM or PPM image")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AP, PCK and per-joint error")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", default="toy", help="dataset spec file, 'toy', or an exported directory")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", help="check name or group (layers, cbam, bottleneck, hourglass, loss, network)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=16, help="entries checked per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-toy", help="write the synthetic dataset as PGM files")
    p.add_argument("--dataset", default="toy", help="dataset spec file or 'toy'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_toy)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("LAP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.code
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
