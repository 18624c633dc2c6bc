"""Command-line entry point: ``lightdetr <command> ...``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .config import SCALE_NAMES, ConfigError, ModelConfig, resolve_config

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, **extra) -> ModelConfig:
    overrides = _parse_set(args.set)
    for key, value in extra.items():
        if value is not None:
            overrides[key] = value
    return resolve_config(args.scale, overrides, args.config)


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_resolve(args) -> int:
    print(_config(args).describe())
    return EXIT_OK


def cmd_count(args) -> int:
    from .model import count_flops, count_parameters, init_model

    cfg = _config(args, input_size=args.input_size, seed=args.seed)
    pc = count_parameters(cfg)
    params = init_model(cfg)
    opt = count_flops(cfg, params=params)
    base = count_flops(cfg, layout_mode="row-major", params=params)
    print(f"scale               {cfg.scale}")
    print(f"input_size          {cfg.input_size}")
    print(f"params_inference    {pc.inference}  ({pc.inference / 1e6:.2f} M)")
    print(f"params_with_groups  {pc.training}  ({pc.training / 1e6:.2f} M, {cfg.decoder.num_groups} groups)")
    print(f"flops               {opt.flops}  ({opt.gflops:.2f} G, one per multiply-add)")
    print(f"raw_flops           {opt.raw_flops}  (two per multiply-add)")
    if opt.raw_flops != base.raw_flops:
        print(f"error: layout modes disagree on arithmetic ({opt.raw_flops} vs {base.raw_flops})", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import LayoutMismatchError, bench_layouts, records_csv

    cfg = _config(args, seed=args.seed)
    try:
        base, opt = bench_layouts(cfg, runs=args.runs, warmup=args.warmup)
    except LayoutMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    _write(records_csv([base, opt]), args.out)
    verdict = "faster or equal" if opt.median_ms <= base.median_ms else "slower"
    print(f"# window-major median {opt.median_ms:.2f} ms vs row-major {base.median_ms:.2f} ms: {verdict}",
          file=sys.stderr)
    return EXIT_OK


def cmd_bench_kernels(args) -> int:
    from .bench import bench_kernels

    rows = bench_kernels(runs=args.runs)
    lines = ["kernel,backend,median_ms,speedup"]
    lines += [f"{r.kernel},{r.backend},{r.median_ms:.4f},{r.speedup:.2f}" for r in rows]
    _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_gradients

    cfg = _config(args)
    failed = False
    for seed in range(args.seed, args.seed + args.seeds):
        report = check_gradients(cfg, seed)
        terms = "  ".join(f"{k}={v:.2e}" for k, v in report.errors.items())
        print(f"seed {seed}: {terms}  {'ok' if report.passed else 'FAIL'}")
        failed |= not report.passed
    return EXIT_INVARIANT if failed else EXIT_OK


def cmd_infer(args) -> int:
    from .model import load_image, run_inference, synthetic_image

    if args.input == "synthetic":
        cfg = _config(args, seed=args.seed, input_size=args.input_size)
        image, image_id = synthetic_image(cfg.input_size, cfg.seed), "synthetic"
    else:
        image = load_image(args.input)
        if image.shape[0] != image.shape[1]:
            raise ValueError(f"{args.input}: square images only, got {image.shape[1]}x{image.shape[0]}")
        cfg = _config(args, seed=args.seed, input_size=image.shape[0])
        image_id = Path(args.input).stem
    dets = run_inference(cfg, image, args.out, image_id)
    boxes_ok = bool(((dets.boxes >= 0) & (dets.boxes <= 1)).all() and (dets.boxes[:, 2:] > 0).all())
    print(f"{len(dets)} detections -> {args.out}  (top score {dets.scores[0]:.4f})")
    if len(dets) != cfg.decoder.num_queries or not boxes_ok:
        print("error: detection count or box validity check failed", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_nms_sweep(args) -> int:
    from .postprocess import read_detections, sweep_csv, threshold_sweep

    try:
        thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --thresholds {args.thresholds!r}") from exc
    dets = read_detections(args.detections)
    reports = threshold_sweep(dets, thresholds, args.iou)
    _write(sweep_csv(reports), args.out)
    for a, b in zip(reports, reports[1:]):
        if a.threshold < b.threshold and any(y > x for x, y in zip(a.per_image_box_counts, b.per_image_box_counts)):
            print("error: box counts increased with the threshold", file=sys.stderr)
            return EXIT_INVARIANT
    if any(sum(r.histogram) != len(dets) for r in reports):
        print("error: histogram does not sum to the image count", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightdetr", description="Lightweight detection transformer tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def scaled(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("scale", choices=SCALE_NAMES)
        p.add_argument("--config", type=Path, help="TOML config file (dotted keys or tables)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable, wins over --config")
        p.set_defaults(func=func)
        return p

    scaled("resolve", cmd_resolve, "print the resolved configuration")

    p = scaled("count", cmd_count, "parameter and FLOP counts")
    p.add_argument("--input-size", type=int)
    p.add_argument("--seed", type=int)

    p = scaled("bench", cmd_bench, "time the encoder in both layout modes")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = scaled("gradcheck", cmd_gradcheck, "finite-difference check of the loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to check")

    p = scaled("infer", cmd_infer, "run the full pipeline with seeded random weights")
    p.add_argument("--input", required=True, help="'synthetic', a binary .ppm or an (H, W, 3) .npy file")
    p.add_argument("--out", required=True, help="detection output (JSON lines)")
    p.add_argument("--input-size", type=int, help="size of the synthetic image")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("nms-sweep", help="score-threshold sweep over a detection file")
    p.add_argument("--detections", required=True, type=Path)
    p.add_argument("--thresholds", required=True, help="comma-separated score cutoffs")
    p.add_argument("--iou", type=float, default=0.65)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_nms_sweep)

    p = sub.add_parser("bench-kernels", help="compare compiled and pure-Python kernels")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench_kernels)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
