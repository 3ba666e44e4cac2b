"""Command-line interface: ``nfa-inspect {detect,eval,calibrate}``.

Configuration precedence: built-in defaults, then the file named by
``NFA_INSPECT_CONFIG`` (or ``--config``), then explicit flags.

Exit codes: 0 success with no detection, 3 detections present (detect
only), 2 usage or configuration error, 1 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evalkit import NoiseSpec, calibrate_h0, evaluate
from .fusion import export_anomaly_map, segment
from .imagio import FormatError, load_image, multilight_pca
from .pipeline import ConfigError, DetectorConfig, detect, dump_config, load_config

__all__ = ["main", "build_parser", "resolve_config"]

CONFIG_ENV = "NFA_INSPECT_CONFIG"
EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DETECTIONS = 0, 1, 2, 3

# flag -> DetectorConfig field
_CONFIG_FLAGS = {
    "extractor": dict(choices=("pca", "gabor", "external")),
    "nfa": dict(choices=("pixel", "block", "region")),
    "scales": dict(type=int, help="number of pyramid scales K (default 4)"),
    "patch_size": dict(type=int, help="patch size s for patch PCA (default 17)"),
    "components": dict(type=int, help="feature count m (default 45 for pca, 5 for external)"),
    "block_size": dict(type=int, help="block side w (default 51)"),
    "block_stride": dict(type=int, help="block stride (default 10)"),
    "tail_p": dict(type=float, help="per-pixel tail probability p (default 0.01)"),
    "stilde": dict(type=float, help="independence length for region NFA"),
    "threshold_as": dict(type=float, help="mask threshold on AS = -log10 NFA (default 0)"),
    "features_path": dict(help="NFAT feature tensor for --extractor external"),
    "multilight": dict(nargs=5, metavar="IMG", help="five views: diffuse then four grazing"),
    "keep_last": dict(type=int, help="trailing multilight components kept (default 3)"),
    "out_map": dict(help="anomaly-score map output (NFAT)"),
    "out_png": dict(help="anomaly-score visualization (PNG)"),
    "out_mask": dict(help="binary detection mask (PNG)"),
    "out_regions": dict(help="region list output (region NFA only)"),
    "threads": dict(type=int, help="worker threads (output does not depend on it)"),
    "seed": dict(type=int, help="seed for the noise generator"),
}


class UsageError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for name, kw in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name,
                       default=argparse.SUPPRESS, **kw)
    p.add_argument("--config", default=argparse.SUPPRESS,
                   help=f"config file (default: ${CONFIG_ENV})")
    p.add_argument("--dump-config", nargs="?", const="-", default=None, metavar="PATH",
                   help="write the resolved configuration and exit ('-' or no value: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfa-inspect",
        description="Multi-scale a contrario anomaly detection for textured surfaces.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect anomalies in one image")
    p.add_argument("image", nargs="?", help="input image (omit with --multilight)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="pixel AUC / GAP over an MVTec-style dataset")
    p.add_argument("root", help="dataset root or a single category directory")
    p.add_argument("--categories", nargs="+", default=None)
    p.add_argument("--out-csv", default=None, help="CSV report path")
    _add_config_flags(p)

    p = sub.add_parser("calibrate", help="false-alarm counts on synthetic noise")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--noise", choices=("gaussian", "uniform", "phase"), default="gaussian")
    p.add_argument("--size", type=int, nargs=2, default=(256, 256), metavar=("H", "W"))
    p.add_argument("--texture", default=None, help="source image for --noise phase")
    p.add_argument("--out-csv", default=None, help="CSV report path (default: stdout)")
    _add_config_flags(p)
    return parser


def resolve_config(args: argparse.Namespace, environ=os.environ) -> DetectorConfig:
    cfg = DetectorConfig()
    path = getattr(args, "config", None) or environ.get(CONFIG_ENV)
    if path:
        try:
            cfg = load_config(path, cfg)
        except OSError as exc:
            raise OSError(f"cannot read config file {path}: {exc}") from exc
    overrides = {name: getattr(args, name) for name in _CONFIG_FLAGS if hasattr(args, name)}
    return dataclasses.replace(cfg, **overrides).validate()


def _write_text(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _detect_input(args, cfg: DetectorConfig) -> np.ndarray:
    if cfg.multilight:
        if args.image:
            raise UsageError("give either an image or --multilight, not both")
        return multilight_pca([load_image(p) for p in cfg.multilight], cfg.keep_last)
    if not args.image:
        raise UsageError("detect needs an input image")
    return load_image(args.image)


def _regions_text(result) -> str:
    blocks = []
    for k, c, j, rset in result.regions:
        h, w = rset.shape
        blocks.append(f"# scale {k} channel {c} component {j} size {h}x{w}\n" + rset.to_text())
    return "".join(blocks)


def cmd_detect(args, cfg: DetectorConfig) -> int:
    image = _detect_input(args, cfg)
    result = detect(image, cfg)
    amap = result.anomaly_map
    export_anomaly_map(amap, nfat_path=cfg.out_map, png_path=cfg.out_png,
                       mask_path=cfg.out_mask, threshold_as=cfg.threshold_as)
    if cfg.out_regions:
        if cfg.nfa != "region":
            raise UsageError("--out-regions requires --nfa region")
        Path(cfg.out_regions).write_text(_regions_text(result), encoding="utf-8")
    n = int(np.count_nonzero(segment(amap, cfg.threshold_as)))
    print(f"{cfg.variant}: max AS {amap.score.max():.3f}, {n} pixels above "
          f"AS {cfg.threshold_as:g}")
    return EXIT_DETECTIONS if n else EXIT_OK


def cmd_eval(args, cfg: DetectorConfig) -> int:
    if not Path(args.root).is_dir():
        raise OSError(f"dataset root {args.root} is not a directory")
    report = evaluate(args.root, dataclasses.replace(cfg, threads=1), threads=cfg.threads,
                      categories=args.categories)
    if not report.rows:
        sys.stderr.write("".join(f"skipped: {e}\n" for e in report.errors))
        raise UsageError(f"no evaluable samples under {args.root}")
    if args.out_csv:
        Path(args.out_csv).write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_calibrate(args, cfg: DetectorConfig) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    texture = None
    if args.noise == "phase":
        if not args.texture:
            raise UsageError("--noise phase requires --texture")
        texture = load_image(args.texture)
    h, w = args.size
    channels = 1 if texture is None else texture.shape[0]
    spec = NoiseSpec(args.noise, h, w, channels=channels, texture=texture)
    if texture is not None and texture.shape[1:] != (h, w):
        spec = dataclasses.replace(spec, height=texture.shape[1], width=texture.shape[2])
    report = calibrate_h0(spec, cfg, args.trials, seed=cfg.seed)
    _write_text(args.out_csv or "-", report.to_csv())
    return EXIT_OK


COMMANDS = {"detect": cmd_detect, "eval": cmd_eval, "calibrate": cmd_calibrate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            _write_text(args.dump_config, dump_config(cfg))
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except (OSError, FormatError) as exc:
        print(f"nfa-inspect: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"nfa-inspect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
