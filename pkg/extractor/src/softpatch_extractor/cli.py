"""CLI: extract patch features for one or more object classes."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ExtractorConfig
from .extract import extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softpatch-extract",
        description="Convert an MVTecAD-style image tree into SPF1 features + manifests.",
    )
    parser.add_argument("--class-dir", required=True,
                        help="one object class directory (train/, test/, ground_truth/)")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--resize", type=int, default=256)
    parser.add_argument("--crop", type=int, default=224)
    parser.add_argument("--no-pretrained", action="store_true",
                        help="random backbone weights (testing only)")
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ExtractorConfig(
        resize=args.resize,
        crop=args.crop,
        pretrained=not args.no_pretrained,
        seed=args.seed,
    )
    try:
        files = extract(args.class_dir, args.out_dir, config)
    except (ValueError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    for path in files:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
