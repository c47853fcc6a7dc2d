"""Command line front end: oodexport --in images/ --out dump.etlt"""

from __future__ import annotations

import argparse
import logging
import sys

from oodexport.container import ContainerError
from oodexport.export import ExportError, ExportJob, export


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"error: {message}")


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated values, got {text!r}")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oodexport", description="dump classifier features and logits over an image folder")
    p.add_argument("--in", dest="input_dir", required=True, help="image folder (one subdirectory per pool)")
    p.add_argument("--out", dest="out_path", required=True, help="output container path")
    p.add_argument("--model", default="resnet18", choices=["resnet18", "resnet34"])
    p.add_argument("--classes", type=int, default=10, help="classifier head width")
    p.add_argument("--weights", default=None, help="state-dict checkpoint; random seeded init when omitted")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--device", default="cpu")
    p.add_argument("--epsilon", type=float, default=0.0, help="pixel nudge size; > 0 adds logits_perturbed")
    p.add_argument("--temperature", type=float, default=1000.0, help="softmax temperature for the nudge gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mean", type=_triple, default=(0.5, 0.5, 0.5), help="per-channel mean, e.g. 0.49,0.48,0.45")
    p.add_argument("--std", type=_triple, default=(0.5, 0.5, 0.5), help="per-channel std")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
        return 1
    try:
        summary = export(ExportJob(**vars(args)))
    except (ExportError, ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(
        f"wrote {summary.count} records (d={summary.feature_dim}, classes={summary.n_classes}) "
        f"to {summary.path}\nsha256 {summary.sha256}"
    )
    return 0


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
