"""Command-line entry point: ``mimosar {simulate,focus,autofocus,report,run}``.

Exit codes: 0 ok, 2 validation, 3 insufficient GCPs, 4 ill-conditioned
geometry, 5 I/O or file format.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, pipeline
from .errors import MimosarError

log = logging.getLogger("mimosar")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 5


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment config (JSON)")
    p.add_argument("--out-dir", required=True, help="directory for all outputs")
    p.add_argument("--workers", type=int, default=None, help="worker threads for the data-parallel kernels")
    p.add_argument("--seed-override", type=int, default=None, help="replace the config seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mimosar", description="MIMO-SAR simulation, focusing and autofocus")
    ap.add_argument("--version", action="version", version=f"mimosar {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a range-compressed cube")
    _common(p)

    p = sub.add_parser("focus", help="back-project a cube into a stack and sum image")
    _common(p)
    p.add_argument("--cube", help="RCC1 cube (default: OUT_DIR/cube.rcc)")
    p.add_argument("--trajectory", help="trajectory JSON (default: OUT_DIR/trajectory.json)")
    p.add_argument("--oracle-trajectory", action="store_true", help="focus with the true states")
    p.add_argument("--write-stack", choices=("auto", "yes", "no"), default="auto",
                   help="also write frames as CIS1")

    p = sub.add_parser("autofocus", help="estimate the velocity error and compensate")
    _common(p)
    p.add_argument("--stack", help="stack descriptor or CIS1 file (default: OUT_DIR/stack.json)")

    p = sub.add_parser("report", help="image quality metrics against the true scene")
    _common(p, config_required=False)
    p.add_argument("--before", help="CIM1 image (default: OUT_DIR/image.cim)")
    p.add_argument("--after", help="CIM1 image (default: OUT_DIR/autofocused.cim)")
    p.add_argument("--truth", help="scene JSON (default: OUT_DIR/scene.json)")
    p.add_argument("--search-radius", type=float, default=1.0, help="peak search radius around each target (m)")

    p = sub.add_parser("run", help="simulate, focus, autofocus and report")
    _common(p)
    p.add_argument("--oracle-trajectory", action="store_true", help="focus with the true states")
    return ap


def _dispatch(args) -> None:
    out = Path(args.out_dir)
    cfg = pipeline.load_config(args.config, args.seed_override) if args.config else None
    if args.command == "simulate":
        pipeline.run_simulate(cfg, out, args.workers)
    elif args.command == "focus":
        write = {"auto": None, "yes": True, "no": False}[args.write_stack]
        pipeline.run_focus(args.cube or out / "cube.rcc", args.trajectory or out / "trajectory.json",
                           cfg.image_grid(), out, use_nav=not args.oracle_trajectory,
                           workers=args.workers if args.workers is not None else cfg.workers, write_stack=write)
    elif args.command == "autofocus":
        res = pipeline.run_autofocus(args.stack or out / "stack.json", cfg, out, args.workers)
        est = res["estimate"]
        print("delta_v = " + " ".join(f"{v:+.5f}" for v in est.delta_v)
              + "  sigma = " + " ".join(f"{s:.5f}" for s in est.sigma))
    elif args.command == "report":
        pipeline.run_report(args.before or out / "image.cim", args.after or out / "autofocused.cim",
                            args.truth or out / "scene.json", out, args.search_radius)
    elif args.command == "run":
        res = pipeline.run_all(cfg, out, args.workers, use_nav=not args.oracle_trajectory)
        est = res["autofocus"]["estimate"]
        print("delta_v = " + " ".join(f"{v:+.5f}" for v in est.delta_v)
              + "  sigma = " + " ".join(f"{s:.5f}" for s in est.sigma))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _dispatch(args)
    except MimosarError as exc:
        print(f"mimosar: error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mimosar: error [io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"mimosar: error [validation]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
