"""Command line entry point: ``embedcal <command> --scenario FILE --out DIR``.

Exit codes: 0 success, 1 invalid scenario or arguments, 2 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import io as fileio
from .errors import IoError, ParseError, StageFailure, ValidationError
from .pipeline import STAGES, run
from .scenario import BUNDLED, load_scenario
from .slcodec import build_pattern_set, rasterize

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_STAGE = 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, default=BUNDLED, help="scenario YAML (default: bundled example)")
    common.add_argument("--out", type=Path, default=None, help="output directory (default: from the scenario)")
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--no-compensation", action="store_true", help="calibrate from nominal camera points")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="embedcal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage only")
    p_run = sub.add_parser("run", parents=[common], help="run several stages (default: all)")
    p_run.add_argument("--stages", default=",".join(STAGES), help="comma-separated stage list")
    p_pat = sub.add_parser("patterns", parents=[common], help="write the pattern frames as graymaps")
    p_pat.add_argument("--projector", type=int, default=0, help="projector whose ID bits are drawn")
    return parser


def _write_patterns(scenario, out: Path, projector: int) -> int:
    spec = scenario.pattern_spec
    if not 0 <= projector < spec.num_projectors:
        raise ValidationError(f"--projector must lie in [0, {spec.num_projectors})")
    patterns = build_pattern_set(spec)
    center = ((spec.width - 1) // 2, (spec.height - 1) // 2)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(patterns):
        image = rasterize(frame, projector, spec.width, spec.height, coarse_center=center)
        fileio.export_raster(image, out / f"pattern_{i:03d}_{frame.kind}_{frame.index}.pgm")
    return len(patterns)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        scenario = load_scenario(args.scenario, seed=args.seed)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = args.out if args.out is not None else scenario.outputs.directory
    try:
        if args.command == "patterns":
            count = _write_patterns(scenario, out, args.projector)
            print(f"wrote {count} pattern frames to {out}")
            return EXIT_OK
        stages = [s.strip() for s in args.stages.split(",") if s.strip()] if args.command == "run" else [args.command]
        report = run(scenario, stages, out, use_compensation=False if args.no_compensation else None)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:  # bad --stages
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (StageFailure, IoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    for row in report["payload"].get("evaluate", {}).get("reprojection", []):
        print(f"projector {row['projector']}: rms {row['rms_px']:.6f} px, max {row['max_px']:.6f} px")
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
