"""``stgrid`` command line: synth, edit, optimize, render, evaluate, run.

Exit codes: 0 success, 2 invalid input, 3 runtime failure. Errors are
printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, pipeline
from .config import PipelineConfig, load_config, parse_config, with_overrides
from .errors import SpecError, StgridError, ValidationError
from .synth import preset

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise SpecError(f"usage: {message}")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _times(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("times must be comma-separated integers") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config (JSON)")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--workers", type=_positive, help="worker threads (default: logical cores)")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single worker, fixed reduction order")

    parser = _Parser(prog="stgrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stgrid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic multi-view scene")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("spec", nargs="?", help="scene spec (JSON)")
    src.add_argument("--preset", help="named scene: static, translating, crossing, acceptance")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("png", "stgf"), default="png")

    sub.add_parser("edit", parents=[common], help="edit a grid with context token propagation")
    sub.add_parser("optimize", parents=[common], help="fit the Gaussian scene to edited frames")

    p = sub.add_parser("render", parents=[common], help="render frames from a fitted scene")
    p.add_argument("--scene", help="scene file (default: from the config)")
    p.add_argument("--times", type=_times, help="comma-separated time indices (default: all)")
    p.add_argument("--out", help="output directory (default: <output>/render)")

    p = sub.add_parser("evaluate", parents=[common], help="warping error and fidelity report")
    p.add_argument("--rendered", help="manifest of rendered frames to score against the edit")

    p = sub.add_parser("run", parents=[common], help="synth (optional), edit, optimize, render, evaluate")
    p.add_argument("--preset", help="synthesize this scene into <output>/input first")
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return with_overrides(cfg, seed=args.seed, workers=args.workers, deterministic=args.deterministic)


def _read_spec(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise SpecError(f"cannot read spec {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SpecError(f"spec {path} is not valid JSON: {exc}") from None


def cmd_synth(args) -> dict:
    data = preset(args.preset) if args.preset else _read_spec(args.spec)
    path = pipeline.run_synth(data, args.out, seed=args.seed, suffix="." + args.format)
    return {"manifest": str(path)}


def cmd_edit(args) -> dict:
    return {"manifest": str(pipeline.run_edit(_config(args)))}


def cmd_optimize(args) -> dict:
    return {"scene": str(pipeline.run_optimize(_config(args)))}


def cmd_render(args) -> dict:
    cfg = _config(args)
    scene = args.scene or cfg.scene_path()
    out = args.out or cfg.output_dir() / "render"
    return {"manifest": str(pipeline.run_render(scene, out, args.times, "." + cfg.output.frame_format))}


def cmd_evaluate(args) -> dict:
    return {"report": str(pipeline.run_evaluate(_config(args), args.rendered))}


def cmd_run(args) -> dict:
    cfg = _config(args)
    out = cfg.output_dir()
    if args.preset:
        grid = pipeline.run_synth(preset(args.preset), out / "input", seed=args.seed)
        cfg = parse_config({**cfg.model_dump(), "paths": {**cfg.paths.model_dump(), "grid": str(grid)}})
    pipeline.run_edit(cfg)
    scene = pipeline.run_optimize(cfg)
    rendered = pipeline.run_render(scene, out / "render", None, "." + cfg.output.frame_format)
    report = pipeline.run_evaluate(cfg, rendered)
    return {"report": str(report)}


COMMANDS = {"synth": cmd_synth, "edit": cmd_edit, "optimize": cmd_optimize,
            "render": cmd_render, "evaluate": cmd_evaluate, "run": cmd_run}


def _setup_logging() -> None:
    level = os.environ.get("STGRID_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
    except StgridError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return EXIT_VALIDATION if isinstance(exc, ValidationError) else EXIT_RUNTIME
    except MemoryError:
        print(json.dumps({"error": "out_of_memory", "message": "input too large"}), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # last resort: still machine-readable
        logging.getLogger(__name__).debug("unhandled", exc_info=True)
        print(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
