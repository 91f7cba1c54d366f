"""``surroundgt`` command line.

Settings come from, in increasing priority: a YAML/JSON config file
(``--config``), ``SGT_*`` environment variables, and command-line flags.

Environment variables: ``SGT_CONFIG``, ``SGT_INPUT``, ``SGT_OUTPUT``,
``SGT_CALIBRATION``, ``SGT_STAGES`` (comma list), ``SGT_THRESHOLD``,
``SGT_WORKERS``, ``SGT_SEED``, ``SGT_FACE_SIZE``, ``SGT_BEV_EXTENT``,
``SGT_BEV_CELLS``, ``SGT_FAR_PLANE``, ``SGT_LAYOUT``, ``SGT_SUMMARY``.

Exit codes: 0 success, 1 some frames failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .pipeline import STAGES, ConfigError, PipelineConfig, run, summary_path

ENV_PREFIX = "SGT_"

# subcommand -> stages it runs (the 'lut' stage is a no-op when LUTs are current)
COMMAND_STAGES = {
    "build-lut": ("lut",),
    "render": ("lut", "rgb", "depth"),
    "gen-gt": ("lut", "instance", "motion", "flow"),
    "remap-events": ("lut", "events"),
    "bev": ("lut", "bev"),
    "stats": ("stats",),
    "all": STAGES,
}


def _stages(value) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    return tuple(value)


def _opt_path(value):
    return None if value in (None, "") else Path(value)


# setting -> converter; shared by the config file, environment and flags
FIELDS = {
    "input": _opt_path,
    "output": _opt_path,
    "calibration": _opt_path,
    "stages": _stages,
    "threshold": float,
    "workers": int,
    "seed": int,
    "face_size": int,
    "bev_extent": float,
    "bev_cells": int,
    "far_plane": float,
    "layout": _opt_path,
    "summary": _opt_path,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--input", help="simulator export root")
    common.add_argument("--output", help="output root")
    common.add_argument("--calibration", help="calibration file or directory (default: <input>/calibration)")
    common.add_argument("--stages", help=f"comma list from {','.join(STAGES)}")
    common.add_argument("--threshold", help="motion threshold in metres (default 0.5)")
    common.add_argument("--workers", help="worker processes (default: available cores)")
    common.add_argument("--seed", help="session seed for instance colours")
    common.add_argument("--face-size", dest="face_size", help="cubemap face size in pixels (default: detected)")
    common.add_argument("--bev-extent", dest="bev_extent", help="BEV side length in metres (default 40)")
    common.add_argument("--bev-cells", dest="bev_cells", help="BEV cells per side (default 1024)")
    common.add_argument("--far-plane", dest="far_plane", help="depth encoding far plane in metres (default 1000)")
    common.add_argument("--layout", help="input layout config file")
    common.add_argument("--summary", help="JSON summary path (default: <output>.summary.json)")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and config, write nothing")
    common.add_argument("--resume", action="store_true", help="skip frames whose outputs are current")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="surroundgt", description="Surround-view fisheye ground-truth toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "build-lut": "build fisheye lookup tables",
        "render": "remap RGB, semantic and depth cubemaps to fisheye",
        "gen-gt": "instance, motion and optical flow ground truth",
        "remap-events": "remap cubemap event streams to fisheye",
        "bev": "BEV semantic and height maps",
        "stats": "class histogram and object statistics",
        "all": "every stage",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _convert(name: str, value, source: str):
    try:
        return FIELDS[name](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"bad value {value!r} from {source}: {exc}") from exc


def load_config_file(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)  # JSON is a subset of YAML
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("config", f"{path} must hold a mapping")
    unknown = sorted(set(doc) - set(FIELDS))
    if unknown:
        raise ConfigError(unknown[0], f"unknown config key in {path}")
    return {k: _convert(k, v, str(path)) for k, v in doc.items()}


def resolve_config(args: argparse.Namespace, environ=None) -> PipelineConfig:
    environ = os.environ if environ is None else environ
    settings: dict = {}
    config_path = args.config or environ.get(ENV_PREFIX + "CONFIG")
    if config_path:
        settings.update(load_config_file(config_path))
    for name in FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            settings[name] = _convert(name, environ[key], key)
    for name in FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = _convert(name, value, "--" + name.replace("_", "-"))
    # the subcommand fixes the stages unless --stages is given (or for 'all')
    if args.command != "all" and args.stages is None:
        settings["stages"] = COMMAND_STAGES[args.command]
    return PipelineConfig(dry_run=args.dry_run, resume=args.resume, **settings)


def _setup_logging(verbosity: int) -> None:
    handler = logging.StreamHandler(sys.stderr)
    # one record per write; worker tags keep parallel lines attributable
    handler.setFormatter(logging.Formatter("%(asctime)s [%(processName)s] %(levelname)s %(message)s"))
    root = logging.getLogger("surroundgt")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbosity > 1 else logging.INFO if verbosity else logging.WARNING)
    root.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"surroundgt: configuration error: {exc}", file=sys.stderr)
        return 2
    code, summary = run(config)
    report = summary.to_dict()
    if code == 2:
        print(f"surroundgt: configuration error: {summary.failed.get('config')}", file=sys.stderr)
        return code
    if not config.dry_run:
        path = summary_path(config)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            print(f"surroundgt: cannot write summary {path}: {exc}", file=sys.stderr)
    print(
        f"frames: {len(summary.processed)} processed, {len(summary.resumed)} resumed, "
        f"{len(summary.skipped)} skipped, {len(summary.failed)} failed; "
        f"{summary.wall_seconds:.2f} s",
        file=sys.stderr,
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
