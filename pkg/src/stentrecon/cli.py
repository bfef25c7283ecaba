"""Command line entry point.

    stentrecon <stage> --manifest project.json [--set key=value ...]
    stentrecon all --manifest project.json
    stentrecon serve --manifest project.json --port 8080

Exit codes: 0 success, 2 validation thresholds missed, 3 stage dependency
missing, 4 bad input. ``--set`` overrides nest with dots
(``--set detection.min_contour_px=12``) and apply for this invocation only;
they are not written back to the manifest file.
"""

from __future__ import annotations

import argparse
import sys

from .detection import DetectionError
from .manifest import DependencyError, InputError, ProjectManifest, ValidationFailure
from .metrics import MetricsError
from .phantom import PhantomDesignError
from .pipeline import STAGES, run_stage
from .skeleton import SkeletonError
from .splines import SplineError
from .stl_io import StlFormatError
from .surface import SurfaceError
from .topology import TopologyError
from .wirepath import WirePathError

_INPUT_ERRORS = (
    InputError,
    DetectionError,
    MetricsError,
    PhantomDesignError,
    SkeletonError,
    SplineError,
    StlFormatError,
    SurfaceError,
    TopologyError,
    WirePathError,
    OSError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stentrecon",
        description="Volumetric stent reconstruction from OCT pullbacks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", required=True, help="project manifest JSON")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a manifest key for this run (dots nest)",
        )

    for stage in (*STAGES, "all"):
        p = sub.add_parser(stage, help=f"run the {stage} stage" if stage != "all" else "run every stage in order")
        common(p)

    serve = sub.add_parser("serve", help="start the annotation HTTP service")
    common(serve)
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--host", default="127.0.0.1")
    return parser


def _load_manifest(args) -> ProjectManifest:
    manifest = ProjectManifest.load(args.manifest)
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise InputError(f"--set expects KEY=VALUE, got '{item}'")
        manifest.apply_override(key, value)
    return manifest


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        manifest = _load_manifest(args)
        if args.command == "serve":
            import uvicorn

            from .server import build_app

            uvicorn.run(build_app(manifest), host=args.host, port=args.port)
            return 0
        for result in run_stage(manifest, args.command):
            if result.cached:
                print(f"[{result.stage}] cached (inputs unchanged)")
            else:
                print(f"[{result.stage}] ok in {result.seconds:.2f}s: "
                      + ", ".join(result.outputs[:4])
                      + (" ..." if len(result.outputs) > 4 else ""))
        return 0
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except _INPUT_ERRORS as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
