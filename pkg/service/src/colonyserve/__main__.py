"""Service launcher: pick a backend, bind a port."""

import argparse
import sys

import uvicorn

from .app import create_app
from .classical import ClassicalBackend


def build_backend(args: argparse.Namespace):
    if args.backend == "classical":
        return ClassicalBackend()
    if not args.detector_weights or not args.segmenter_weights:
        raise SystemExit(
            "the grounded backend needs --detector-weights and --segmenter-weights"
        )
    from .grounded import GroundedBackend

    return GroundedBackend(
        detector_weights=args.detector_weights,
        segmenter_weights=args.segmenter_weights,
        device=args.device,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="colonyserve",
        description="HTTP inference service for colony detection/segmentation.",
    )
    parser.add_argument(
        "--backend",
        choices=["classical", "grounded"],
        default="classical",
        help="classical needs no weights; grounded loads local checkpoints",
    )
    parser.add_argument("--detector-weights", help="local detector checkpoint directory")
    parser.add_argument("--segmenter-weights", help="local segmenter checkpoint directory")
    parser.add_argument("--device", default="cpu", help="torch device for the grounded backend")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    args = parser.parse_args(argv)

    app = create_app(build_backend(args))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    sys.exit(main())
