"""Command line for the service."""

from __future__ import annotations

import argparse
import sys

from .registry import REGISTRY, ModelUnavailable
from .service import ServiceConfig, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="detector-service",
        description="Serve an object detector over the JSON bridge protocol.",
    )
    parser.add_argument("--model", default="faster-rcnn", choices=REGISTRY)
    parser.add_argument(
        "--weights",
        default="default",
        help='"default" (pretrained), "none" (random), or a state-dict path',
    )
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--score-floor", type=float, default=0.05)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8300)
    args = parser.parse_args(argv)
    try:
        config = ServiceConfig(
            model=args.model,
            weights=args.weights,
            device=args.device,
            score_floor=args.score_floor,
            host=args.host,
            port=args.port,
        )
        serve(config)
    except ValueError as e:
        print(f"bad configuration: {e}", file=sys.stderr)
        return 2
    except ModelUnavailable as e:
        print(f"model unavailable: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
