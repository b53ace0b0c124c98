"""Adapter command line.

    survkit-yolo-adapter serve --model model.json [--confidence 0.25]
    survkit-yolo-adapter selfcheck [--transcripts DIR] [--model model.json]

`serve` speaks the stdio JSON protocol (PROTOCOL.md) until stdin closes.
`selfcheck` replays the golden conformance transcripts against a freshly
spawned serve process and reports one line per fixture.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import AdapterConfig
from .selfcheck import run_selfcheck
from .server import serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survkit-yolo-adapter")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="serve a detection model over stdio")
    p.add_argument("--model", required=True, help="model file (.json stub/blob or .pt/.ts TorchScript)")
    p.add_argument("--confidence", type=float, default=0.25)
    p.add_argument("--device", default="cpu")
    p.add_argument("--max-image-side", type=int, default=8192)

    p = sub.add_parser("selfcheck", help="replay the protocol conformance transcripts")
    p.add_argument("--transcripts", help="transcript directory (default: discovered / env)")
    p.add_argument(
        "--command",
        help="backend command to test instead of this adapter (advanced)",
    )
    p.add_argument("--timeout", type=float, default=30.0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        try:
            config = AdapterConfig(
                model_path=Path(args.model),
                confidence=args.confidence,
                device=args.device,
                max_image_side=args.max_image_side,
            )
        except (FileNotFoundError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return serve(config)

    import shlex

    try:
        results = run_selfcheck(
            transcripts_dir=Path(args.transcripts) if args.transcripts else None,
            command=shlex.split(args.command) if args.command else None,
            timeout=args.timeout,
        )
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failed = 0
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status}  {result.name}")
        for failure in result.failures:
            print(f"      {failure}")
        failed += not result.passed
    print(f"{len(results) - failed}/{len(results)} transcripts passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
