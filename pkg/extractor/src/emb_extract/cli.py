"""Command line front end: emb-extract --job job.json"""

from __future__ import annotations

import argparse
import logging
import sys

from .job import JobError, load_job
from .run import ExtractionError, extract


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="emb-extract",
        description="Extract audio/text embeddings into EMB1 files plus a manifest.",
    )
    parser.add_argument("--job", required=True, help="path to a job JSON file")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        manifest = extract(load_job(args.job))
    except (JobError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExtractionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
