"""Command-line wrapper: extract --in trials.jsonl --model ID --out store.bin."""

from __future__ import annotations

import argparse
import logging
import sys

from .extract import DEFAULT_MAX_TOKENS, ExtractionError, ExtractionJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cladmop-extract",
        description="Dump multi-level criteria hidden states into an embedding store",
    )
    parser.add_argument("--in", dest="input_path", required=True,
                        help="trial JSON-lines file")
    parser.add_argument("--model", required=True,
                        help="model identifier or local model directory")
    parser.add_argument("--out", dest="output_path", required=True,
                        help="output store file")
    parser.add_argument("--max-tokens", dest="max_tokens", type=int,
                        default=DEFAULT_MAX_TOKENS)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--levels", default="6,12,18",
                        help="comma-separated block indices for coarse,medium,fine")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    levels = tuple(int(v) for v in args.levels.split(","))
    if len(levels) != 3:
        parser.error("--levels needs exactly three block indices")
    job = ExtractionJob(
        input_path=args.input_path,
        model_id=args.model,
        output_path=args.output_path,
        max_tokens=args.max_tokens,
        device=args.device,
        level_blocks=levels,
    )
    try:
        summary = extract(job)
    except ExtractionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"records={len(summary.trial_ids)} d_llm={summary.d_llm} "
          f"truncated={len(summary.truncated)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
