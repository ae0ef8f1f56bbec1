"""Export CLI: candidates JSONL in, trace file out."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .export import ExportError, ExportJob, UsageError, export_manifest, export_traces


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scas-export", description=__doc__)
    parser.add_argument("candidates", help="JSONL with question_id/candidate_id/question/answer")
    parser.add_argument("--model", required=True, help="checkpoint path or hub id")
    parser.add_argument("--template", default="qa", help="question template name")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--out", required=True, help="trace file to write")
    parser.add_argument("--manifest", default=None, help="optional manifest path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(
            model_id=args.model,
            input_path=args.candidates,
            template=args.template,
            batch_size=args.batch_size,
            out_path=args.out,
        )
        summary = export_traces(job)
        if args.manifest:
            manifest = export_manifest(job)
            Path(args.manifest).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        for skip in summary["skipped"]:
            print(
                f"skipped {skip['question_id']}/{skip['candidate_id']}: {skip['reason']}",
                file=sys.stderr,
            )
        print(f"exported {summary['records']} records (hidden_dim={summary['hidden_dim']}) -> {summary['out_path']}")
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ExportError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
