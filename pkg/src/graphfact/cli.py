"""Command-line entry point: ``graphfact {assess,correct,report,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from graphfact.harness import (
    DatasetError,
    RunManifest,
    ServiceSettings,
    format_summary,
    make_services,
    recompute_summary,
    run_benchmark,
    synthetic_record,
    write_dataset,
)
from graphfact.llm_io import Mode
from graphfact.pipeline import CorrectionConfig


def _service_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.CACHE.value,
                   help="how the response store is used (default: cache)")
    p.add_argument("--store", default="graphfact-store", help="response store directory")
    p.add_argument("--model", default=None, help="generation model name (default: $GRAPHFACT_LLM_MODEL)")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-fetch", action="store_true", help="use search snippets only, skip page bodies")


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("dataset", help="JSONL dataset")
    p.add_argument("--out", default=None, help="run directory (default: runs/<dataset name>-<command>)")
    p.add_argument("--config", default=None, help="JSON file with CorrectionConfig fields")
    p.add_argument("--theta", type=float, default=None, help="precision threshold")
    p.add_argument("--max-iter", type=int, default=None, help="maximum refinement rounds")
    p.add_argument("--ibound", type=int, default=None, help="mini-bucket i-bound")
    p.add_argument("--k", type=int, default=None, help="search results per atom")
    p.add_argument("--recall-k", type=int, default=None, help="fixed K for recall (default: per response)")
    p.add_argument("--workers", type=int, default=4, help="records processed in parallel")
    _service_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphfact", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    _run_args(sub.add_parser("assess", help="assess factuality of every response"))
    _run_args(sub.add_parser("correct", help="run the correction loop on every response"))
    rep = sub.add_parser("report", help="print the summary of a finished run")
    rep.add_argument("run_dir")
    syn = sub.add_parser("synth", help="write a dataset of deliberately incorrect answers")
    syn.add_argument("questions", help="JSONL file with id, category, question")
    syn.add_argument("--out", required=True, help="output dataset path")
    _service_args(syn)
    return parser


def _config(args) -> CorrectionConfig:
    config = CorrectionConfig()
    if args.config:
        config = CorrectionConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    overrides = {
        "theta": args.theta,
        "max_iterations": args.max_iter,
        "ibound": args.ibound,
        "k_contexts": args.k,
        "recall_k": args.recall_k,
    }
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})


def _settings(args) -> ServiceSettings:
    return ServiceSettings(
        model_name=args.model or os.environ.get("GRAPHFACT_LLM_MODEL", "default"),
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        seed=args.seed,
        fetch_bodies=not args.no_fetch,
    )


def _run(args) -> int:
    out = args.out or str(Path("runs") / f"{Path(args.dataset).stem}-{args.command}")
    manifest = RunManifest(
        dataset=args.dataset,
        output_dir=out,
        store=args.store if args.mode != Mode.LIVE.value else None,
        mode=args.mode,
        task=args.command,
        config=_config(args),
        services=_settings(args),
        workers=args.workers,
    )
    result = run_benchmark(manifest)
    if result.summaries:
        print(format_summary(result.summaries))
    print(f"{len(result.outcomes) - len(result.failures)}/{len(result.outcomes)} records ok; outputs in {result.output_dir}")
    for f in result.failures:
        print(f"  {f.record.id}: {f.stage}: {f.error}", file=sys.stderr)
    return 0 if not result.failures else 1


def _report(args) -> int:
    summaries = recompute_summary(args.run_dir)
    if not summaries:
        print("no successful records", file=sys.stderr)
        return 1
    print(format_summary(summaries))
    return 0


def _synth(args) -> int:
    rows = [json.loads(l) for l in Path(args.questions).read_text(encoding="utf-8").splitlines() if l.strip()]
    if not rows:
        raise DatasetError(f"{args.questions}: no questions")
    manifest = RunManifest(
        dataset=args.questions,
        output_dir=str(Path(args.out).parent),
        store=args.store if args.mode != Mode.LIVE.value else None,
        mode=args.mode,
        services=_settings(args),
    )
    llm = make_services(manifest).llm
    failures, records = 0, []
    for row in rows:
        try:
            records.append(synthetic_record(row, llm))
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures += 1
            print(f"  {row.get('id', '?')}: {exc}", file=sys.stderr)
    write_dataset(records, args.out)
    print(f"wrote {len(records)} synthetic records to {args.out}")
    return 0 if not failures else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command in ("assess", "correct"):
            return _run(args)
        if args.command == "report":
            return _report(args)
        return _synth(args)
    except (DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
