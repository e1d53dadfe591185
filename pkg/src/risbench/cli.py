"""Command line entry point: ``risbench <subcommand>``.

Exit codes: 0 success, 1 runtime error, 2 partial (some engine queries
failed), 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from risbench.corpus import MediaRepository, acquire
from risbench.engines.runner import reparse, write_records
from risbench.errors import ConfigError, LockHeld, RisError
from risbench.pipeline import Config, Pipeline, load_config
from risbench.store import RunStore

log = logging.getLogger("risbench")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2, 3


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="risbench", description="Reverse image search retrievability benchmark.")
    p.add_argument("--config", help="YAML config file (default: $RISBENCH_CONFIG, else built-in defaults)")
    p.add_argument("--runs-dir", help="directory holding runs/<id> (overrides config)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("acquire", help="build a categorized corpus from the media repository")
    a.add_argument("--terms", type=_csv_list)
    a.add_argument("--per-term", type=int)
    a.add_argument("--width", type=int)
    a.add_argument("--out", help="corpus directory")
    a.add_argument("--api-url")

    s = sub.add_parser("submit", help="submit corpus images to engines and parse the results")
    s.add_argument("--run", required=True)
    s.add_argument("--engines", type=_csv_list)
    s.add_argument("--corpus", help="corpus directory")
    s.add_argument("--fixture-dir", help="directory for the fixture engine")

    j = sub.add_parser("judge", help="judge SERs by perceptual hash distance")
    j.add_argument("--run", required=True)
    j.add_argument("--methods", type=_csv_list)
    j.add_argument("--phash-bits", type=int)
    j.add_argument("--vishash-distance", type=float)

    r = sub.add_parser("report", help="write the report CSVs and SVG figures")
    r.add_argument("--run", required=True)
    r.add_argument("--methods", type=_csv_list)
    r.add_argument("--include-fixture", action="store_true", default=None)

    pl = sub.add_parser("pipeline", help="run every stage that is not complete yet")
    pl.add_argument("--run", required=True)
    pl.add_argument("--corpus")

    rp = sub.add_parser("reparse", help="re-parse archived raw bundles")
    rp.add_argument("--run", required=True)
    rp.add_argument("--out", help="write the re-parsed SER log here (default: compare with sers.log)")
    return p


def _configure(args) -> Config:
    cfg = load_config(args.config)
    top = {"runs_dir": args.runs_dir}
    if getattr(args, "corpus", None):
        top["corpus_dir"] = args.corpus
    cfg = cfg.with_overrides(**{k: v for k, v in top.items() if v is not None})
    if args.command == "acquire":
        cfg = cfg.with_overrides(acquire={"terms": args.terms, "per_term": args.per_term, "width": args.width, "api_url": args.api_url})
        if args.out:
            cfg = cfg.with_overrides(corpus_dir=args.out)
    elif args.command == "submit":
        cfg = cfg.with_overrides(engines={"enabled": args.engines, "fixture_dir": args.fixture_dir})
    elif args.command == "judge":
        cfg = cfg.with_overrides(judge={"methods": args.methods, "phash_bits": args.phash_bits, "vishash_distance": args.vishash_distance})
    elif args.command == "report":
        cfg = cfg.with_overrides(judge={"methods": args.methods}, report={"include_fixture": args.include_fixture})
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _configure(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _dispatch(args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RisError, OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _dispatch(args, cfg) -> int:
    if args.command == "acquire":
        a = cfg["acquire"]
        corpus = acquire(
            cfg["corpus_dir"], a["terms"], a["per_term"], a["width"], MediaRepository(a["api_url"], attempts=a["attempts"]), a["parallelism"], a["attempts"]
        )
        _print({"corpus": str(corpus.dir), "unique_images": len(corpus.images), "categories": corpus.category_counts(), "failures": len(corpus.failures())})
        return EXIT_OK

    if args.command == "reparse":
        store = RunStore(cfg["runs_dir"], args.run, writable=False)
        records, unparsed = reparse(store.raw_dir)
        if args.out:
            write_records(Path(args.out), records)
            _print({"records": len(records), "unparsed": len(unparsed), "out": args.out})
            return EXIT_OK
        tmp = store.dir / "sers.reparsed.log"
        try:
            same = write_records(tmp, records).path.read_bytes() == store.sers.path.read_bytes()
        finally:
            tmp.unlink(missing_ok=True)
        _print({"records": len(records), "unparsed": len(unparsed), "identical": same})
        return EXIT_OK if same else EXIT_ERROR

    try:
        pipe = Pipeline(cfg, args.run)
    except LockHeld as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    with pipe:
        if args.command == "submit":
            if not pipe.corpus.snapshot.path.exists():
                raise ConfigError(f"no corpus at {pipe.corpus.dir}; run acquire first or pass --corpus")
            pipe.acquire()  # adopts the existing corpus without downloading
            res = pipe.submit(force=True)
            failed = pipe._failed_engines()
            _print({"records": res.detail.records, "failed_engines": failed})
            return EXIT_PARTIAL if failed else EXIT_OK
        if args.command == "judge":
            res = pipe.judge()
            _print(res.detail.to_dict() if res.ran else {"judge": "already complete"})
            return EXIT_OK
        if args.command == "report":
            res = pipe.report(force=True)
            _print({"files": [str(p) for p in res.detail.files], "notices": res.detail.notices})
            return EXIT_OK
        if args.command == "pipeline":
            result = pipe.run()
            _print({"stages": {s.stage: ("ran" if s.ran else "skipped") for s in result.stages}, "partial": result.partial})
            return result.exit_code
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
