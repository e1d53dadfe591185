"""Submission stage: push every corpus image through each adapter, archive, parse."""

from __future__ import annotations

import logging
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from risbench._http import with_retries
from risbench.corpus import Corpus, CorpusImage, upload_copy
from risbench.engines.base import (
    EngineAdapter,
    ResultKind,
    SearchResultRecord,
    archive_bundle,
    canonical_order,
    iter_archived,
    load_bundle,
    parse_results,
)
from risbench.errors import NetworkError, ParseFailure, RateLimited, UnknownContentType, UploadRejected
from risbench.store import RecordLog, RunStore, utc_now

log = logging.getLogger(__name__)

# per (query, engine, kind) outcome written to submissions.log
OK, NO_RESULTS, UNPARSED, FAILED, SKIPPED = "ok", "no_results", "unparsed", "failed", "skipped"


@dataclass
class SubmitSummary:
    status: Counter = field(default_factory=Counter)  # (engine, status) -> count
    records: int = 0

    @property
    def failed_engines(self) -> list[str]:
        return sorted({e for (e, s), n in self.status.items() if s == FAILED and n})


def _submission(query_id, engine, kind, status, count=0, error="", captured_at=None) -> dict:
    return {
        "query_id": query_id,
        "engine": engine,
        "kind": kind,
        "status": status,
        "count": count,
        "error": error,
        "captured_at": captured_at or utc_now(),
    }


def submit_corpus(
    store: RunStore,
    corpus: Corpus,
    adapters: Mapping[str, EngineAdapter],
    attempts: int = 3,
    base_delay: float = 30.0,
    sleep: Callable[[float], None] = time.sleep,
) -> SubmitSummary:
    """Submit each corpus image to each engine; engines run concurrently.

    Queries already recorded with a non-failed outcome are skipped, so an
    interrupted submit resumes where it stopped. On return ``sers.log`` and
    ``submissions.log`` are compacted to canonical order.
    """
    done = {(s["query_id"], s["engine"]) for s in store.submissions if s["status"] != FAILED}
    write_lock = threading.Lock()
    summary = SubmitSummary()
    images = corpus.images

    def emit(subs: list[dict], records: list[SearchResultRecord]) -> None:
        with write_lock:
            store.sers.extend(r.to_dict() for r in records)
            store.submissions.extend(subs)
            for s in subs:
                summary.status[(s["engine"], s["status"])] += 1
            summary.records += len(records)

    def run_engine(name: str, adapter: EngineAdapter) -> None:
        kinds = [k.value for k in adapter.kinds]
        for img in images:
            if (img.id, name) in done:
                continue
            subs, records = submit_one(img, corpus, adapter, kinds, store.raw_dir, attempts, base_delay, sleep)
            emit(subs, records)

    with ThreadPoolExecutor(max_workers=max(1, len(adapters)), thread_name_prefix="engine") as pool:
        futures = [pool.submit(run_engine, name, ad) for name, ad in adapters.items()]
        for f in futures:
            f.result()
    compact(store)
    return summary


def submit_one(
    img: CorpusImage,
    corpus: Corpus,
    adapter: EngineAdapter,
    kinds: Sequence[str],
    raw_dir: Path,
    attempts: int,
    base_delay: float,
    sleep: Callable[[float], None],
) -> tuple[list[dict], list[SearchResultRecord]]:
    name = adapter.engine.value
    try:
        with upload_copy(img, corpus.dir) as upload:
            bundle = with_retries(
                lambda: adapter.submit_image(upload, img.id),
                attempts=attempts,
                base_delay=base_delay,
                retry_on=(RateLimited, NetworkError),
                sleep=sleep,
            )
    except UnknownContentType as exc:
        return [_submission(img.id, name, k, SKIPPED, error=str(exc)) for k in kinds], []
    except (UploadRejected, NetworkError) as exc:
        log.warning("%s: query %s failed: %s", name, img.id, exc)
        return [_submission(img.id, name, k, FAILED, error=f"{type(exc).__name__}: {exc}") for k in kinds], []
    archive_bundle(raw_dir, bundle)
    subs, records = [], []
    for kind in kinds:
        captured = next((p.captured_at for p in bundle.pages_for(kind)), None)
        try:
            recs = parse_results(bundle, kind)
        except ParseFailure as exc:
            log.warning("%s: query %s %s unparsed: %s", name, img.id, kind, exc)
            subs.append(_submission(img.id, name, kind, UNPARSED, error=str(exc), captured_at=captured))
            continue
        records += recs
        subs.append(_submission(img.id, name, kind, OK if recs else NO_RESULTS, len(recs), captured_at=captured))
    return subs, records


def compact(store: RunStore) -> None:
    """Rewrite the SER and submission logs in canonical order, last write wins."""
    sers = {}
    for d in store.sers:
        rec = SearchResultRecord.from_dict(d)
        sers[rec.ref] = rec
    store.sers.rewrite(r.to_dict() for r in canonical_order(sers.values()))
    subs = {}
    for s in store.submissions:
        subs[(s["query_id"], s["engine"], s["kind"])] = s
    store.submissions.rewrite(subs[k] for k in sorted(subs))


def reparse(raw_dir: Path, engines: Optional[Sequence[str]] = None) -> tuple[list[SearchResultRecord], list[tuple[str, str, str]]]:
    """Parse every archived bundle again.

    Returns the records in canonical order and the ``(engine, query, kind)``
    triples whose pages still fail to parse.
    """
    records, unparsed = [], []
    for engine, query_id in iter_archived(raw_dir):
        if engines is not None and engine not in engines:
            continue
        bundle = load_bundle(raw_dir, engine, query_id)
        kinds = sorted({p.kind for p in bundle.pages} & {k.value for k in ResultKind})
        for kind in kinds:
            try:
                records += parse_results(bundle, kind)
            except ParseFailure:
                unparsed.append((engine, query_id, kind))
    return canonical_order(records), unparsed


def write_records(path: Path, records: Sequence[SearchResultRecord]) -> RecordLog:
    out = RecordLog(path, "risbench/sers")
    out.rewrite(r.to_dict() for r in records)
    return out
