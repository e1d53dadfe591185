"""Relevance judging: fetch result thumbnails and compare their hashes to the query's.

Thumbnails are cached content-addressed under ``runs/<id>/thumbs/`` together
with an index of fetched URLs and a hash cache, so re-judging a run (for
example with different thresholds) touches neither the network nor the
decoder.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import requests

from risbench import _http
from risbench.corpus import Corpus, CorpusImage
from risbench.engines.base import SearchResultRecord
from risbench.errors import DownloadFailed, InvalidImage, NetworkError
from risbench.hashcore import (
    DistanceThreshold,
    Hash,
    HashAlgorithm,
    compute_hash,
    decode_image,
    distance,
    hash_from_text,
    hash_to_text,
    within_threshold,
)
from risbench.store import RecordLog, RunStore, atomic_write_bytes, sha256_bytes, utc_now

log = logging.getLogger(__name__)


class Method(str, Enum):
    PHASH = "phash"
    VISHASH = "vishash"

    @property
    def algorithm(self) -> HashAlgorithm:
        return HashAlgorithm(self.value)


class Failure(str, Enum):
    DOWNLOAD = "DownloadFailed"
    DECODE = "DecodeFailed"
    HASH = "HashFailed"


@dataclass(frozen=True)
class Judgment:
    query_id: str
    engine: str
    kind: str
    position: int
    method: str
    distance: Union[int, float, None]
    relevant: bool
    failure: Optional[str] = None

    def __post_init__(self):
        if self.failure is not None and (self.relevant or self.distance is not None):
            raise ValueError("a failed judgment is never relevant and has no distance")

    @property
    def record_ref(self) -> tuple[str, str, str, int]:
        return (self.query_id, self.engine, self.kind, self.position)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Judgment":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def judgment_sort_key(j: Judgment):
    return (*j.record_ref, j.method)


# -- single comparisons --------------------------------------------------------


@dataclass(frozen=True)
class HashOutcome:
    """A thumbnail's hash, or the reason it has none."""

    hash: Optional[Hash] = None
    failure: Optional[Failure] = None


def hash_bytes(data: bytes, method: Method | str) -> HashOutcome:
    """Decode and hash image bytes as-is; no resizing beyond the hash's own."""
    method = Method(method)
    try:
        gray = decode_image(data)
    except InvalidImage as exc:
        log.debug("decode failed: %s", exc)
        return HashOutcome(failure=Failure.DECODE)
    try:
        return HashOutcome(hash=compute_hash(gray, method.algorithm))
    except Exception as exc:  # anything past decoding is a hashing failure
        log.warning("%s failed on a decodable image: %s", method.value, exc)
        return HashOutcome(failure=Failure.HASH)


def decide(
    ref: tuple[str, str, str, int], method: Method | str, query_hash: Hash, thumb: HashOutcome, thresholds: DistanceThreshold
) -> Judgment:
    method = Method(method)
    if thumb.failure is not None:
        return Judgment(*ref, method.value, None, False, thumb.failure.value)
    d = distance(query_hash, thumb.hash)
    return Judgment(*ref, method.value, d, within_threshold(method.algorithm, d, thresholds), None)


def judge_result(
    query: bytes,
    thumb: bytes,
    method: Method | str,
    thresholds: DistanceThreshold = DistanceThreshold(),
    ref: tuple[str, str, str, int] = ("", "", "", 1),
) -> Judgment:
    """Judge one thumbnail against the encoded query image."""
    q = hash_bytes(query, method)
    if q.failure is not None:
        raise InvalidImage(f"query image is not hashable ({q.failure.value})")
    return decide(ref, method, q.hash, hash_bytes(thumb, method), thresholds)


# -- caches --------------------------------------------------------------------


class ThumbnailCache:
    """Content-addressed thumbnail store with a URL index.

    Failed URLs are remembered too, so a cached run never goes back to the
    network unless ``retry_failed`` is set.
    """

    def __init__(
        self,
        directory: Path | str,
        session: Optional[requests.Session] = None,
        attempts: int = 3,
        base_delay: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        retry_failed: bool = False,
    ):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.session = session or _http.make_session()
        self.attempts = attempts
        self.base_delay = base_delay
        self.sleep = sleep
        self.retry_failed = retry_failed
        self.index_log = RecordLog(self.dir / "index.jsonl", "risbench/thumbs")
        self.hash_log = RecordLog(self.dir / "hashes.jsonl", "risbench/thumb-hashes")
        self._index: dict[str, dict] = {e["url"]: e for e in self.index_log}
        self._hashes: dict[tuple[str, str], dict] = {(e["digest"], e["method"]): e for e in self.hash_log}
        self._lock = threading.Lock()
        self.network_fetches = 0

    def path_for(self, digest: str) -> Path:
        return self.dir / digest[:2] / digest

    def fetch(self, url: str) -> str:
        """Digest of the thumbnail at ``url``, downloading it at most once."""
        with self._lock:
            entry = self._index.get(url)
        if entry is not None and (entry["digest"] or not self.retry_failed):
            if entry["digest"] and self.path_for(entry["digest"]).is_file():
                return entry["digest"]
            if not entry["digest"]:
                raise DownloadFailed(f"{url}: {entry['error']} (cached)")
        if not url:
            raise DownloadFailed("record has no thumbnail URL")
        with self._lock:
            self.network_fetches += 1
        try:
            data = _http.with_retries(
                lambda: _http.fetch_bytes(url, self.session), self.attempts, self.base_delay, sleep=self.sleep
            )
        except NetworkError as exc:
            self._remember({"url": url, "digest": None, "error": str(exc), "at": utc_now()})
            raise DownloadFailed(f"{url}: {exc}") from exc
        digest = sha256_bytes(data)
        path = self.path_for(digest)
        if not path.is_file():
            atomic_write_bytes(path, data)
        self._remember({"url": url, "digest": digest, "error": "", "at": utc_now()})
        return digest

    def _remember(self, entry: dict) -> None:
        with self._lock:
            self._index[entry["url"]] = entry
            self.index_log.append(entry)

    def fetch_many(self, urls: Iterable[str], parallelism: int = 8) -> dict[str, Optional[str]]:
        """URL -> digest, or None for URLs that failed."""
        def one(url):
            try:
                return url, self.fetch(url)
            except DownloadFailed as exc:
                log.debug("%s", exc)
                return url, None

        unique = list(dict.fromkeys(urls))
        with ThreadPoolExecutor(max_workers=max(1, parallelism), thread_name_prefix="thumb") as pool:
            return dict(pool.map(one, unique))

    def hash(self, digest: str, method: Method | str) -> HashOutcome:
        method = Method(method)
        with self._lock:
            entry = self._hashes.get((digest, method.value))
        if entry is None:
            out = hash_bytes(self.path_for(digest).read_bytes(), method)
            entry = {
                "digest": digest,
                "method": method.value,
                "hash": hash_to_text(out.hash) if out.hash is not None else None,
                "failure": out.failure.value if out.failure else None,
            }
            with self._lock:
                self._hashes[(digest, method.value)] = entry
                self.hash_log.append(entry)
        if entry["failure"]:
            return HashOutcome(failure=Failure(entry["failure"]))
        return HashOutcome(hash=hash_from_text(entry["hash"], method.algorithm))


def query_hashes(corpus: Corpus, images: Sequence[CorpusImage], methods: Sequence[Method]) -> dict[tuple[str, str], Hash]:
    """Query-image hashes, memoized in the corpus hash cache."""
    cached = {(e["digest"], e["method"]): e["hash"] for e in corpus.hash_cache}
    out, new = {}, []
    for img in images:
        for m in methods:
            key = (img.content_digest, m.value)
            if key not in cached:
                h = hash_bytes(corpus.path(img).read_bytes(), m)
                if h.failure is not None:
                    raise InvalidImage(f"query {img.id} is not hashable ({h.failure.value})")
                cached[key] = hash_to_text(h.hash)
                new.append({"digest": img.content_digest, "method": m.value, "hash": cached[key]})
            out[(img.id, m.value)] = hash_from_text(cached[key], m.algorithm)
    if new:
        corpus.hash_cache.extend(new)
    return out


# -- whole runs ----------------------------------------------------------------


@dataclass
class JudgeSummary:
    records: int = 0
    judgments: int = 0
    relevant: Counter = field(default_factory=Counter)  # method -> count
    failures: Counter = field(default_factory=Counter)  # (method, failure) -> count
    network_fetches: int = 0

    def failure_table(self) -> list[dict]:
        """Failure counts with percentages of the records judged, per method."""
        rows = []
        for (method, failure), n in sorted(self.failures.items()):
            pct = 100.0 * n / self.records if self.records else 0.0
            rows.append({"method": method, "failure": failure, "count": n, "records": self.records, "percent": pct})
        return rows

    def to_dict(self) -> dict:
        return {
            "records": self.records,
            "judgments": self.judgments,
            "relevant": dict(sorted(self.relevant.items())),
            "failures": self.failure_table(),
            "network_fetches": self.network_fetches,
        }


def judge_run(
    store: RunStore,
    corpus: Corpus,
    methods: Sequence[Method | str] = (Method.PHASH, Method.VISHASH),
    thresholds: DistanceThreshold = DistanceThreshold(),
    parallelism: int = 8,
    session: Optional[requests.Session] = None,
    attempts: int = 3,
    sleep: Callable[[float], None] = time.sleep,
) -> JudgeSummary:
    """Judge every SER record of a run with each method and rewrite ``judgments.log``.

    One judgment is written per (record, method), failures included, in
    canonical order. Failure statistics go to ``judge_stats.json``.
    """
    methods = sorted({Method(m) for m in methods}, key=lambda m: m.value)
    records = [SearchResultRecord.from_dict(d) for d in store.sers]
    by_id = corpus.by_id()
    missing = {r.query_id for r in records} - set(by_id)
    if missing:
        raise KeyError(f"SER records reference queries absent from the corpus: {sorted(missing)[:5]}")
    qh = query_hashes(corpus, [by_id[q] for q in sorted({r.query_id for r in records})], methods)

    cache = ThumbnailCache(store.thumbs_dir, session=session, attempts=attempts, sleep=sleep)
    digests = cache.fetch_many((r.thumbnail_url for r in records if r.thumbnail_url), parallelism)

    jobs = sorted({(d, m) for d in digests.values() if d for m in methods})
    with ThreadPoolExecutor(max_workers=max(1, parallelism), thread_name_prefix="hash") as pool:
        thumb_hashes = dict(zip(jobs, pool.map(lambda job: cache.hash(*job), jobs)))

    summary = JudgeSummary(records=len(records), network_fetches=cache.network_fetches)
    judgments = []
    for rec in records:
        digest = digests.get(rec.thumbnail_url) if rec.thumbnail_url else None
        for m in methods:
            outcome = thumb_hashes[(digest, m)] if digest else HashOutcome(failure=Failure.DOWNLOAD)
            j = decide(rec.ref, m, qh[(rec.query_id, m.value)], outcome, thresholds)
            judgments.append(j)
            if j.failure:
                summary.failures[(m.value, j.failure)] += 1
            elif j.relevant:
                summary.relevant[m.value] += 1
    judgments.sort(key=judgment_sort_key)
    summary.judgments = len(judgments)
    store.judgments.rewrite(j.to_dict() for j in judgments)
    stats = {**summary.to_dict(), "thresholds": asdict(thresholds), "methods": [m.value for m in methods]}
    stats.pop("network_fetches")  # varies with cache state; keep the file deterministic
    atomic_write_bytes(store.dir / "judge_stats.json", (json.dumps(stats, indent=2, sort_keys=True) + "\n").encode())
    return summary


def load_judgments(store: RunStore) -> list[Judgment]:
    return [Judgment.from_dict(d) for d in store.judgments]


def rejudge(judgments: Iterable[Judgment], thresholds: DistanceThreshold) -> list[Judgment]:
    """Re-apply thresholds to stored distances; no hashing needed."""
    out = []
    for j in judgments:
        if j.failure is None:
            j = Judgment(*j.record_ref, j.method, j.distance, within_threshold(Method(j.method).algorithm, j.distance, thresholds))
        out.append(j)
    return out


def failure_rate(judgments: Iterable[Judgment], method: Method | str) -> tuple[int, int, float]:
    """(failed, total, percent) for one method."""
    method = Method(method).value
    rows = [j for j in judgments if j.method == method]
    failed = sum(1 for j in rows if j.failure)
    return failed, len(rows), (100.0 * failed / len(rows) if rows else 0.0)


__all__ = [
    "Failure",
    "HashOutcome",
    "JudgeSummary",
    "Judgment",
    "Method",
    "ThumbnailCache",
    "decide",
    "failure_rate",
    "hash_bytes",
    "judge_result",
    "judge_run",
    "load_judgments",
    "query_hashes",
    "rejudge",
]
