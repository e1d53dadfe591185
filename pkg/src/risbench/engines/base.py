"""Shared engine plumbing: the result record model and the raw bundle archive."""

from __future__ import annotations

import json
import logging
import mimetypes
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

import requests

from risbench import _http
from risbench.errors import NetworkError, ParseFailure, UploadRejected
from risbench.store import atomic_write_bytes, sha256_bytes, utc_now

log = logging.getLogger(__name__)

MAX_RESULTS = 100


class EngineId(str, Enum):
    BAIDU = "baidu"
    BING = "bing"
    GOOGLE = "google"
    YANDEX = "yandex"
    FIXTURE = "fixture"


LIVE_ENGINES = (EngineId.BAIDU, EngineId.BING, EngineId.GOOGLE, EngineId.YANDEX)


class ResultKind(str, Enum):
    SIMILAR_TO = "similar_to"
    PAGES_WITH = "pages_with"


RESULT_FIELDS = ("page_url", "image_url", "thumbnail_url")


@dataclass(frozen=True)
class SearchResultRecord:
    query_id: str
    engine: str
    kind: str
    position: int
    ser_url: str
    page_url: str
    image_url: str
    thumbnail_url: str
    captured_at: str

    @property
    def ref(self) -> tuple[str, str, str, int]:
        return (self.query_id, self.engine, self.kind, self.position)

    @property
    def missing_fields(self) -> tuple[str, ...]:
        return tuple(f for f in RESULT_FIELDS if not getattr(self, f))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchResultRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def canonical_order(records: Iterable[SearchResultRecord]) -> list[SearchResultRecord]:
    return sorted(records, key=lambda r: r.ref)


@dataclass
class RawPage:
    kind: str
    number: int
    url: str
    body: bytes
    status: int = 200
    content_type: str = ""
    captured_at: str = field(default_factory=utc_now)

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "number": self.number,
            "url": self.url,
            "status": self.status,
            "content_type": self.content_type,
            "captured_at": self.captured_at,
            "sha256": sha256_bytes(self.body),
        }

    def text(self) -> str:
        return self.body.decode("utf-8", errors="replace")

    def json(self):
        try:
            return json.loads(self.body)
        except ValueError as exc:
            raise ParseFailure(f"page {self.kind}/{self.number} is not JSON: {exc}") from exc


@dataclass
class RawBundle:
    """Everything an engine sent back for one uploaded query image."""

    engine: str
    query_id: str
    pages: list[RawPage] = field(default_factory=list)
    adapter_version: str = "1"

    def pages_for(self, kind: ResultKind | str) -> list[RawPage]:
        kind = ResultKind(kind).value
        return sorted((p for p in self.pages if p.kind == kind), key=lambda p: p.number)


def bundle_dir(raw_root: Path, engine: str, query_id: str) -> Path:
    return Path(raw_root) / engine / query_id


def archive_bundle(raw_root: Path, bundle: RawBundle) -> Path:
    """Persist ``raw/<engine>/<query-id>/<kind>/page-<n>`` plus a ``bundle.json`` index."""
    root = bundle_dir(raw_root, bundle.engine, bundle.query_id)
    for page in bundle.pages:
        atomic_write_bytes(root / page.kind / f"page-{page.number}", page.body)
    meta = {
        "engine": bundle.engine,
        "query_id": bundle.query_id,
        "adapter_version": bundle.adapter_version,
        "pages": [p.meta() for p in bundle.pages],
    }
    atomic_write_bytes(root / "bundle.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return root


def load_bundle(raw_root: Path, engine: str, query_id: str) -> RawBundle:
    root = bundle_dir(raw_root, engine, query_id)
    meta = json.loads((root / "bundle.json").read_text())
    pages = []
    for pm in meta["pages"]:
        body = (root / pm["kind"] / f"page-{pm['number']}").read_bytes()
        if sha256_bytes(body) != pm["sha256"]:
            raise ParseFailure(f"{root}: page {pm['kind']}/{pm['number']} does not match its recorded digest")
        pages.append(RawPage(pm["kind"], pm["number"], pm["url"], body, pm["status"], pm["content_type"], pm["captured_at"]))
    return RawBundle(meta["engine"], meta["query_id"], pages, meta.get("adapter_version", "1"))


def iter_archived(raw_root: Path) -> Iterable[tuple[str, str]]:
    raw_root = Path(raw_root)
    if not raw_root.is_dir():
        return
    for meta in sorted(raw_root.glob("*/*/bundle.json")):
        yield meta.parent.parent.name, meta.parent.name


# page parser: RawPage -> list of {page_url, image_url, thumbnail_url}
PageParser = Callable[[RawPage], list[dict]]
PARSERS: dict[str, PageParser] = {}


def register_parser(engine: EngineId):
    def deco(fn: PageParser) -> PageParser:
        PARSERS[engine.value] = fn
        return fn

    return deco


def parse_results(bundle: RawBundle, kind: ResultKind | str) -> list[SearchResultRecord]:
    """Records of one kind from a bundle, in on-page order, capped at 100.

    A pure function of the bundle: re-parsing an archived bundle reproduces
    the same records.
    """
    kind = ResultKind(kind).value
    parser = PARSERS.get(bundle.engine)
    if parser is None:
        raise ParseFailure(f"no parser registered for engine {bundle.engine!r}")
    records: list[SearchResultRecord] = []
    for page in bundle.pages_for(kind):
        for item in parser(page):
            if len(records) == MAX_RESULTS:
                return records
            records.append(
                SearchResultRecord(
                    query_id=bundle.query_id,
                    engine=bundle.engine,
                    kind=kind,
                    position=len(records) + 1,
                    ser_url=page.url,
                    page_url=item.get("page_url") or "",
                    image_url=item.get("image_url") or "",
                    thumbnail_url=item.get("thumbnail_url") or "",
                    captured_at=page.captured_at,
                )
            )
    return records


def guess_mime(path: Path) -> str:
    return mimetypes.guess_type(path.name)[0] or "application/octet-stream"


class EngineAdapter:
    """Uploads a query image and returns the raw response bundle.

    Requests to one engine are serialized through a per-adapter lock and
    spaced by ``delay`` seconds plus up to ``jitter`` seconds of random slack.
    """

    engine: EngineId
    version = "1"
    kinds: tuple[ResultKind, ...] = (ResultKind.SIMILAR_TO, ResultKind.PAGES_WITH)

    def __init__(
        self,
        base_url: str = "",
        max_upload_bytes: Optional[int] = None,
        delay: float = 5.0,
        jitter: float = 1.0,
        max_pages: int = 10,
        timeout: float = 60.0,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: Optional[random.Random] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.max_upload_bytes = max_upload_bytes
        self.delay = delay
        self.jitter = jitter
        self.max_pages = max_pages
        self.timeout = timeout
        self.session = session or _http.make_session(
            "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/103.0 Safari/537.36"
        )
        self.sleep = sleep
        self.rng = rng or random.Random()
        self._lock = threading.Lock()
        self._last_request = 0.0

    def submit_image(self, upload: Path, query_id: str) -> RawBundle:
        upload = Path(upload)
        size = upload.stat().st_size
        if self.max_upload_bytes is not None and size > self.max_upload_bytes:
            raise UploadRejected(f"{upload.name} is {size} bytes; {self.engine.value} accepts at most {self.max_upload_bytes}")
        with self._lock:
            pages = self._submit(upload.read_bytes(), upload.name, guess_mime(upload))
        return RawBundle(self.engine.value, query_id, pages, self.version)

    def _submit(self, data: bytes, filename: str, mime: str) -> list[RawPage]:
        raise NotImplementedError

    def parse(self, bundle: RawBundle, kind: ResultKind | str) -> list[SearchResultRecord]:
        return parse_results(bundle, kind)

    # -- HTTP helpers for live adapters --

    def _polite(self) -> None:
        wait = self._last_request + self.delay + (self.rng.uniform(0, self.jitter) if self.jitter else 0) - time.monotonic()
        if self._last_request and wait > 0:
            self.sleep(wait)
        self._last_request = time.monotonic()

    def _request(self, method: str, url: str, **kwargs) -> requests.Response:
        self._polite()
        try:
            resp = self.session.request(method, url, timeout=self.timeout, **kwargs)
        except requests.RequestException as exc:
            raise NetworkError(f"{self.engine.value}: {exc}") from exc
        if resp.status_code == 413:
            raise UploadRejected(f"{self.engine.value}: upload too large (HTTP 413)")
        return _http.check_response(resp)

    @staticmethod
    def _page(kind: ResultKind | str, number: int, resp: requests.Response) -> RawPage:
        return RawPage(getattr(kind, "value", kind), number, resp.url, resp.content, resp.status_code, resp.headers.get("Content-Type", ""))
