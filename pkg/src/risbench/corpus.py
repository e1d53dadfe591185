"""Query-image corpus acquisition from a MediaWiki file repository.

The corpus directory holds::

    manifest.log    append-only event log (image / failure / shortfall)
    corpus.jsonl    compacted snapshot: deduplicated CorpusImage records
    files/          content-addressed image files, ``files/ab/abcdef....jpg``
    hashes.jsonl    memoized query-image hashes, keyed by digest and method
"""

from __future__ import annotations

import contextlib
import io
import logging
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import requests
from PIL import Image

from risbench import _http
from risbench.errors import APIUnavailable, DownloadFailed, NetworkError, UnknownContentType
from risbench.store import RecordLog, sha256_bytes, sha256_file, utc_now

log = logging.getLogger(__name__)

COMMONS_API = "https://commons.wikimedia.org/w/api.php"
FILE_NAMESPACE = 6

FORMAT_EXTENSIONS = {
    "JPEG": "jpg",
    "PNG": "png",
    "GIF": "gif",
    "WEBP": "webp",
    "BMP": "bmp",
    "TIFF": "tif",
}


class ImageClass(str, Enum):
    ABSTRACT = "abstract"
    NATURAL = "natural"


class Category(str, Enum):
    DIAGRAM = "diagram"
    SCHEMATIC = "schematic"
    PHOTO = "photo"
    PHOTOGRAPH = "photograph"

    @property
    def image_class(self) -> ImageClass:
        if self in (Category.DIAGRAM, Category.SCHEMATIC):
            return ImageClass.ABSTRACT
        return ImageClass.NATURAL


DEFAULT_TERMS = tuple(c.value for c in Category)


@dataclass(frozen=True)
class MediaRef:
    """One file result from the repository search, in API order."""

    title: str
    term: str
    rank: int
    source_page_url: str
    file_url: str
    width: int = 0
    height: int = 0
    mime: str = ""


@dataclass(frozen=True)
class CorpusImage:
    id: str
    categories: tuple[str, ...]
    source_page_url: str
    file_url: str
    local_path: str
    width: int
    height: int
    content_digest: str
    fetched_at: str
    title: str = ""
    ranks: dict = field(default_factory=dict, hash=False)

    @property
    def image_classes(self) -> set[ImageClass]:
        return {Category(c).image_class for c in self.categories}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusImage":
        known = set(cls.__dataclass_fields__)
        d = {k: v for k, v in d.items() if k in known}
        d["categories"] = tuple(d["categories"])
        return cls(**d)


def image_id(digest: str) -> str:
    return digest[:16]


def sniff_extension(data: bytes) -> str:
    """File extension for encoded image bytes, judged by content, never by name."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            fmt = im.format
    except Exception as exc:
        raise UnknownContentType(f"unrecognised image content: {exc}") from exc
    if fmt not in FORMAT_EXTENSIONS:
        raise UnknownContentType(f"unsupported image format {fmt}")
    return FORMAT_EXTENSIONS[fmt]


class MediaRepository:
    """Client for the MediaWiki action API (Wikimedia Commons by default)."""

    def __init__(
        self,
        api_url: str = COMMONS_API,
        session: Optional[requests.Session] = None,
        attempts: int = 4,
        base_delay: float = 2.0,
        batch_size: int = 50,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.api_url = api_url
        self.session = session or _http.make_session()
        self.attempts = attempts
        self.base_delay = base_delay
        self.batch_size = batch_size
        self.sleep = sleep

    def _get_json(self, params: dict) -> dict:
        def call():
            try:
                resp = self.session.get(self.api_url, params=params, timeout=30)
            except requests.RequestException as exc:
                raise NetworkError(str(exc)) from exc
            _http.check_response(resp)
            data = resp.json()
            if "error" in data:
                if data["error"].get("code") == "maxlag":
                    raise NetworkError("server lagged")
                raise APIUnavailable(f"API error: {data['error']}")
            return data

        try:
            return _http.with_retries(call, self.attempts, self.base_delay, sleep=self.sleep)
        except NetworkError as exc:
            raise APIUnavailable(f"{self.api_url}: {exc}") from exc

    def search_media(self, term: str, count: int, width: int = 640) -> list[MediaRef]:
        """First ``count`` image files matching ``term``, in API order.

        May return fewer when the repository runs out of results.
        """
        if count < 1:
            raise ValueError("count must be >= 1")
        params = {
            "action": "query",
            "format": "json",
            "formatversion": "2",
            "generator": "search",
            "gsrsearch": term,
            "gsrnamespace": str(FILE_NAMESPACE),
            "prop": "imageinfo",
            "iiprop": "url|size|mime",
            "iiurlwidth": str(width),
            "maxlag": "5",
        }
        refs: list[MediaRef] = []
        cont: dict = {}
        while len(refs) < count:
            params["gsrlimit"] = str(min(self.batch_size, count - len(refs)))
            data = self._get_json({**params, **cont})
            pages = sorted(data.get("query", {}).get("pages", []), key=lambda p: p.get("index", 0))
            for page in pages:
                info = (page.get("imageinfo") or [{}])[0]
                if not info.get("mime", "").startswith("image/"):
                    continue
                refs.append(
                    MediaRef(
                        title=page["title"],
                        term=term,
                        rank=len(refs) + 1,
                        source_page_url=info.get("descriptionurl", ""),
                        file_url=info.get("thumburl") or info.get("url", ""),
                        width=int(info.get("thumbwidth") or info.get("width") or 0),
                        height=int(info.get("thumbheight") or info.get("height") or 0),
                        mime=info.get("mime", ""),
                    )
                )
                if len(refs) == count:
                    break
            if "continue" not in data:
                break
            cont = data["continue"]
        if len(refs) < count:
            log.warning("term %r: requested %d files, repository returned %d", term, count, len(refs))
        return refs


@dataclass
class _Download:
    data: bytes
    fetched_at: str


def fetch_scaled(
    ref: MediaRef,
    corpus_dir: Path,
    session: Optional[requests.Session] = None,
    attempts: int = 3,
    sleep: Callable[[float], None] = time.sleep,
) -> CorpusImage:
    """Download the scaled rendition of ``ref`` into content-addressed storage.

    Storing a file whose digest already exists is a no-op on disk.
    """
    return _store_rendition(ref, corpus_dir, _download_rendition(ref.file_url, session, attempts, sleep))


def _download_rendition(url, session, attempts, sleep) -> _Download:
    try:
        data = _http.with_retries(lambda: _http.fetch_bytes(url, session), attempts, 1.0, sleep=sleep)
    except NetworkError as exc:
        raise DownloadFailed(f"{url}: {exc}") from exc
    return _Download(data, utc_now())


def _store_rendition(ref: MediaRef, corpus_dir: Path, dl: _Download) -> CorpusImage:
    try:
        ext = sniff_extension(dl.data)
        with Image.open(io.BytesIO(dl.data)) as im:
            width, height = im.size
    except UnknownContentType as exc:
        raise DownloadFailed(f"{ref.file_url}: {exc}") from exc
    digest = sha256_bytes(dl.data)
    rel = Path("files") / digest[:2] / f"{digest}.{ext}"
    path = Path(corpus_dir) / rel
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".part")
        tmp.write_bytes(dl.data)
        tmp.replace(path)
    return CorpusImage(
        id=image_id(digest),
        categories=(ref.term,),
        source_page_url=ref.source_page_url,
        file_url=ref.file_url,
        local_path=str(rel),
        width=width,
        height=height,
        content_digest=digest,
        fetched_at=dl.fetched_at,
        title=ref.title,
        ranks={ref.term: ref.rank},
    )


def dedupe(records: Iterable[CorpusImage]) -> list[CorpusImage]:
    """Merge records with equal content digests; categories become the union.

    Output keeps the order of first occurrence.
    """
    merged: dict[str, CorpusImage] = {}
    for rec in records:
        prev = merged.get(rec.content_digest)
        if prev is None:
            merged[rec.content_digest] = rec
            continue
        cats = tuple(dict.fromkeys(prev.categories + rec.categories))
        merged[rec.content_digest] = replace(prev, categories=cats, ranks={**rec.ranks, **prev.ranks})
    return list(merged.values())


def anonymize_for_upload(record: CorpusImage, corpus_dir: Path, workdir: Path) -> Path:
    """Copy the image to ``workdir/upload_file.<ext>``; extension from content type."""
    data = (Path(corpus_dir) / record.local_path).read_bytes()
    ext = sniff_extension(data)
    out = Path(workdir) / f"upload_file.{ext}"
    out.write_bytes(data)
    return out


@contextlib.contextmanager
def upload_copy(record: CorpusImage, corpus_dir: Path) -> Iterator[Path]:
    with tempfile.TemporaryDirectory(prefix="risbench-upload-") as tmp:
        yield anonymize_for_upload(record, corpus_dir, Path(tmp))


class Corpus:
    """A prepared corpus directory."""

    def __init__(self, directory: Path | str):
        self.dir = Path(directory)
        self.events = RecordLog(self.dir / "manifest.log", "risbench/corpus-events")
        self.snapshot = RecordLog(self.dir / "corpus.jsonl", "risbench/corpus")
        self.hash_cache = RecordLog(self.dir / "hashes.jsonl", "risbench/query-hashes")
        self._images: Optional[list[CorpusImage]] = None
        self._lock = threading.Lock()

    @property
    def images(self) -> list[CorpusImage]:
        if self._images is None:
            self._images = [CorpusImage.from_dict(d) for d in self.snapshot]
        return self._images

    def by_id(self) -> dict[str, CorpusImage]:
        return {img.id: img for img in self.images}

    def path(self, image: CorpusImage) -> Path:
        return self.dir / image.local_path

    def digest(self) -> str:
        return sha256_file(self.snapshot.path)

    def failures(self) -> list[dict]:
        return [e for e in self.events if e["event"] == "failure"]

    def write_snapshot(self, images: Sequence[CorpusImage]) -> None:
        self.snapshot.rewrite(img.to_dict() for img in images)
        self._images = list(images)

    def category_counts(self) -> dict[str, int]:
        counts = {c.value: 0 for c in Category}
        for img in self.images:
            for c in img.categories:
                counts[c] = counts.get(c, 0) + 1
        return counts


def acquire(
    out_dir: Path | str,
    terms: Sequence[str] = DEFAULT_TERMS,
    per_term: int = 100,
    width: int = 640,
    repo: Optional[MediaRepository] = None,
    parallelism: int = 4,
    attempts: int = 3,
    sleep: Callable[[float], None] = time.sleep,
) -> Corpus:
    """Download scaled renditions for each search term, then dedupe them into the snapshot.

    Re-running against the same repository reuses previously stored files and
    records; only missing or previously failed downloads are attempted again.
    """
    for t in terms:
        Category(t)  # closed vocabulary; raises ValueError otherwise
    repo = repo or MediaRepository()
    corpus = Corpus(out_dir)
    corpus.dir.mkdir(parents=True, exist_ok=True)

    known: dict[tuple[str, str], CorpusImage] = {}
    for ev in corpus.events:
        if ev["event"] == "image":
            img = CorpusImage.from_dict(ev)
            if (corpus.dir / img.local_path).exists():
                known[(ev["term"], img.title)] = img

    refs: list[MediaRef] = []
    for term in terms:
        found = repo.search_media(term, per_term, width)
        if len(found) < per_term:
            corpus.events.append(
                {"event": "shortfall", "term": term, "requested": per_term, "received": len(found), "at": utc_now()}
            )
        refs.extend(found)

    pending = [r for r in refs if (r.term, r.title) not in known]
    urls = list(dict.fromkeys(r.file_url for r in pending))

    def download(url):
        try:
            return url, _download_rendition(url, repo.session, attempts, sleep)
        except DownloadFailed as exc:
            return url, exc

    results: dict[str, object] = {}
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        for url, outcome in pool.map(download, urls):
            results[url] = outcome

    # single writer: events are appended from this thread only, in API order
    for ref in pending:
        outcome = results[ref.file_url]
        if isinstance(outcome, _Download):
            try:
                known[(ref.term, ref.title)] = img = _store_rendition(ref, corpus.dir, outcome)
                corpus.events.append({"event": "image", "term": ref.term, "rank": ref.rank, **img.to_dict()})
                continue
            except DownloadFailed as exc:
                outcome = exc
        log.warning("download failed for %s: %s", ref.title, outcome)
        corpus.events.append(
            {
                "event": "failure",
                "term": ref.term,
                "rank": ref.rank,
                "title": ref.title,
                "file_url": ref.file_url,
                "error": str(outcome),
                "at": utc_now(),
            }
        )

    ordered = [known[(r.term, r.title)] for r in refs if (r.term, r.title) in known]
    corpus.write_snapshot(dedupe(ordered))
    return corpus

