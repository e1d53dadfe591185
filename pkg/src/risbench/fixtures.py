"""Local test doubles that stand in for the media repository and the engines.

Everything here runs on 127.0.0.1 and needs no network. Tests, the demos and
offline pipeline runs substitute these for the remote services.
"""

from __future__ import annotations

import base64
import email
import email.policy
import hashlib
import html
import io
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, quote, unquote, urlencode, urlparse

import numpy as np
from PIL import Image, ImageDraw

from risbench.corpus import Corpus, MediaRef, _Download, _store_rendition, dedupe
from risbench.engines.fixture import write_fixture


def synthetic_image(seed: int, width: int = 800, height: int = 600, style: str = "natural") -> Image.Image:
    """Deterministic test image.

    ``natural`` gives smooth colour fields with soft blobs; ``abstract`` gives
    line drawings on a white background, loosely resembling a diagram.
    """
    rng = np.random.default_rng(seed)
    if style == "natural":
        y, x = np.mgrid[0:height, 0:width] / max(width, height)
        channels = []
        for _ in range(3):
            field_ = np.zeros((height, width))
            for _ in range(6):
                fx, fy = rng.uniform(0.3, 4.0, 2)
                phase = rng.uniform(0, 2 * np.pi)
                field_ += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fx * x + fy * y) + phase)
            for _ in range(4):
                cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 0.75), rng.uniform(0.05, 0.25)
                field_ += rng.uniform(-2, 2) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * r * r))
            lo, hi = field_.min(), field_.max()
            channels.append((field_ - lo) / (hi - lo + 1e-12) * 255)
        return Image.fromarray(np.stack(channels, axis=-1).astype(np.uint8), "RGB")
    if style == "abstract":
        img = Image.new("RGB", (width, height), "white")
        draw = ImageDraw.Draw(img)
        stroke = max(2, width // 160)
        for _ in range(int(rng.integers(6, 14))):
            x0, x1 = sorted(rng.uniform(0, width, 2))
            y0, y1 = sorted(rng.uniform(0, height, 2))
            colour = tuple(int(c) for c in rng.integers(0, 160, 3))
            shape = rng.integers(0, 3)
            if shape == 0:
                draw.rectangle([x0, y0, x1, y1], outline=colour, width=stroke)
            elif shape == 1:
                draw.ellipse([x0, y0, x1, y1], outline=colour, width=stroke)
            else:
                draw.line([x0, y0, x1, y1], fill=colour, width=stroke)
        for _ in range(int(rng.integers(2, 5))):
            x0, y0 = rng.uniform(0, width * 0.8), rng.uniform(0, height * 0.8)
            w, h = rng.uniform(width * 0.08, width * 0.2), rng.uniform(height * 0.05, height * 0.12)
            fill = tuple(int(c) for c in rng.integers(120, 256, 3))
            draw.rectangle([x0, y0, x0 + w, y0 + h], fill=fill, outline="black", width=stroke)
        return img
    raise ValueError(f"unknown style {style!r}")


def encode(img: Image.Image, fmt: str = "PNG", **kwargs) -> bytes:
    buf = io.BytesIO()
    if fmt.upper() == "JPEG":
        kwargs.setdefault("quality", 90)
    img.save(buf, format=fmt, **kwargs)
    return buf.getvalue()


def scale_to_width(data: bytes, width: int) -> bytes:
    """Resize encoded bytes to ``width`` (aspect preserved, never upscaled)."""
    with Image.open(io.BytesIO(data)) as im:
        fmt = im.format
        if im.width <= width:
            return data
        height = max(1, round(im.height * width / im.width))
        out = im.convert("RGB").resize((width, height), Image.Resampling.LANCZOS)
    return encode(out, fmt)


class _LocalServer:
    """Base for the threaded 127.0.0.1 servers below."""

    def __init__(self):
        self._httpd: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None
        self.requests: list[str] = []

    def handle(self, handler: BaseHTTPRequestHandler, method: str) -> tuple:
        """Return ``(status, content_type, body)`` with an optional fourth headers dict."""
        raise NotImplementedError

    def start(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def _dispatch(self, method):
                server.requests.append(f"{method} {self.path}")
                status, ctype, body, *extra = server.handle(self, method)
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                for k, v in (extra[0] if extra else {}).items():
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


@dataclass
class MediaFile:
    title: str
    data: bytes
    mime: str = "image/png"


class FixtureMediaServer(_LocalServer):
    """Speaks the subset of the MediaWiki action API that acquisition uses.

    ``results`` maps a search term to an ordered list of file titles;
    ``files`` maps titles to their original bytes. Titles in ``broken`` appear
    in search results but their renditions answer 404. The first
    ``unavailable_calls`` API requests answer 503.
    """

    def __init__(
        self,
        results: dict[str, list[str]],
        files: dict[str, MediaFile],
        broken: frozenset = frozenset(),
        unavailable_calls: int = 0,
    ):
        super().__init__()
        self.results = results
        self.files = files
        self.broken = set(broken)
        self.unavailable_calls = unavailable_calls
        self._renders: dict[tuple[str, int], bytes] = {}
        self._lock = threading.Lock()

    @property
    def api_url(self) -> str:
        return self.base_url + "/w/api.php"

    def handle(self, handler, method):
        url = urlparse(handler.path)
        q = {k: v[0] for k, v in parse_qs(url.query).items()}
        if url.path == "/w/api.php":
            with self._lock:
                if self.unavailable_calls > 0:
                    self.unavailable_calls -= 1
                    return 503, "text/plain", b"busy"
            return 200, "application/json", json.dumps(self._search(q)).encode()
        if url.path.startswith("/thumb/"):
            title = unquote(url.path[len("/thumb/"):])
            if title in self.broken or title not in self.files:
                return 404, "text/plain", b"not found"
            width = int(q.get("width", 0))
            key = (title, width)
            with self._lock:
                if key not in self._renders:
                    data = self.files[title].data
                    self._renders[key] = scale_to_width(data, width) if width else data
            return 200, self.files[title].mime, self._renders[key]
        if url.path.startswith("/wiki/"):
            return 200, "text/html", b"<html></html>"
        return 404, "text/plain", b"unknown endpoint"

    def _search(self, q: dict) -> dict:
        titles = self.results.get(q.get("gsrsearch", ""), [])
        offset = int(q.get("gsroffset", 0))
        limit = int(q.get("gsrlimit", 10))
        width = int(q.get("iiurlwidth", 0))
        batch = titles[offset:offset + limit]
        pages = []
        for i, title in enumerate(batch):
            f = self.files[title]
            with Image.open(io.BytesIO(f.data)) as im:
                w, h = im.size
            tw = min(width, w) if width else w
            th = max(1, round(h * tw / w))
            pages.append(
                {
                    "title": title,
                    "index": offset + i + 1,
                    "imageinfo": [
                        {
                            "url": f"{self.base_url}/thumb/{quote(title)}",
                            "descriptionurl": f"{self.base_url}/wiki/{quote(title)}",
                            "thumburl": f"{self.base_url}/thumb/{quote(title)}?width={tw}",
                            "thumbwidth": tw,
                            "thumbheight": th,
                            "width": w,
                            "height": h,
                            "mime": f.mime,
                        }
                    ],
                }
            )
        out: dict = {"batchcomplete": True, "query": {"pages": pages}}
        if offset + limit < len(titles):
            out["continue"] = {"gsroffset": offset + limit, "continue": "gsroffset||"}
        return out


def build_media_fixture(
    per_term: dict[str, int],
    overlaps: dict[tuple[str, str], int] = None,
    broken: int = 0,
    size: tuple[int, int] = (800, 600),
    seed: int = 0,
) -> tuple[dict[str, list[str]], dict[str, MediaFile], set[str]]:
    """Build search results where ``overlaps[(a, b)]`` titles appear under both terms.

    Abstract-looking images are generated for diagram/schematic terms, natural
    ones otherwise. ``broken`` titles (taken from the first term, never an
    overlapping one) answer 404.
    """
    overlaps = overlaps or {}
    results: dict[str, list[str]] = {t: [] for t in per_term}
    files: dict[str, MediaFile] = {}
    counter = 0

    def new_title(term):
        nonlocal counter
        counter += 1
        title = f"File:{term}_{counter:04d}.png"
        style = "abstract" if term in ("diagram", "schematic") else "natural"
        img = synthetic_image(seed * 100003 + counter, size[0], size[1], style)
        files[title] = MediaFile(title, encode(img, "PNG"), "image/png")
        return title

    for (a, b), n in overlaps.items():
        for _ in range(n):
            t = new_title(a)
            results[a].append(t)
            results[b].append(t)
    shared = {t for ts in results.values() for t in ts}
    for term, n in per_term.items():
        while len(results[term]) < n:
            results[term].append(new_title(term))
    first = next(iter(per_term))
    broken_titles = [t for t in results[first] if t not in shared][-broken:] if broken else []
    # interleave shared titles so overlaps are not all at the head of each list
    for term in results:
        rng = np.random.default_rng(seed + len(term))
        order = rng.permutation(len(results[term]))
        results[term] = [results[term][i] for i in order]
    return results, files, set(broken_titles)


class StaticServer(_LocalServer):
    """Serves ``files[path] = bytes``; anything else answers 404."""

    def __init__(self, files: Optional[dict[str, bytes]] = None):
        super().__init__()
        self.files = dict(files or {})

    def url(self, path: str) -> str:
        return f"{self.base_url}/{path.lstrip('/')}"

    def handle(self, handler, method):
        path = unquote(urlparse(handler.path).path).lstrip("/")
        if path in self.files:
            return 200, "application/octet-stream", self.files[path]
        return 404, "text/plain", b"not found"


def _multipart(handler) -> dict[str, bytes]:
    length = int(handler.headers.get("Content-Length", 0))
    body = handler.rfile.read(length)
    ctype = handler.headers.get("Content-Type", "")
    msg = email.message_from_bytes(b"Content-Type: " + ctype.encode() + b"\r\n\r\n" + body, policy=email.policy.HTTP)
    out = {}
    if msg.is_multipart():
        for part in msg.iter_parts():
            name = part.get_param("name", header="content-disposition")
            out[name] = part.get_payload(decode=True)
    return out


class FakeEngineServer(_LocalServer):
    """Imitates the four live engines' upload and result endpoints.

    ``plants[sha256 of uploaded bytes][kind]`` is the ordered list of items
    (``page_url``, ``image_url``, ``thumbnail_url``) every engine returns for
    that upload. Engines are mounted at ``/baidu``, ``/bing``, ``/google`` and
    ``/yandex``. The first ``rate_limit`` requests answer 429; uploads whose
    digest is in ``garbled`` get result pages no parser understands.
    """

    PAGE_SIZE = {"baidu": 30, "google": 10, "yandex": 30}

    def __init__(self, plants: Optional[dict] = None, rate_limit: int = 0, garbled: frozenset = frozenset()):
        super().__init__()
        self.plants = plants or {}
        self.rate_limit = rate_limit
        self.garbled = set(garbled)
        self.uploads: dict[str, str] = {}
        self._lock = threading.Lock()

    def engine_url(self, engine: str) -> str:
        return f"{self.base_url}/{engine}"

    def _items(self, token: str, kind: str) -> list[dict]:
        return self.plants.get(self.uploads.get(token, ""), {}).get(kind, [])

    def _register(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        token = digest[:16]
        with self._lock:
            self.uploads[token] = digest
        return token

    def handle(self, handler, method):
        with self._lock:
            if self.rate_limit > 0:
                self.rate_limit -= 1
                return 429, "text/plain", b"slow down"
        url = urlparse(handler.path)
        engine, _, rest = url.path.lstrip("/").partition("/")
        q = {k: v[0] for k, v in parse_qs(url.query).items()}
        fn = getattr(self, f"_{engine}", None)
        if fn is None:
            return 404, "text/plain", b"unknown engine"
        return fn(handler, method, "/" + rest, q)

    def _page_slice(self, engine, items, n):
        size = self.PAGE_SIZE[engine]
        return items[n * size:(n + 1) * size], (n + 1) * size < len(items)

    # each engine handler returns (status, ctype, body[, headers])

    def _baidu(self, handler, method, path, q):
        if path == "/upload" and method == "POST":
            token = self._register(_multipart(handler)["image"])
            return 200, "application/json", json.dumps({"status": 0, "msg": "Success", "data": {"sign": token, "url": f"/s?sign={token}"}}).encode()
        kinds = {"/ajax/pcsimi": "similar_to", "/ajax/pcsame": "pages_with"}
        if path in kinds:
            token = q.get("sign", "")
            if self.uploads.get(token) in self.garbled:
                return 200, "application/json", b'{"status": 1, "msg": "error"}'
            rows, _ = self._page_slice("baidu", self._items(token, kinds[path]), int(q.get("page", 1)) - 1)
            body = {"status": 0, "data": {"list": [{"thumbUrl": r.get("thumbnail_url", ""), "objURL": r.get("image_url", ""), "fromUrl": r.get("page_url", "")} for r in rows]}}
            return 200, "application/json", json.dumps(body).encode()
        return 404, "text/plain", b"no such baidu endpoint"

    def _bing(self, handler, method, path, q):
        if path != "/images/api/custom/knowledge" or method != "POST":
            return 404, "text/plain", b"no such bing endpoint"
        form = _multipart(handler)
        token = self._register(base64.b64decode(form["imageBin"]))
        if self.uploads[token] in self.garbled:
            return 200, "application/json", b'{"error": "x"}'

        def values(kind):
            return [{"thumbnailUrl": r.get("thumbnail_url", ""), "contentUrl": r.get("image_url", ""), "hostPageUrl": r.get("page_url", "")} for r in self._items(token, kind)]

        body = {
            "tags": [
                {
                    "displayName": "",
                    "actions": [
                        {"actionType": "PagesIncluding", "data": {"value": values("pages_with")}},
                        {"actionType": "VisualSearch", "data": {"value": values("similar_to")}},
                    ],
                }
            ]
        }
        return 200, "application/json", json.dumps(body).encode()

    def _google(self, handler, method, path, q):
        if path == "/searchbyimage/upload" and method == "POST":
            token = self._register(_multipart(handler)["encoded_image"])
            return 302, "text/html", b"", {"Location": f"/google/search?tbs=sbi:{token}"}
        if path != "/search":
            return 404, "text/plain", b"no such google endpoint"
        tbs = q.get("tbs", "")
        similar = tbs.startswith("simg:")
        token = tbs.partition(":")[2]
        if self.uploads.get(token) in self.garbled:
            return 200, "text/html", b"<html><p>unusual traffic</p>"
        start = int(q.get("start", 0))
        kind = "similar_to" if similar else "pages_with"
        rows, more = self._page_slice("google", self._items(token, kind), start // 10)
        parts = ["<html><body>"]
        if not similar and start == 0:
            parts.append(f'<a href="/google/search?tbm=isch&amp;tbs=simg:{token}">Visually similar images</a>')
        for r in rows:
            if similar:
                meta = json.dumps({"ou": r.get("image_url", ""), "ru": r.get("page_url", ""), "tu": r.get("thumbnail_url", "")})
                parts.append(f'<div class="rg_bx"><div class="rg_meta">{html.escape(meta, quote=False)}</div></div>')
            else:
                img = f'<img src="{html.escape(r["thumbnail_url"])}">' if r.get("thumbnail_url") else ""
                if r.get("image_url"):
                    img = f'<a href="/imgres?{html.escape(urlencode({"imgurl": r["image_url"]}))}">{img}</a>'
                parts.append(f'<div class="g"><a href="{html.escape(r.get("page_url", ""))}"><h3>result</h3></a>{img}</div>')
        if more:
            extra = "tbm=isch&amp;" if similar else ""
            parts.append(f'<a id="pnnext" href="/google/search?{extra}tbs={tbs}&amp;start={start + 10}">Next</a>')
        parts.append("</body></html>")
        return 200, "text/html", "".join(parts).encode()

    def _yandex(self, handler, method, path, q):
        if path != "/images/search":
            return 404, "text/plain", b"no such yandex endpoint"
        if method == "POST":
            token = self._register(_multipart(handler)["upfile"])
            return 200, "application/json", json.dumps({"blocks": [{"name": "b-page_type_search-by-image__link", "params": {"url": f"cbir_id={token}&rpt=imageview"}}]}).encode()
        token = q.get("cbir_id", "")
        if self.uploads.get(token) in self.garbled:
            return 200, "text/plain", b"captcha"
        view = q.get("cbir_page")
        kind = {"similar": "similar_to", "sites": "pages_with"}.get(view)
        if kind is None:
            return 404, "text/plain", b"unknown view"
        rows, _ = self._page_slice("yandex", self._items(token, kind), int(q.get("p", 0)))
        parts = ["<html><body><div class='serp-list'>"]
        for r in rows:
            if kind == "similar_to":
                bem = {"serp-item": {"img_href": r.get("image_url", ""), "thumb": {"url": r.get("thumbnail_url", "")}, "snippet": {"url": r.get("page_url", "")}}}
                parts.append(f'<div class="serp-item" data-bem="{html.escape(json.dumps(bem))}"></div>')
            else:
                parts.append(
                    '<li class="CbirSites-Item">'
                    f'<div class="CbirSites-ItemThumb"><a href="{html.escape(r.get("image_url", ""))}"><img src="{html.escape(r.get("thumbnail_url", ""))}"></a></div>'
                    f'<div class="CbirSites-ItemTitle"><a href="{html.escape(r.get("page_url", ""))}">site</a></div></li>'
                )
        parts.append("</div></body></html>")
        return 200, "text/html", "".join(parts).encode()


def build_local_corpus(directory, entries) -> Corpus:
    """Write a corpus directly from ``(category, encoded bytes)`` pairs, no server needed.

    ``category`` may be a tuple to give an image several categories.
    """
    corpus = Corpus(directory)
    corpus.dir.mkdir(parents=True, exist_ok=True)
    images = []
    for rank, (cats, data) in enumerate(entries, start=1):
        cats = (cats,) if isinstance(cats, str) else tuple(cats)
        for cat in cats:
            ref = MediaRef(f"File:local_{rank:04d}", cat, rank, f"local://page/{rank}", f"local://file/{rank}")
            images.append(_store_rendition(ref, corpus.dir, _Download(data, "2022-06-01T00:00:00Z")))
    corpus.write_snapshot(dedupe(images))
    return corpus


def noise_image(seed: int, width: int = 64, height: int = 48) -> Image.Image:
    """Uniform RGB noise; far from any structured image under every hash."""
    rng = np.random.default_rng(seed)
    return Image.fromarray(rng.integers(0, 256, (height, width, 3), dtype=np.uint8), "RGB")


# 5 queries per category: self-match at rank 1 (x3), rank 3 (x1), no results (x1)
DEFAULT_PLAN = tuple((cat, rank) for cat in ("diagram", "schematic", "photo", "photograph") for rank in (1, 1, 1, 3, None))


def build_fixture_study(root, plan=DEFAULT_PLAN, per_query: int = 10, size=(160, 120), seed: int = 0, dead=()):
    """A corpus plus a fixture engine directory with planted self-matches.

    ``plan`` lists ``(category, rank)`` per query; ``rank=None`` means the
    engine returns nothing for that query. Every other position holds a noise
    distractor. The same plan is used for both result kinds. ``dead`` lists
    ``(query index, position)`` pairs whose thumbnail URL points nowhere.

    Returns:
        ``(corpus, fixture_dir)``.
    """
    root = Path(root)
    entries = []
    for i, (cat, _) in enumerate(plan):
        style = "abstract" if cat in ("diagram", "schematic") else "natural"
        entries.append((cat, encode(synthetic_image(seed * 7919 + i, size[0], size[1], style), "PNG")))
    corpus = build_local_corpus(root / "corpus", entries)
    fx = root / "fixture"
    (fx / "thumbs").mkdir(parents=True, exist_ok=True)
    by_digest = {img.content_digest: img for img in corpus.images}
    plants = {}
    dead = set(dead)
    for i, ((cat, rank), (_, data)) in enumerate(zip(plan, entries)):
        img = by_digest[hashlib.sha256(data).hexdigest()]
        if rank is None:
            continue
        (fx / "thumbs" / f"self-{img.id}.png").write_bytes(data)
        rows = []
        for pos in range(1, per_query + 1):
            if (i, pos) in dead:
                thumb = f"thumbs/missing-{i}-{pos}.png"
            elif pos == rank:
                thumb = f"thumbs/self-{img.id}.png"
            else:
                thumb = f"thumbs/noise-{i}-{pos}.png"
                noise_image(seed * 1_000_003 + i * 1000 + pos).save(fx / thumb)
            rows.append({"page_url": f"https://pages.test/{img.id}/{pos}", "image_url": f"https://images.test/{img.id}/{pos}.png", "thumbnail_url": thumb})
        plants[img.content_digest] = {"similar_to": rows, "pages_with": rows}
    write_fixture(fx, plants)
    return corpus, fx
