"""Scraping adapters for the four public engines.

Each adapter is pinned to the request flow and markup described in its
docstring (adapter version "1"). Engines change their pages without notice,
so every response is archived and the parsers here can be fixed and replayed
over old bundles without re-submitting anything.
"""

from __future__ import annotations

import base64
import json
import logging
import time
from typing import Callable, Optional
from urllib.parse import parse_qs, urlencode, urljoin, urlparse

from bs4 import BeautifulSoup

from risbench.engines.base import (
    MAX_RESULTS,
    PARSERS,
    EngineAdapter,
    EngineId,
    RawPage,
    ResultKind,
    register_parser,
)
from risbench.errors import ParseFailure, UploadRejected

log = logging.getLogger(__name__)

SIMILAR, PAGES = ResultKind.SIMILAR_TO, ResultKind.PAGES_WITH


class _PagedAdapter(EngineAdapter):
    """Adds a page-following loop shared by the HTML/JSON scrapers."""

    def _count(self, page: RawPage) -> int:
        try:
            return len(PARSERS[self.engine.value](page))
        except ParseFailure:
            return 0

    def _follow(self, kind: ResultKind, first_url: Optional[str], next_url: Callable[[int, RawPage], Optional[str]]) -> list[RawPage]:
        """Fetch result pages until the engine runs dry or a page/result cap is reached."""
        pages: list[RawPage] = []
        url, total = first_url, 0
        for n in range(1, self.max_pages + 1):
            if not url:
                break
            page = self._page(kind, n, self._request("GET", url))
            pages.append(page)
            got = self._count(page)
            total += got
            if got == 0 or total >= MAX_RESULTS:
                break
            url = next_url(n, page)
        return pages


def _soup(page: RawPage) -> BeautifulSoup:
    return BeautifulSoup(page.body, "html.parser")


def _abs(page: RawPage, url: Optional[str]) -> str:
    if not url or url.startswith("data:"):
        return ""
    return urljoin(page.url, url)


# ---------------------------------------------------------------- Google


class GoogleAdapter(_PagedAdapter):
    """Google "search by image" upload flow.

    1. ``POST /searchbyimage/upload`` (field ``encoded_image``) redirects to
       the pages-with results page; ``a#pnnext`` links further pages.
    2. The first results page links the similar-images view through an
       anchor whose href contains ``tbs=simg``; it paginates the same way.
    """

    engine = EngineId.GOOGLE

    def __init__(self, base_url: str = "https://www.google.com", **kwargs):
        super().__init__(base_url, **kwargs)

    def _submit(self, data: bytes, filename: str, mime: str) -> list[RawPage]:
        resp = self._request(
            "POST",
            f"{self.base_url}/searchbyimage/upload",
            files={"encoded_image": (filename, data, mime)},
            data={"image_content": ""},
        )
        first = self._page(PAGES, 1, resp)
        pages = [first]
        total = self._count(first)
        nxt = _google_next(first)
        for n in range(2, self.max_pages + 1):
            if not nxt or total >= MAX_RESULTS:
                break
            page = self._page(PAGES, n, self._request("GET", nxt))
            pages.append(page)
            got = self._count(page)
            if not got:
                break
            total += got
            nxt = _google_next(page)
        link = _soup(first).select_one('a[href*="tbs=simg"]')
        similar_url = _abs(first, link["href"]) if link else None
        pages += self._follow(SIMILAR, similar_url, lambda n, p: _google_next(p))
        return pages


def _google_next(page: RawPage) -> Optional[str]:
    a = _soup(page).select_one("a#pnnext[href]")
    return _abs(page, a["href"]) if a else None


@register_parser(EngineId.GOOGLE)
def parse_google_page(page: RawPage) -> list[dict]:
    soup = _soup(page)
    if soup.find("body") is None:
        raise ParseFailure(f"google page {page.url}: no HTML body")
    items = []
    if page.kind == SIMILAR.value:
        for meta in soup.select("div.rg_meta"):
            try:
                m = json.loads(meta.get_text())
            except ValueError as exc:
                raise ParseFailure(f"google similar page {page.url}: bad rg_meta: {exc}") from exc
            items.append({"page_url": _abs(page, m.get("ru")), "image_url": _abs(page, m.get("ou")), "thumbnail_url": _abs(page, m.get("tu"))})
        return items
    for g in soup.select("div.g"):
        title = g.select_one("a[href]")
        imgres = g.select_one('a[href*="imgurl="]')
        img = g.select_one("img[src]")
        image_url = ""
        if imgres is not None:
            image_url = parse_qs(urlparse(imgres["href"]).query).get("imgurl", [""])[0]
        items.append(
            {
                "page_url": _abs(page, title["href"]) if title is not None else "",
                "image_url": _abs(page, image_url),
                "thumbnail_url": _abs(page, img["src"]) if img is not None else "",
            }
        )
    return items


# ---------------------------------------------------------------- Bing


class BingAdapter(EngineAdapter):
    """Bing visual search.

    One multipart ``POST /images/api/custom/knowledge`` carrying the image
    base64-encoded in ``imageBin`` returns JSON with both result kinds, so the
    same body is archived under each kind.
    """

    engine = EngineId.BING

    def __init__(self, base_url: str = "https://www.bing.com", **kwargs):
        super().__init__(base_url, **kwargs)

    def _submit(self, data: bytes, filename: str, mime: str) -> list[RawPage]:
        request = {"imageInfo": {}, "knowledgeRequest": {"invokedSkills": ["SimilarImages"], "index": 1}}
        resp = self._request(
            "POST",
            f"{self.base_url}/images/api/custom/knowledge?" + urlencode({"q": "", "iss": "sbiupload", "FORM": "SBIIRP"}),
            files={
                "knowledgeRequest": (None, json.dumps(request)),
                "imageBin": (None, base64.b64encode(data).decode("ascii")),
            },
        )
        return [self._page(kind, 1, resp) for kind in self.kinds]


_BING_ACTIONS = {SIMILAR.value: "VisualSearch", PAGES.value: "PagesIncluding"}


@register_parser(EngineId.BING)
def parse_bing_page(page: RawPage) -> list[dict]:
    data = page.json()
    if not isinstance(data, dict) or not isinstance(data.get("tags"), list):
        raise ParseFailure(f"bing response {page.url}: no tags list")
    want = _BING_ACTIONS[page.kind]
    items = []
    for tag in data["tags"]:
        for action in tag.get("actions", []):
            if action.get("actionType") != want:
                continue
            for v in action.get("data", {}).get("value", []):
                items.append(
                    {
                        "page_url": _abs(page, v.get("hostPageUrl")),
                        "image_url": _abs(page, v.get("contentUrl")),
                        "thumbnail_url": _abs(page, v.get("thumbnailUrl")),
                    }
                )
    return items


# ---------------------------------------------------------------- Yandex


class YandexAdapter(_PagedAdapter):
    """Yandex CBIR.

    ``POST /images/search?rpt=imageview&format=json`` (field ``upfile``) returns
    JSON whose ``blocks[0].params.url`` is a query string identifying the
    upload. Result pages are ``/images/search?<that>&cbir_page=similar|sites&p=<n>``
    with ``p`` counting from 0.
    """

    engine = EngineId.YANDEX

    def __init__(self, base_url: str = "https://yandex.com", **kwargs):
        super().__init__(base_url, **kwargs)

    def _submit(self, data: bytes, filename: str, mime: str) -> list[RawPage]:
        request = {"blocks": [{"block": "b-page_type_search-by-image__link"}]}
        resp = self._request(
            "POST",
            f"{self.base_url}/images/search?" + urlencode({"rpt": "imageview", "format": "json", "request": json.dumps(request)}),
            files={"upfile": (filename, data, mime)},
        )
        landing = self._page("landing", 1, resp)
        try:
            params = resp.json()["blocks"][0]["params"]["url"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise UploadRejected(f"yandex: upload response lacks a result link: {exc}") from exc
        pages = [landing]
        for kind, view in ((SIMILAR, "similar"), (PAGES, "sites")):
            url = lambda n, view=view: f"{self.base_url}/images/search?{params}&" + urlencode({"cbir_page": view, "p": n})
            pages += self._follow(kind, url(0), lambda n, p, url=url: url(n))
        return pages


@register_parser(EngineId.YANDEX)
def parse_yandex_page(page: RawPage) -> list[dict]:
    soup = _soup(page)
    if soup.find("body") is None:
        raise ParseFailure(f"yandex page {page.url}: no HTML body")
    items = []
    if page.kind == SIMILAR.value:
        for el in soup.select(".serp-item[data-bem]"):
            try:
                d = json.loads(el["data-bem"])["serp-item"]
            except (ValueError, KeyError) as exc:
                raise ParseFailure(f"yandex similar page {page.url}: bad data-bem: {exc}") from exc
            items.append(
                {
                    "page_url": _abs(page, d.get("snippet", {}).get("url")),
                    "image_url": _abs(page, d.get("img_href")),
                    "thumbnail_url": _abs(page, d.get("thumb", {}).get("url")),
                }
            )
        return items
    for el in soup.select(".CbirSites-Item"):
        title = el.select_one(".CbirSites-ItemTitle a[href]")
        full = el.select_one(".CbirSites-ItemThumb a[href]")
        img = el.select_one(".CbirSites-ItemThumb img[src]")
        items.append(
            {
                "page_url": _abs(page, title["href"]) if title is not None else "",
                "image_url": _abs(page, full["href"]) if full is not None else "",
                "thumbnail_url": _abs(page, img["src"]) if img is not None else "",
            }
        )
    return items


# ---------------------------------------------------------------- Baidu


class BaiduAdapter(_PagedAdapter):
    """Baidu image recognition (graph.baidu.com).

    ``POST /upload`` (field ``image``) answers ``{"status": 0, "data": {"sign": ...}}``.
    Similar images come from ``/ajax/pcsimi?sign=&page=<n>`` and pages with
    the image from ``/ajax/pcsame?sign=&page=<n>``, both JSON with
    ``data.list`` entries carrying ``thumbUrl``, ``objURL`` and ``fromUrl``.
    """

    engine = EngineId.BAIDU

    def __init__(self, base_url: str = "https://graph.baidu.com", **kwargs):
        super().__init__(base_url, **kwargs)

    def _submit(self, data: bytes, filename: str, mime: str) -> list[RawPage]:
        resp = self._request(
            "POST",
            f"{self.base_url}/upload?" + urlencode({"uptime": int(time.time() * 1000)}),
            files={"image": (filename, data, mime)},
            data={"tn": "pc", "from": "pc", "image_source": "PC_UPLOAD_SEARCH_FILE"},
        )
        landing = self._page("landing", 1, resp)
        try:
            body = resp.json()
            if body.get("status") != 0:
                raise UploadRejected(f"baidu: upload refused with status {body.get('status')}: {body.get('msg', '')}")
            sign = body["data"]["sign"]
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise UploadRejected(f"baidu: unexpected upload response: {exc}") from exc
        pages = [landing]
        for kind, ep in ((SIMILAR, "pcsimi"), (PAGES, "pcsame")):
            url = lambda n, ep=ep: f"{self.base_url}/ajax/{ep}?" + urlencode({"sign": sign, "page": n})
            pages += self._follow(kind, url(1), lambda n, p, url=url: url(n + 1))
        return pages


@register_parser(EngineId.BAIDU)
def parse_baidu_page(page: RawPage) -> list[dict]:
    data = page.json()
    if not isinstance(data, dict) or data.get("status") != 0:
        raise ParseFailure(f"baidu page {page.url}: status {data.get('status') if isinstance(data, dict) else None}")
    rows = (data.get("data") or {}).get("list")
    if rows is None:
        return []
    if not isinstance(rows, list):
        raise ParseFailure(f"baidu page {page.url}: data.list is not a list")
    return [
        {"page_url": _abs(page, r.get("fromUrl")), "image_url": _abs(page, r.get("objURL")), "thumbnail_url": _abs(page, r.get("thumbUrl"))}
        for r in rows
    ]


ADAPTERS: dict[EngineId, type[EngineAdapter]] = {
    EngineId.BAIDU: BaiduAdapter,
    EngineId.BING: BingAdapter,
    EngineId.GOOGLE: GoogleAdapter,
    EngineId.YANDEX: YandexAdapter,
}
