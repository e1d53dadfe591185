"""Deterministic offline engine backed by a directory of canned results.

Layout::

    <dir>/index.json          {"<sha256 of query bytes>": "<bundle file>", ...}
    <dir>/<bundle file>       {"similar_to": [item, ...], "pages_with": [item, ...]}

An item is ``{"page_url", "image_url", "thumbnail_url"}``. Relative URLs are
resolved against ``<dir>`` as ``file://`` URLs when the fixture is loaded.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

from risbench.engines.base import (
    RESULT_FIELDS,
    EngineAdapter,
    EngineId,
    RawBundle,
    RawPage,
    ResultKind,
    SearchResultRecord,
    register_parser,
)
from risbench.errors import FixtureError, ParseFailure
from risbench.store import sha256_bytes, utc_now


def _resolve(url: str, root: Path) -> str:
    if not url or "://" in url:
        return url
    return (root / url).resolve().as_uri()


class FixtureEngine(EngineAdapter):
    engine = EngineId.FIXTURE

    def __init__(self, directory: Path | str, **kwargs):
        kwargs.setdefault("delay", 0.0)
        kwargs.setdefault("jitter", 0.0)
        super().__init__(**kwargs)
        self.dir = Path(directory)
        self.bundles = self._load()

    def _load(self) -> dict[str, dict[str, list[dict]]]:
        try:
            index = json.loads((self.dir / "index.json").read_text())
        except (OSError, ValueError) as exc:
            raise FixtureError(f"{self.dir}: unreadable index.json: {exc}") from exc
        if not isinstance(index, dict):
            raise FixtureError(f"{self.dir}: index.json must map digests to bundle files")
        out = {}
        for digest, name in index.items():
            try:
                raw = json.loads((self.dir / name).read_text())
            except (OSError, ValueError) as exc:
                raise FixtureError(f"{self.dir}: bundle {name!r}: {exc}") from exc
            kinds = {}
            for kind in ResultKind:
                items = raw.get(kind.value, [])
                if not isinstance(items, list) or not all(isinstance(i, dict) for i in items):
                    raise FixtureError(f"{name}: {kind.value} must be a list of objects")
                unknown = {k for i in items for k in i} - set(RESULT_FIELDS)
                if unknown:
                    raise FixtureError(f"{name}: unknown item fields {sorted(unknown)}")
                kinds[kind.value] = [{f: _resolve(i.get(f, ""), self.dir) for f in RESULT_FIELDS} for i in items]
            out[digest] = kinds
        return out

    def _submit(self, data: bytes, filename: str, mime: str) -> list[RawPage]:
        digest = sha256_bytes(data)
        planted = self.bundles.get(digest, {})
        now = utc_now()
        return [
            RawPage(
                kind.value,
                1,
                f"fixture://{digest[:16]}/{kind.value}",
                _dump({"results": planted.get(kind.value, [])}),
                200,
                "application/json",
                now,
            )
            for kind in self.kinds
        ]


def _dump(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


@register_parser(EngineId.FIXTURE)
def parse_fixture_page(page: RawPage) -> list[dict]:
    data = page.json()
    if not isinstance(data, dict) or not isinstance(data.get("results"), list):
        raise ParseFailure(f"fixture page {page.url} lacks a results list")
    return data["results"]


def bundle_from_records(records: Sequence[SearchResultRecord]) -> RawBundle:
    """Serialize records into a fixture bundle; ``parse_results`` inverts it."""
    if not records:
        raise ValueError("need at least one record")
    first = records[0]
    pages: list[RawPage] = []
    for kind in ResultKind:
        recs = [r for r in records if r.kind == kind.value]
        groups: list[list[SearchResultRecord]] = []
        for r in sorted(recs, key=lambda r: r.position):
            if groups and groups[-1][0].ser_url == r.ser_url and groups[-1][0].captured_at == r.captured_at:
                groups[-1].append(r)
            else:
                groups.append([r])
        for n, group in enumerate(groups, start=1):
            items = [{f: getattr(r, f) for f in RESULT_FIELDS} for r in group]
            pages.append(
                RawPage(kind.value, n, group[0].ser_url, _dump({"results": items}), 200, "application/json", group[0].captured_at)
            )
    return RawBundle(first.engine, first.query_id, pages)


def write_fixture(directory: Path | str, plants: Mapping[str, Mapping[str, Sequence[Mapping[str, str]]]]) -> Path:
    """Write a fixture directory from ``{digest: {kind: [item, ...]}}``."""
    root = Path(directory)
    (root / "bundles").mkdir(parents=True, exist_ok=True)
    index = {}
    for digest, kinds in sorted(plants.items()):
        name = f"bundles/{digest[:16]}.json"
        body = {k: [dict(i) for i in kinds.get(k, [])] for k in (ResultKind.SIMILAR_TO.value, ResultKind.PAGES_WITH.value)}
        (root / name).write_bytes(_dump(body))
        index[digest] = name
    (root / "index.json").write_bytes(_dump(index))
    return root
