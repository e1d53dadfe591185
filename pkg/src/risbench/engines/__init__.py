"""Reverse image search engine adapters and the submission stage."""

from risbench.engines.base import (
    LIVE_ENGINES,
    MAX_RESULTS,
    EngineAdapter,
    EngineId,
    RawBundle,
    RawPage,
    ResultKind,
    SearchResultRecord,
    archive_bundle,
    canonical_order,
    load_bundle,
    parse_results,
)
from risbench.engines.fixture import FixtureEngine, bundle_from_records, write_fixture
from risbench.engines.live import ADAPTERS, BaiduAdapter, BingAdapter, GoogleAdapter, YandexAdapter
from risbench.engines.runner import compact, reparse, submit_corpus, write_records

__all__ = [
    "ADAPTERS",
    "LIVE_ENGINES",
    "MAX_RESULTS",
    "BaiduAdapter",
    "BingAdapter",
    "EngineAdapter",
    "EngineId",
    "FixtureEngine",
    "GoogleAdapter",
    "RawBundle",
    "RawPage",
    "ResultKind",
    "SearchResultRecord",
    "YandexAdapter",
    "archive_bundle",
    "bundle_from_records",
    "canonical_order",
    "compact",
    "load_bundle",
    "parse_results",
    "reparse",
    "submit_corpus",
    "write_fixture",
    "write_records",
]
