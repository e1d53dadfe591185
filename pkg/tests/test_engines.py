import hashlib
import json

import pytest

from risbench.engines import (
    ADAPTERS,
    MAX_RESULTS,
    EngineId,
    FixtureEngine,
    ResultKind,
    SearchResultRecord,
    archive_bundle,
    bundle_from_records,
    load_bundle,
    parse_results,
    reparse,
    submit_corpus,
    write_fixture,
)
from risbench.engines.runner import FAILED, NO_RESULTS, OK, UNPARSED
from risbench.errors import FixtureError, ParseFailure, UploadRejected
from risbench.fixtures import FakeEngineServer, build_local_corpus, encode, synthetic_image
from risbench.store import RunStore

KINDS = [k.value for k in ResultKind]


def no_sleep(_):
    pass


def items(n, tag="r"):
    return [
        {
            "page_url": f"http://pages.test/{tag}/{i}",
            "image_url": f"http://images.test/{tag}/{i}.jpg",
            "thumbnail_url": f"http://thumbs.test/{tag}/{i}.jpg",
        }
        for i in range(n)
    ]


@pytest.fixture(scope="module")
def query_png():
    return encode(synthetic_image(3, 64, 48), "PNG")


@pytest.fixture(scope="module")
def fake_engines():
    with FakeEngineServer() as srv:
        yield srv


ENGINES = ["fixture", "baidu", "bing", "google", "yandex"]


@pytest.fixture(params=ENGINES)
def make_adapter(request, fake_engines, tmp_path):
    """Factory: plants -> adapter of the parametrized engine serving those plants."""
    name = request.param

    def make(plants, **kwargs):
        kwargs.setdefault("sleep", no_sleep)
        kwargs.setdefault("delay", 0.0)
        kwargs.setdefault("jitter", 0.0)
        if name == "fixture":
            return FixtureEngine(write_fixture(tmp_path / "fx", plants), **kwargs)
        fake_engines.plants = plants
        return ADAPTERS[EngineId(name)](fake_engines.engine_url(name), **kwargs)

    make.engine = name
    return make


def upload_file(tmp_path, data):
    p = tmp_path / "upload_file.png"
    p.write_bytes(data)
    return p


# ---- adapter conformance: every engine, same black-box contract ----


def test_conformance_planted_results_in_order(make_adapter, tmp_path, query_png):
    digest = hashlib.sha256(query_png).hexdigest()
    planted = {"similar_to": items(7, "s"), "pages_with": items(3, "p")}
    adapter = make_adapter({digest: planted})
    bundle = adapter.submit_image(upload_file(tmp_path, query_png), "q1")
    assert bundle.engine == make_adapter.engine
    for kind in KINDS:
        recs = parse_results(bundle, kind)
        assert [r.position for r in recs] == list(range(1, len(planted[kind]) + 1))
        got = [{f: getattr(r, f) for f in ("page_url", "image_url", "thumbnail_url")} for r in recs]
        assert got == planted[kind]
        assert all(r.query_id == "q1" and r.kind == kind and r.ser_url and r.captured_at for r in recs)


def test_conformance_cap_at_100(make_adapter, tmp_path, query_png):
    digest = hashlib.sha256(query_png).hexdigest()
    adapter = make_adapter({digest: {"similar_to": items(250), "pages_with": items(120, "p")}})
    bundle = adapter.submit_image(upload_file(tmp_path, query_png), "q1")
    for kind in KINDS:
        recs = parse_results(bundle, kind)
        assert len(recs) == MAX_RESULTS
        assert [r.position for r in recs] == list(range(1, 101))


def test_conformance_unknown_query_gives_no_results(make_adapter, tmp_path, query_png):
    adapter = make_adapter({"0" * 64: {"similar_to": items(5)}})
    bundle = adapter.submit_image(upload_file(tmp_path, query_png), "q1")
    assert all(parse_results(bundle, k) == [] for k in KINDS)


def test_conformance_oversized_upload_rejected_before_network(make_adapter, fake_engines, tmp_path, query_png):
    adapter = make_adapter({}, max_upload_bytes=len(query_png) - 1)
    before = len(fake_engines.requests)
    with pytest.raises(UploadRejected):
        adapter.submit_image(upload_file(tmp_path, query_png), "q1")
    assert len(fake_engines.requests) == before


def test_conformance_missing_fields_are_empty_and_flagged(make_adapter, tmp_path, query_png):
    digest = hashlib.sha256(query_png).hexdigest()
    planted = {"similar_to": [{"page_url": "http://pages.test/a", "image_url": "", "thumbnail_url": "http://thumbs.test/a.jpg"}]}
    bundle = make_adapter({digest: planted}).submit_image(upload_file(tmp_path, query_png), "q1")
    (rec,) = parse_results(bundle, "similar_to")
    assert rec.image_url == ""
    assert rec.missing_fields == ("image_url",)


def test_conformance_archive_replay_is_identical(make_adapter, tmp_path, query_png):
    digest = hashlib.sha256(query_png).hexdigest()
    adapter = make_adapter({digest: {"similar_to": items(45), "pages_with": items(12, "p")}})
    bundle = adapter.submit_image(upload_file(tmp_path, query_png), "q1")
    archive_bundle(tmp_path / "raw", bundle)
    again = load_bundle(tmp_path / "raw", make_adapter.engine, "q1")
    for kind in KINDS:
        assert parse_results(again, kind) == parse_results(bundle, kind)
    assert (tmp_path / "raw" / make_adapter.engine / "q1" / "similar_to" / "page-1").is_file()


# ---- engine-specific behaviour ----


def test_fixture_engine_self_match(tmp_path, query_png):
    digest = hashlib.sha256(query_png).hexdigest()
    (tmp_path / "fx").mkdir()
    (tmp_path / "fx" / "self.png").write_bytes(query_png)
    write_fixture(tmp_path / "fx", {digest: {"similar_to": [{"page_url": "", "image_url": "", "thumbnail_url": "self.png"}]}})
    engine = FixtureEngine(tmp_path / "fx")
    rec = parse_results(engine.submit_image(upload_file(tmp_path, query_png), "q"), "similar_to")[0]
    assert rec.position == 1
    assert rec.thumbnail_url.startswith("file://")
    from risbench._http import fetch_bytes

    assert fetch_bytes(rec.thumbnail_url) == query_png


@pytest.mark.parametrize(
    "index, bundle",
    [
        ("not json", None),
        ('["a list"]', None),
        ('{"d": "b.json"}', None),  # missing bundle file
        ('{"d": "b.json"}', '{"similar_to": {"not": "a list"}}'),
        ('{"d": "b.json"}', '{"similar_to": [{"page_url": "x", "colour": "red"}]}'),
    ],
)
def test_fixture_engine_malformed_raises_at_load(tmp_path, index, bundle):
    (tmp_path / "index.json").write_text(index)
    if bundle is not None:
        (tmp_path / "b.json").write_text(bundle)
    with pytest.raises(FixtureError):
        FixtureEngine(tmp_path)


def test_fixture_round_trip():
    recs = [
        SearchResultRecord("q", "fixture", kind, i, f"fixture://q/{kind}", f"p{i}", "" if i == 2 else f"i{i}", f"t{i}", "2022-06-01T00:00:00Z")
        for kind in KINDS
        for i in range(1, 6)
    ]
    bundle = bundle_from_records(recs)
    assert [r for k in KINDS for r in parse_results(bundle, k)] == recs


def test_politeness_delay_between_requests(fake_engines, tmp_path, query_png):
    waits = []
    fake_engines.plants = {}
    adapter = ADAPTERS[EngineId.YANDEX](fake_engines.engine_url("yandex"), delay=5.0, jitter=0.0, sleep=waits.append)
    adapter.submit_image(upload_file(tmp_path, query_png), "q")
    # upload, then one (empty) page per kind: two spaced requests
    assert len(waits) == 2
    assert all(4.0 < w <= 5.0 for w in waits)


def test_google_follows_pagination(fake_engines, tmp_path, query_png):
    digest = hashlib.sha256(query_png).hexdigest()
    fake_engines.plants = {digest: {"pages_with": items(25)}}
    adapter = ADAPTERS[EngineId.GOOGLE](fake_engines.engine_url("google"), delay=0, jitter=0)
    bundle = adapter.submit_image(upload_file(tmp_path, query_png), "q")
    assert [p.number for p in bundle.pages_for("pages_with")] == [1, 2, 3]
    assert len(parse_results(bundle, "pages_with")) == 25


def test_unparseable_page_raises_parse_failure(fake_engines, tmp_path, query_png):
    digest = hashlib.sha256(query_png).hexdigest()
    fake_engines.plants = {}
    fake_engines.garbled = {digest}
    try:
        bundle = ADAPTERS[EngineId.BAIDU](fake_engines.engine_url("baidu"), delay=0, jitter=0).submit_image(
            upload_file(tmp_path, query_png), "q"
        )
    finally:
        fake_engines.garbled = set()
    with pytest.raises(ParseFailure):
        parse_results(bundle, "similar_to")


# ---- submission stage ----


def small_corpus(tmp_path, n=3):
    entries = [("photo", encode(synthetic_image(100 + i, 48, 32), "PNG")) for i in range(n)]
    return build_local_corpus(tmp_path / "corpus", entries)


def test_submit_corpus_writes_canonical_logs(tmp_path):
    corpus = small_corpus(tmp_path)
    imgs = corpus.images
    plants = {imgs[0].content_digest: {"similar_to": items(4)}, imgs[1].content_digest: {"pages_with": items(2)}}
    engine = FixtureEngine(write_fixture(tmp_path / "fx", plants))
    with RunStore(tmp_path / "runs", "r1") as store:
        summary = submit_corpus(store, corpus, {"fixture": engine}, sleep=no_sleep)
        sers = store.sers.read_all()
        subs = store.submissions.read_all()
    assert summary.records == 6
    refs = [(d["query_id"], d["engine"], d["kind"], d["position"]) for d in sers]
    assert refs == sorted(refs)
    status = {(s["query_id"], s["kind"]): s["status"] for s in subs}
    assert status[(imgs[0].id, "similar_to")] == OK
    assert status[(imgs[0].id, "pages_with")] == NO_RESULTS
    assert status[(imgs[2].id, "similar_to")] == NO_RESULTS
    assert len(subs) == 6


def test_submit_rate_limited_then_failed_record(tmp_path):
    corpus = small_corpus(tmp_path, 1)
    waits = []
    with FakeEngineServer(rate_limit=1000) as srv, RunStore(tmp_path / "runs", "r1") as store:
        adapter = ADAPTERS[EngineId.BING](srv.engine_url("bing"), delay=0, jitter=0)
        summary = submit_corpus(store, corpus, {"bing": adapter}, attempts=3, base_delay=2.0, sleep=waits.append)
        subs = store.submissions.read_all()
    assert waits == [2.0, 4.0]
    assert {s["status"] for s in subs} == {FAILED}
    assert "RateLimited" in subs[0]["error"]
    assert summary.failed_engines == ["bing"]


def test_submit_recovers_after_transient_rate_limit(tmp_path):
    corpus = small_corpus(tmp_path, 1)
    digest = corpus.images[0].content_digest
    with FakeEngineServer({digest: {"similar_to": items(3)}}, rate_limit=2) as srv, RunStore(tmp_path / "runs", "r1") as store:
        adapter = ADAPTERS[EngineId.BING](srv.engine_url("bing"), delay=0, jitter=0)
        summary = submit_corpus(store, corpus, {"bing": adapter}, attempts=3, sleep=no_sleep)
    assert summary.failed_engines == []
    assert summary.records == 3


def test_submit_marks_unparsed_and_keeps_raw(tmp_path):
    corpus = small_corpus(tmp_path, 1)
    img = corpus.images[0]
    with FakeEngineServer(garbled={img.content_digest}) as srv, RunStore(tmp_path / "runs", "r1") as store:
        adapter = ADAPTERS[EngineId.YANDEX](srv.engine_url("yandex"), delay=0, jitter=0)
        submit_corpus(store, corpus, {"yandex": adapter}, sleep=no_sleep)
        subs = store.submissions.read_all()
        assert (store.raw_dir / "yandex" / img.id / "bundle.json").is_file()
    assert {s["status"] for s in subs} == {UNPARSED}


def test_submit_resume_skips_done_queries(tmp_path):
    corpus = small_corpus(tmp_path, 2)
    engine = FixtureEngine(write_fixture(tmp_path / "fx", {corpus.images[0].content_digest: {"similar_to": items(2)}}))
    with RunStore(tmp_path / "runs", "r1") as store:
        submit_corpus(store, corpus, {"fixture": engine}, sleep=no_sleep)
        first = store.sers.path.read_bytes()
        again = submit_corpus(store, corpus, {"fixture": engine}, sleep=no_sleep)
        assert again.records == 0
        assert store.sers.path.read_bytes() == first


def test_reparse_reproduces_sers_log(tmp_path):
    corpus = small_corpus(tmp_path, 3)
    plants = {img.content_digest: {"similar_to": items(i + 1), "pages_with": items(2 * i, "p")} for i, img in enumerate(corpus.images)}
    with FakeEngineServer(plants) as srv, RunStore(tmp_path / "runs", "r1") as store:
        adapters = {
            "fixture": FixtureEngine(write_fixture(tmp_path / "fx", plants)),
            "google": ADAPTERS[EngineId.GOOGLE](srv.engine_url("google"), delay=0, jitter=0),
        }
        submit_corpus(store, corpus, adapters, sleep=no_sleep)
        records, unparsed = reparse(store.raw_dir)
        original = [json.loads(l) for l in store.sers.path.read_text().splitlines()[1:]]
    assert unparsed == []
    assert [r.to_dict() for r in records] == original
