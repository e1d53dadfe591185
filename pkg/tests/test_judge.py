import hashlib
import json

import pytest
from PIL import Image

from risbench import judge as jd
from risbench.engines import SearchResultRecord
from risbench.errors import DownloadFailed, InvalidImage
from risbench.fixtures import StaticServer, build_local_corpus, encode, synthetic_image
from risbench.hashcore import DistanceThreshold
from risbench.store import RunStore


def no_sleep(_):
    pass


@pytest.fixture(scope="module")
def query():
    return encode(synthetic_image(11, 640, 480), "PNG")


def test_identical_thumbnail_distance_zero(query):
    for method in ("phash", "vishash"):
        j = jd.judge_result(query, query, method)
        assert j.distance == 0
        assert j.relevant and j.failure is None


def test_downscaled_thumbnail_is_relevant():
    # measured on 50 synthetic images: pHash max 2 bits (natural), 4 bits (abstract)
    distances = []
    for style in ("natural", "abstract"):
        for seed in range(25):
            im = synthetic_image(seed, 640, 480, style)
            thumb = encode(im.resize((128, 96), Image.Resampling.LANCZOS), "JPEG")
            j = jd.judge_result(encode(im), thumb, "phash")
            distances.append(j.distance)
    assert max(distances) <= 5
    assert sum(d == 0 for d in distances) >= 25


def test_undecodable_thumbnail(query):
    j = jd.judge_result(query, b"<html>not an image</html>", "phash")
    assert j.failure == "DecodeFailed"
    assert j.relevant is False and j.distance is None


def test_hash_failure_is_distinct(query, monkeypatch):
    real = jd.compute_hash
    calls = []

    def flaky(img, algo):
        calls.append(img)
        if len(calls) > 1:
            raise FloatingPointError("boom")
        return real(img, algo)

    monkeypatch.setattr(jd, "compute_hash", flaky)
    j = jd.judge_result(query, query, "vishash")
    assert j.failure == "HashFailed" and not j.relevant


def test_undecodable_query_raises():
    with pytest.raises(InvalidImage):
        jd.judge_result(b"junk", b"junk", "phash")


def test_failed_judgment_invariant():
    with pytest.raises(ValueError):
        jd.Judgment("q", "e", "similar_to", 1, "phash", 3, False, "DownloadFailed")
    with pytest.raises(ValueError):
        jd.Judgment("q", "e", "similar_to", 1, "phash", None, True, "DecodeFailed")


def test_relevance_follows_threshold(query):
    thumb = encode(synthetic_image(12, 640, 480), "PNG")
    for method in ("phash", "vishash"):
        j = jd.judge_result(query, thumb, method)
        for t in (DistanceThreshold(0, 0.0), DistanceThreshold(64, 1.0), DistanceThreshold()):
            (rj,) = jd.rejudge([j], t)
            limit = t.phash_bits if method == "phash" else t.vishash_distance
            assert rj.relevant == (rj.distance <= limit)


# ---- thumbnail cache ----


def test_thumbnail_cache_is_content_addressed_and_idempotent(tmp_path, query):
    with StaticServer({"a.png": query}) as srv:
        cache = jd.ThumbnailCache(tmp_path / "thumbs", sleep=no_sleep)
        d = cache.fetch(srv.url("a.png"))
        assert d == hashlib.sha256(query).hexdigest()
        assert cache.path_for(d).read_bytes() == query
        n = len(srv.requests)
        assert jd.ThumbnailCache(tmp_path / "thumbs").fetch(srv.url("a.png")) == d
        assert len(srv.requests) == n


def test_thumbnail_cache_dead_url(tmp_path):
    with StaticServer() as srv:
        cache = jd.ThumbnailCache(tmp_path / "thumbs", sleep=no_sleep)
        with pytest.raises(DownloadFailed):
            cache.fetch(srv.url("gone.jpg"))
        n = len(srv.requests)
        assert n == 1  # 404 is permanent, not retried
        with pytest.raises(DownloadFailed):
            cache.fetch(srv.url("gone.jpg"))
        assert len(srv.requests) == n


# ---- whole-run judging ----


def setup_run(tmp_path, n_records=10, dead=(3,)):
    """One query, ``n_records`` SERs: even positions are the query itself, odd ones other images."""
    q = encode(synthetic_image(1, 320, 240), "PNG")
    corpus = build_local_corpus(tmp_path / "corpus", [("photo", q)])
    img = corpus.images[0]
    files = {f"t{i}.png": q if i % 2 == 0 else encode(synthetic_image(500 + i, 120, 90)) for i in range(1, n_records + 1)}
    srv = StaticServer(files).start()
    for i in dead:
        files.pop(f"t{i}.png")
        srv.files.pop(f"t{i}.png")
    store = RunStore(tmp_path / "runs", "r1")
    recs = [
        SearchResultRecord(img.id, "fixture", "similar_to", i, "fixture://x", "", "", srv.url(f"t{i}.png"), "2022-06-01T00:00:00Z")
        for i in range(1, n_records + 1)
    ]
    store.sers.rewrite(r.to_dict() for r in recs)
    return corpus, store, srv


def test_judge_run_counts_and_failures(tmp_path):
    corpus, store, srv = setup_run(tmp_path)
    try:
        summary = jd.judge_run(store, corpus, ["phash"], sleep=no_sleep)
        js = jd.load_judgments(store)
    finally:
        srv.stop()
        store.close()
    assert len(js) == 10
    assert sum(j.failure is None for j in js) == 9
    (dead,) = [j for j in js if j.failure]
    assert dead.position == 3 and dead.failure == "DownloadFailed" and not dead.relevant
    assert summary.failure_table() == [{"method": "phash", "failure": "DownloadFailed", "count": 1, "records": 10, "percent": 10.0}]
    assert {j.position for j in js if j.relevant} == {2, 4, 6, 8, 10}


def test_judge_run_both_methods_and_canonical_order(tmp_path):
    corpus, store, srv = setup_run(tmp_path, dead=())
    try:
        jd.judge_run(store, corpus, ["vishash", "phash"], sleep=no_sleep)
        rows = store.judgments.read_all()
    finally:
        srv.stop()
        store.close()
    assert len(rows) == 20
    keys = [(r["query_id"], r["engine"], r["kind"], r["position"], r["method"]) for r in rows]
    assert keys == sorted(keys)
    assert set(rows[0]) == {"query_id", "engine", "kind", "position", "method", "distance", "relevant", "failure"}


def test_rejudge_new_thresholds_uses_caches(tmp_path):
    corpus, store, srv = setup_run(tmp_path)
    try:
        jd.judge_run(store, corpus, ["phash", "vishash"], sleep=no_sleep)
        first = store.judgments.path.read_bytes()
        hashes = (store.thumbs_dir / "hashes.jsonl").read_bytes()
        qhashes = corpus.hash_cache.path.read_bytes()
        n = len(srv.requests)
        again = jd.judge_run(store, corpus, ["phash", "vishash"], sleep=no_sleep)
        assert store.judgments.path.read_bytes() == first  # deterministic
        strict = jd.judge_run(store, corpus, ["phash", "vishash"], DistanceThreshold(0, 0.0), sleep=no_sleep)
        assert len(srv.requests) == n
        assert again.network_fetches == strict.network_fetches == 0
        assert (store.thumbs_dir / "hashes.jsonl").read_bytes() == hashes
        assert corpus.hash_cache.path.read_bytes() == qhashes
        stats = json.loads((store.dir / "judge_stats.json").read_text())
        assert stats["thresholds"] == {"phash_bits": 0, "vishash_distance": 0.0}
    finally:
        srv.stop()
        store.close()
