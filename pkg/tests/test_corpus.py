import hashlib

import pytest

from risbench import corpus as cp
from risbench.errors import APIUnavailable, DownloadFailed, UnknownContentType
from risbench.fixtures import FixtureMediaServer, build_media_fixture, encode, synthetic_image


def no_sleep(_):
    pass


def small_fixture(n=3, size=(1280, 960)):
    results, files, _ = build_media_fixture({"diagram": n}, size=size, seed=7)
    return results, files


def test_category_classes():
    assert cp.Category("diagram").image_class == cp.ImageClass.ABSTRACT
    assert cp.Category("schematic").image_class == cp.ImageClass.ABSTRACT
    assert cp.Category("photo").image_class == cp.ImageClass.NATURAL
    assert cp.Category("photograph").image_class == cp.ImageClass.NATURAL
    with pytest.raises(ValueError):
        cp.Category("chart")


def test_search_media_fewer_results_than_requested():
    results, files = small_fixture(3, size=(64, 48))
    with FixtureMediaServer(results, files) as srv:
        repo = cp.MediaRepository(srv.api_url, sleep=no_sleep)
        refs = repo.search_media("diagram", 100)
        assert [r.rank for r in refs] == [1, 2, 3]
        assert [r.title for r in refs] == results["diagram"]
        assert len(repo.search_media("diagram", 1)) == 1


def test_search_media_paginates():
    results, files, _ = build_media_fixture({"photo": 23}, size=(32, 24))
    with FixtureMediaServer(results, files) as srv:
        repo = cp.MediaRepository(srv.api_url, batch_size=5, sleep=no_sleep)
        refs = repo.search_media("photo", 20)
        assert [r.title for r in refs] == results["photo"][:20]
        assert sum("api.php" in r for r in srv.requests) == 4


def test_search_media_retries_then_fails():
    results, files = small_fixture(2, size=(32, 24))
    with FixtureMediaServer(results, files, unavailable_calls=2) as srv:
        assert len(cp.MediaRepository(srv.api_url, attempts=3, sleep=no_sleep).search_media("diagram", 2)) == 2
    with FixtureMediaServer(results, files, unavailable_calls=10) as srv:
        with pytest.raises(APIUnavailable):
            cp.MediaRepository(srv.api_url, attempts=3, sleep=no_sleep).search_media("diagram", 2)


def test_fetch_scaled_preserves_aspect(tmp_path):
    results, files = small_fixture(1)
    with FixtureMediaServer(results, files) as srv:
        ref = cp.MediaRepository(srv.api_url).search_media("diagram", 1, width=640)[0]
        img = cp.fetch_scaled(ref, tmp_path)
        assert (img.width, img.height) == (640, 480)
        again = cp.fetch_scaled(ref, tmp_path)
        assert again.content_digest == img.content_digest
    stored = list((tmp_path / "files").rglob("*.*"))
    assert len(stored) == 1
    assert hashlib.sha256(stored[0].read_bytes()).hexdigest() == img.content_digest


def test_fetch_scaled_narrow_original_not_upscaled(tmp_path):
    results, files = small_fixture(1, size=(300, 200))
    with FixtureMediaServer(results, files) as srv:
        ref = cp.MediaRepository(srv.api_url).search_media("diagram", 1, width=640)[0]
        assert cp.fetch_scaled(ref, tmp_path).width == 300


def test_fetch_scaled_failure(tmp_path):
    results, files = small_fixture(1, size=(32, 24))
    title = results["diagram"][0]
    with FixtureMediaServer(results, files, broken={title}) as srv:
        ref = cp.MediaRepository(srv.api_url).search_media("diagram", 1)[0]
        with pytest.raises(DownloadFailed):
            cp.fetch_scaled(ref, tmp_path, sleep=no_sleep)


def _img(digest, cats):
    return cp.CorpusImage(cp.image_id(digest), tuple(cats), "", "", "", 1, 1, digest, "t")


def test_dedupe():
    a, b, c = _img("a" * 64, ["diagram"]), _img("b" * 64, ["photo"]), _img("a" * 64, ["schematic"])
    out = cp.dedupe([a, b, c])
    assert [r.content_digest for r in out] == ["a" * 64, "b" * 64]
    assert out[0].categories == ("diagram", "schematic")
    assert cp.dedupe([a, b]) == [a, b]
    assert len(cp.dedupe([a, _img("a" * 64, ["diagram"])])) == 1


@pytest.mark.parametrize("fmt, ext", [("JPEG", "jpg"), ("PNG", "png"), ("GIF", "gif")])
def test_anonymize_for_upload(tmp_path, fmt, ext):
    data = encode(synthetic_image(1, 40, 30), fmt)
    digest = hashlib.sha256(data).hexdigest()
    (tmp_path / "files").mkdir()
    # original name deliberately carries a misleading extension
    (tmp_path / "files" / "Some_Descriptive_Name.bin").write_bytes(data)
    rec = cp.CorpusImage(cp.image_id(digest), ("photo",), "", "", "files/Some_Descriptive_Name.bin", 40, 30, digest, "t")
    work = tmp_path / "work"
    work.mkdir()
    out = cp.anonymize_for_upload(rec, tmp_path, work)
    assert out.name == f"upload_file.{ext}"
    assert hashlib.sha256(out.read_bytes()).hexdigest() == digest
    with cp.upload_copy(rec, tmp_path) as p:
        assert p.name == f"upload_file.{ext}"
    assert not p.exists()


def test_anonymize_unknown_content_type(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"%PDF-1.4 not an image")
    rec = cp.CorpusImage("x", ("diagram",), "", "", "x.bin", 1, 1, "0" * 64, "t")
    with pytest.raises(UnknownContentType):
        cp.anonymize_for_upload(rec, tmp_path, tmp_path)


def test_acquire_is_idempotent(tmp_path):
    results, files, broken = build_media_fixture({"diagram": 4, "photo": 4}, {("diagram", "photo"): 1}, broken=1, size=(64, 48))
    with FixtureMediaServer(results, files, broken=broken) as srv:
        repo = cp.MediaRepository(srv.api_url, sleep=no_sleep)
        first = cp.acquire(tmp_path, ["diagram", "photo"], 4, repo=repo, sleep=no_sleep)
        images = list(first.images)
        snapshot = first.snapshot.path.read_bytes()
        files_before = sorted(p.name for p in (tmp_path / "files").rglob("*.*"))
        second = cp.acquire(tmp_path, ["diagram", "photo"], 4, repo=repo, sleep=no_sleep)
        assert second.images == images
        assert second.snapshot.path.read_bytes() == snapshot
        assert sorted(p.name for p in (tmp_path / "files").rglob("*.*")) == files_before
    assert len(images) == 8 - 1 - 1
    digests = [i.content_digest for i in images]
    assert len(set(digests)) == len(digests)
    assert sum(cp.Corpus(tmp_path).category_counts().values()) >= len(images)


def test_acquire_records_shortfall(tmp_path):
    results, files, _ = build_media_fixture({"schematic": 3}, size=(32, 24))
    with FixtureMediaServer(results, files) as srv:
        corpus = cp.acquire(tmp_path, ["schematic"], 100, repo=cp.MediaRepository(srv.api_url))
    shortfalls = [e for e in corpus.events if e["event"] == "shortfall"]
    assert shortfalls and shortfalls[0]["received"] == 3
    assert len(corpus.images) == 3
