import xml.etree.ElementTree as ET
from fractions import Fraction

import pytest

from risbench.fixtures import build_fixture_study
from risbench.pipeline import Config, Pipeline
from risbench.report import GROUPS, ROLLUPS, read_csv, render_report


def run_study(tmp_path, plan=None, per_query=10, methods=("phash", "vishash"), **kw):
    corpus, fx = build_fixture_study(tmp_path, **({"plan": plan} if plan else {}), per_query=per_query, **kw)
    cfg = Config().with_overrides(
        runs_dir=str(tmp_path / "runs"),
        corpus_dir=str(corpus.dir),
        engines={"enabled": ["fixture"], "fixture_dir": str(fx), "delay": 0.0},
        judge={"methods": list(methods)},
    )
    p = Pipeline(cfg, "r1")
    p.run()
    return p


def rows(path, **match):
    return [r for r in read_csv(path) if all(r[k] == str(v) for k, v in match.items())]


def hand_precision(rank, n, k):
    """P@k for a ranking of n results with a single relevant item at ``rank``."""
    if rank is None or n == 0:
        return Fraction(0)
    denom = k if k < n else n
    return Fraction(1 if rank <= min(k, n) else 0, denom)


def test_all_at_position_one_is_flat(tmp_path):
    plan = [(c, 1) for c in ("diagram", "schematic", "photo", "photograph") for _ in range(2)]
    p = run_study(tmp_path, plan, per_query=1, methods=("phash",))
    try:
        rep = p.store.report_dir
        for r in rows(rep / "precision_phash.csv", population="responsive"):
            assert float(r["mean"]) == 1.0
        for r in rows(rep / "retrievability_phash.csv"):
            assert float(r["mean"]) == 1.0
        for r in rows(rep / "mrr_phash.csv"):
            assert float(r["mean"]) == 1.0
    finally:
        p.close()


def test_mixed_ranks_match_hand_enumeration(tmp_path):
    p = run_study(tmp_path, methods=("phash",))
    try:
        rep = p.store.report_dir
        # per category: ranks 1, 1, 1, 3 with 10 results each, plus one query with nothing
        responsive = [1, 1, 1, 3]
        everyone = responsive + [None]
        for pop, ranks in (("responsive", responsive), ("all", everyone)):
            n_of = lambda r: 0 if r is None else 10  # noqa: E731
            for k in range(1, 11):
                want = sum(hand_precision(r, n_of(r), k) for r in ranks) / len(ranks)
                (row,) = rows(rep / "precision_phash.csv", engine="fixture", kind="similar_to", category="photo", population=pop, k=k)
                assert float(row["mean"]) == pytest.approx(float(want), abs=1e-15)
                want_r = Fraction(sum(1 for r in ranks if r is not None and r <= k), len(ranks))
                (row,) = rows(rep / "retrievability_phash.csv", category="diagram", kind="pages_with", population=pop, c=k)
                assert float(row["mean"]) == pytest.approx(float(want_r), abs=1e-15)
            want_mrr = sum(Fraction(1, r) for r in ranks if r) / len(ranks)
            (row,) = rows(rep / "mrr_phash.csv", category="schematic", kind="similar_to", population=pop)
            assert float(row["mean"]) == pytest.approx(float(want_mrr), abs=1e-15)
            assert int(row["n"]) == len(ranks)
    finally:
        p.close()


def test_rollups_lie_between_constituents(tmp_path):
    plan = [("diagram", 1), ("diagram", 2), ("schematic", 5), ("photo", 1), ("photograph", None), ("photograph", 4), ("photo", 9)]
    p = run_study(tmp_path, plan, methods=("vishash",))
    try:
        for name in ("precision_vishash.csv", "retrievability_vishash.csv"):
            table = read_csv(p.store.report_dir / name)
            axis = "k" if "precision" in name else "c"
            index = {(r["kind"], r["category"], r["population"], r[axis]): r for r in table}
            for (kind, cat, pop, x), r in index.items():
                if cat not in ROLLUPS:
                    continue
                parts = [index[(kind, c, pop, x)] for c in ROLLUPS[cat] if (kind, c, pop, x) in index]
                means = [float(q["mean"]) for q in parts]
                assert min(means) - 1e-12 <= float(r["mean"]) <= max(means) + 1e-12
                assert int(r["n"]) == sum(int(q["n"]) for q in parts)
    finally:
        p.close()


def test_svg_values_equal_csv(tmp_path):
    p = run_study(tmp_path, methods=("phash",))
    try:
        rep = p.store.report_dir
        for fig, table, axis in (("precision_phash.svg", "precision_phash.csv", "k"), ("retrievability_phash.svg", "retrievability_phash.csv", "c")):
            csv_vals = {
                (r["engine"], r["kind"], r["category"], r[axis]): (r["mean"], r["stderr"], r["n"])
                for r in rows(rep / table, population="responsive")
                if r["category"] in ("diagram", "schematic", "photo", "photograph")
            }
            svg_vals = {}
            for el in ET.parse(rep / fig).getroot().iter("{http://www.w3.org/2000/svg}circle"):
                a = el.attrib
                svg_vals[(a["data-engine"], a["data-kind"], a["data-category"], a["data-x"])] = (a["data-mean"], a["data-stderr"], a["data-n"])
            assert svg_vals == csv_vals
        bars = {
            (a["data-kind"], a["data-category"]): a["data-mean"]
            for a in (el.attrib for el in ET.parse(rep / "mrr_phash.svg").getroot().iter("{http://www.w3.org/2000/svg}rect"))
            if "data-mean" in a
        }
        assert bars == {(r["kind"], r["category"]): r["mean"] for r in rows(rep / "mrr_phash.csv", population="responsive") if r["category"] not in ROLLUPS}
        assert 'stroke="#1a9850"' in (rep / "precision_phash.svg").read_text()  # natural lines are green
    finally:
        p.close()


def test_report_is_deterministic(tmp_path):
    p = run_study(tmp_path)
    try:
        first = {f.name: f.read_bytes() for f in p.store.report_dir.iterdir()}
        render_report(p.store, p.corpus, ["phash", "vishash"], include_fixture=True)
        second = {f.name: f.read_bytes() for f in p.store.report_dir.iterdir()}
        assert first == second
    finally:
        p.close()


def test_coverage_zero_result_engine_column(tmp_path):
    p = run_study(tmp_path, methods=("phash",))
    try:
        # a second engine that answered every query with nothing
        subs = p.store.submissions.read_all()
        extra = [{**s, "engine": "bing", "status": "no_results", "count": 0} for s in subs if s["engine"] == "fixture"]
        p.store.submissions.extend(extra)
        bundle = render_report(p.store, p.corpus, ["phash"], include_fixture=True)
        cov = rows(p.store.report_dir / "coverage_similar_to.csv")
        assert all(r["bing"] == "0" for r in cov)
        assert {r["category"]: r["fixture"] for r in cov} == {"diagram": "4", "schematic": "4", "photo": "4", "photograph": "4", "total": "16", "unique": "16"}
        assert bundle.coverage["pages_with"]["unique"]["queries"] == 20
        # bing has no responsive queries, so only its "all" rows exist, all zero
        bing = rows(p.store.report_dir / "mrr_phash.csv", engine="bing")
        assert {r["population"] for r in bing} == {"all"} and all(float(r["mean"]) == 0.0 for r in bing)
    finally:
        p.close()


def test_fixture_engine_excluded_unless_requested(tmp_path):
    p = run_study(tmp_path, methods=("phash",))
    try:
        bundle = render_report(p.store, p.corpus, ["phash"], out_dir=tmp_path / "published")
        assert bundle.provenance["engines"] == []
        assert not (tmp_path / "published" / "mrr_phash.csv").exists()
        assert any("phash" in n for n in bundle.notices)
        assert read_csv(tmp_path / "published" / "submissions.csv") == []
    finally:
        p.close()


def test_missing_method_omitted_with_notice(tmp_path):
    p = run_study(tmp_path, methods=("phash",))
    try:
        bundle = render_report(p.store, p.corpus, ["phash", "vishash"], include_fixture=True, out_dir=tmp_path / "out")
        assert any("vishash" in n for n in bundle.notices)
        assert not (tmp_path / "out" / "mrr_vishash.csv").exists()
        assert (tmp_path / "out" / "mrr_phash.csv").exists()
    finally:
        p.close()


def test_gap_statistic(tmp_path):
    # natural: all at rank 1; abstract: one at rank 1, one at rank 4, one missing
    plan = [("photo", 1), ("photograph", 1), ("diagram", 1), ("diagram", 4), ("schematic", None)]
    p = run_study(tmp_path, plan, methods=("phash",))
    try:
        (g,) = rows(p.store.report_dir / "gaps_phash.csv", kind="similar_to", population="all", metric="retrievability")
        # abstract r@c = 1/3 for c < 4 and 2/3 after; natural is 1 throughout
        assert int(g["cutoff"]) == 1
        assert float(g["gap"]) == pytest.approx(2 / 3, abs=1e-15)
        (g,) = rows(p.store.report_dir / "gaps_phash.csv", kind="similar_to", population="responsive", metric="retrievability")
        assert float(g["gap"]) == pytest.approx(0.5, abs=1e-15)
    finally:
        p.close()


def test_failure_rates_reported(tmp_path):
    plan = [("photo", 1), ("diagram", 2)]
    p = run_study(tmp_path, plan, methods=("phash",), dead=[(0, 5), (1, 7)])
    try:
        (r,) = rows(p.store.report_dir / "failures.csv", engine="all", failure="DownloadFailed")
        # each dead thumbnail appears in both result kinds
        assert (r["count"], r["judgments"]) == ("4", "40")
        assert float(r["percent"]) == 10.0
    finally:
        p.close()


def test_groups_constant():
    assert GROUPS == ("diagram", "schematic", "photo", "photograph", "abstract", "natural", "all")
