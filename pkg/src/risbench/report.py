"""Report tables and SVG figures computed from a judged run.

Every number drawn in a figure is carried on its SVG element as ``data-*``
attributes using the same text as the CSV cell, so plots can be checked
against tables mechanically.

Two query populations are reported for each series:

``responsive``
    queries that returned at least one SER of that kind (used in the plots);
``all``
    every query the engine answered, with empty rankings scoring zero.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence
from xml.sax.saxutils import quoteattr

from risbench.corpus import Category, Corpus, ImageClass
from risbench.engines.base import EngineId, ResultKind
from risbench.judge import Method
from risbench.metrics import CUTOFFS, JudgedRanking, Stat, summarize
from risbench.store import RunStore, atomic_write_bytes

log = logging.getLogger(__name__)

CATEGORIES = tuple(c.value for c in Category)
ROLLUPS = {
    ImageClass.ABSTRACT.value: tuple(c.value for c in Category if c.image_class == ImageClass.ABSTRACT),
    ImageClass.NATURAL.value: tuple(c.value for c in Category if c.image_class == ImageClass.NATURAL),
    "all": CATEGORIES,
}
GROUPS = CATEGORIES + tuple(ROLLUPS)
POPULATIONS = ("responsive", "all")
ANSWERED = ("ok", "no_results")  # submission statuses where the engine actually answered

COLOURS = {
    "photo": "#1a9850",
    "photograph": "#66bd63",
    "diagram": "#2166ac",
    "schematic": "#67a9cf",
    "natural": "#1a9850",
    "abstract": "#2166ac",
}


def fmt(x) -> str:
    """CSV/SVG text for a number: ``repr`` round-trips floats exactly."""
    return repr(float(x)) if isinstance(x, float) else str(x)


@dataclass
class ReportBundle:
    coverage: dict = field(default_factory=dict)  # kind -> {category|total|unique -> {engine -> count}}
    series: dict = field(default_factory=dict)  # method -> {(engine, kind, group, population) -> MetricSeries}
    files: list = field(default_factory=list)
    notices: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


# -- inputs ----------------------------------------------------------------


class RunView:
    """Read-only projections of a run's logs used by the report."""

    def __init__(self, store: RunStore, corpus: Corpus, engines: Optional[Sequence[str]] = None, include_fixture: bool = False):
        self.store = store
        self.corpus = corpus
        self.images = corpus.by_id()
        self.sers = store.sers.read_all()
        self.submissions = store.submissions.read_all()
        found = {d["engine"] for d in self.sers} | {s["engine"] for s in self.submissions}
        if engines is not None:
            found = set(engines)
        if not include_fixture:
            found.discard(EngineId.FIXTURE.value)
        self.engines = sorted(found)
        self.kinds = [k.value for k in ResultKind]
        self.serp_counts: dict[tuple[str, str, str], int] = defaultdict(int)
        for d in self.sers:
            self.serp_counts[(d["query_id"], d["engine"], d["kind"])] += 1

    def answered(self, engine: str, kind: str) -> list[str]:
        """Query ids the engine answered for ``kind`` (all corpus queries if no submission log)."""
        subs = [s for s in self.submissions if s["engine"] == engine and s["kind"] == kind]
        if not subs and not any(s["engine"] == engine for s in self.submissions):
            return sorted(self.images)
        return sorted({s["query_id"] for s in subs if s["status"] in ANSWERED})

    def responsive(self, engine: str, kind: str) -> list[str]:
        return sorted({q for (q, e, k), n in self.serp_counts.items() if e == engine and k == kind and n > 0})

    def categories(self, query_id: str) -> tuple[str, ...]:
        return self.images[query_id].categories


def coverage_table(view: RunView, kind: str) -> dict:
    """Queries with at least one SER of ``kind``, per category and engine.

    Rows are the categories, ``total`` (sum of the category rows) and
    ``unique`` (distinct query images). Column ``queries`` holds corpus counts.
    """
    table = {row: {} for row in (*CATEGORIES, "total", "unique")}
    for engine in view.engines:
        hits = view.responsive(engine, kind)
        for cat in CATEGORIES:
            table[cat][engine] = sum(1 for q in hits if cat in view.categories(q))
        table["total"][engine] = sum(table[c][engine] for c in CATEGORIES)
        table["unique"][engine] = len(hits)
    for cat in CATEGORIES:
        table[cat]["queries"] = sum(1 for img in view.images.values() if cat in img.categories)
    table["total"]["queries"] = sum(table[c]["queries"] for c in CATEGORIES)
    table["unique"]["queries"] = len(view.images)
    return table


def rankings_by_query(judgments: Iterable[dict], method: str) -> dict[tuple[str, str, str], JudgedRanking]:
    rel: dict = defaultdict(dict)
    for j in judgments:
        if j["method"] == method:
            rel[(j["query_id"], j["engine"], j["kind"])][j["position"]] = j["relevant"]
    return {key: JudgedRanking(tuple(pos[p] for p in sorted(pos))) for key, pos in rel.items()}


def metric_series(view: RunView, judgments: list[dict], method: str) -> dict:
    """(engine, kind, group, population) -> MetricSeries; empty groups are absent."""
    ranks = rankings_by_query(judgments, method)
    out = {}
    for engine in view.engines:
        for kind in view.kinds:
            populations = {"responsive": view.responsive(engine, kind), "all": view.answered(engine, kind)}
            for pop, queries in populations.items():
                per_cat = {
                    cat: [ranks.get((q, engine, kind), JudgedRanking()) for q in queries if cat in view.categories(q)]
                    for cat in CATEGORIES
                }
                for group in GROUPS:
                    members = ROLLUPS.get(group, (group,))
                    pooled = [r for cat in members for r in per_cat[cat]]
                    if pooled:
                        out[(engine, kind, group, pop)] = summarize((engine, kind, group, pop), pooled, CUTOFFS)
    return out


def class_gap(series: dict, engine: str, kind: str, population: str, metric: str) -> Optional[dict]:
    """Largest natural-minus-abstract difference of class means over the cutoffs."""
    nat = series.get((engine, kind, "natural", population))
    abs_ = series.get((engine, kind, "abstract", population))
    if nat is None or abs_ is None:
        return None
    attr = "precision_at_k" if metric == "precision" else "retrievability_at_c"
    best = None
    for c in CUTOFFS:
        n, a = getattr(nat, attr)[c].mean, getattr(abs_, attr)[c].mean
        if best is None or n - a > best["gap"]:
            best = {"cutoff": c, "natural": n, "abstract": a, "gap": n - a}
    return best


# -- CSV -----------------------------------------------------------------


def _csv(rows: list[list]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([fmt(x) for x in r])
    return buf.getvalue().encode()


def coverage_csv(table: dict, engines: Sequence[str]) -> bytes:
    rows = [["category", *engines, "queries"]]
    for row, cells in table.items():
        rows.append([row, *(cells[e] for e in engines), cells["queries"]])
    return _csv(rows)


def _ordered(series: dict):
    order = {g: i for i, g in enumerate(GROUPS)}
    return sorted(series.items(), key=lambda kv: (kv[0][0], kv[0][1], order[kv[0][2]], POPULATIONS.index(kv[0][3])))


def curve_csv(series: dict, attr: str, axis: str) -> bytes:
    rows = [["engine", "kind", "category", "population", axis, "mean", "stderr", "n"]]
    for (engine, kind, group, pop), s in _ordered(series):
        for x, st in getattr(s, attr).items():
            rows.append([engine, kind, group, pop, x, st.mean, st.se, st.n])
    return _csv(rows)


def mrr_csv(series: dict) -> bytes:
    rows = [["engine", "kind", "category", "population", "mean", "stderr", "n"]]
    for (engine, kind, group, pop), s in _ordered(series):
        rows.append([engine, kind, group, pop, s.mrr.mean, s.mrr.se, s.mrr.n])
    return _csv(rows)


def gaps_csv(series: dict, engines: Sequence[str], kinds: Sequence[str]) -> bytes:
    rows = [["engine", "kind", "population", "metric", "cutoff", "natural", "abstract", "gap"]]
    for engine in engines:
        for kind in kinds:
            for pop in POPULATIONS:
                for metric in ("retrievability", "precision"):
                    g = class_gap(series, engine, kind, pop, metric)
                    if g is not None:
                        rows.append([engine, kind, pop, metric, g["cutoff"], g["natural"], g["abstract"], g["gap"]])
    return _csv(rows)


def failures_csv(judgments: list[dict], engines: Sequence[str]) -> bytes:
    """Judgment failures per method and engine, as counts and percentages."""
    counts: dict = defaultdict(int)
    totals: dict = defaultdict(int)
    for j in judgments:
        if j["engine"] not in engines:
            continue
        for eng in (j["engine"], "all"):
            totals[(j["method"], eng)] += 1
            if j["failure"]:
                counts[(j["method"], eng, j["failure"])] += 1
    rows = [["method", "engine", "failure", "count", "judgments", "percent"]]
    for method, eng in sorted(totals, key=lambda k: (k[0], k[1] == "all", k[1])):
        total = totals[(method, eng)]
        for failure in ("DownloadFailed", "DecodeFailed", "HashFailed"):
            n = counts[(method, eng, failure)]
            rows.append([method, eng, failure, n, total, 100.0 * n / total])
    return _csv(rows)


# -- SVG -------------------------------------------------------------------


class _Svg:
    def __init__(self, width: int, height: int, title: str):
        self.w, self.h = width, height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
            f"<title>{_esc(title)}</title>",
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]

    def add(self, tag: str, text: str = "", **attrs) -> None:
        a = " ".join(f"{k.rstrip('_').replace('_', '-')}={quoteattr(str(v))}" for k, v in attrs.items())
        self.parts.append(f"<{tag} {a}>{_esc(text)}</{tag}>" if text else f"<{tag} {a}/>")

    def raw(self, s: str) -> None:
        self.parts.append(s)

    def bytes(self) -> bytes:
        return ("\n".join(self.parts + ["</svg>"]) + "\n").encode()


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


PANEL_W, PANEL_H, MARGIN = 260, 190, 40


def _panel_origin(i: int, cols: int) -> tuple[int, int]:
    return MARGIN + (i % cols) * (PANEL_W + MARGIN), MARGIN + 20 + (i // cols) * (PANEL_H + MARGIN + 20)


def _legend(svg: _Svg, y: int) -> None:
    x = MARGIN
    for cat in CATEGORIES:
        dash = "4,3" if cat in ("photograph", "schematic") else "none"
        svg.add("line", x1=x, y1=y, x2=x + 24, y2=y, stroke=COLOURS[cat], stroke_width=2, stroke_dasharray=dash)
        svg.add("text", cat, x=x + 28, y=y + 4)
        x += 110


def curve_svg(series: dict, engines: Sequence[str], kinds: Sequence[str], attr: str, label: str, title: str) -> bytes:
    """Grid of panels, one per (engine, kind); one line per category with SE bars."""
    panels = [(e, k) for e in engines for k in kinds]
    cols = max(1, len(kinds))
    rows = max(1, -(-len(panels) // cols))
    svg = _Svg(MARGIN + cols * (PANEL_W + MARGIN), MARGIN + 40 + rows * (PANEL_H + MARGIN + 20), title)
    svg.add("text", title, x=MARGIN, y=20, font_size=14)
    for i, (engine, kind) in enumerate(panels):
        ox, oy = _panel_origin(i, cols)
        svg.add("text", f"{engine} / {kind}", x=ox, y=oy - 6)
        svg.add("rect", x=ox, y=oy, width=PANEL_W, height=PANEL_H, fill="none", stroke="#999")
        for tick in (0.0, 0.5, 1.0):
            ty = oy + PANEL_H * (1 - tick)
            svg.add("text", f"{tick:.1f}", x=ox - 24, y=ty + 4)
        for c in (1, 5, 10):
            svg.add("text", str(c), x=ox + (c - 1) / 9 * PANEL_W - 3, y=oy + PANEL_H + 14)
        svg.add("text", label, x=ox + PANEL_W / 2 - 4, y=oy + PANEL_H + 28)
        for cat in CATEGORIES:
            s = series.get((engine, kind, cat, "responsive"))
            if s is None:
                continue
            stats: dict[int, Stat] = getattr(s, attr)
            pts = []
            for x, st in stats.items():
                px, py = ox + (x - 1) / 9 * PANEL_W, oy + PANEL_H * (1 - min(max(st.mean, 0.0), 1.0))
                pts.append(f"{px:.2f},{py:.2f}")
            dash = "4,3" if cat in ("photograph", "schematic") else "none"
            svg.add("polyline", points=" ".join(pts), fill="none", stroke=COLOURS[cat], stroke_width=1.5, stroke_dasharray=dash)
            for x, st in stats.items():
                px = ox + (x - 1) / 9 * PANEL_W
                lo, hi = (oy + PANEL_H * (1 - min(max(v, 0.0), 1.0)) for v in (st.mean - st.se, st.mean + st.se))
                svg.add("line", x1=f"{px:.2f}", y1=f"{lo:.2f}", x2=f"{px:.2f}", y2=f"{hi:.2f}", stroke=COLOURS[cat], stroke_width=1)
                svg.add(
                    "circle",
                    cx=f"{px:.2f}",
                    cy=f"{oy + PANEL_H * (1 - min(max(st.mean, 0.0), 1.0)):.2f}",
                    r=2.5,
                    fill=COLOURS[cat],
                    data_engine=engine,
                    data_kind=kind,
                    data_category=cat,
                    data_x=x,
                    data_mean=fmt(st.mean),
                    data_stderr=fmt(st.se),
                    data_n=st.n,
                )
    _legend(svg, svg.h - 16)
    return svg.bytes()


def mrr_svg(series: dict, engines: Sequence[str], kinds: Sequence[str], title: str) -> bytes:
    """One bar group per (engine, kind), one bar per category, with SE whiskers."""
    panels = [(e, k) for e in engines for k in kinds]
    cols = max(1, len(kinds))
    rows = max(1, -(-len(panels) // cols))
    svg = _Svg(MARGIN + cols * (PANEL_W + MARGIN), MARGIN + 40 + rows * (PANEL_H + MARGIN + 20), title)
    svg.add("text", title, x=MARGIN, y=20, font_size=14)
    bar_w = PANEL_W / (len(CATEGORIES) + 1)
    for i, (engine, kind) in enumerate(panels):
        ox, oy = _panel_origin(i, cols)
        svg.add("text", f"{engine} / {kind}", x=ox, y=oy - 6)
        svg.add("rect", x=ox, y=oy, width=PANEL_W, height=PANEL_H, fill="none", stroke="#999")
        for j, cat in enumerate(CATEGORIES):
            s = series.get((engine, kind, cat, "responsive"))
            if s is None:
                continue
            st = s.mrr
            h = PANEL_H * min(max(st.mean, 0.0), 1.0)
            x = ox + bar_w * (j + 0.5)
            svg.add(
                "rect",
                x=f"{x:.2f}",
                y=f"{oy + PANEL_H - h:.2f}",
                width=f"{bar_w * 0.8:.2f}",
                height=f"{h:.2f}",
                fill=COLOURS[cat],
                data_engine=engine,
                data_kind=kind,
                data_category=cat,
                data_mean=fmt(st.mean),
                data_stderr=fmt(st.se),
                data_n=st.n,
            )
            mid = x + bar_w * 0.4
            lo, hi = (oy + PANEL_H * (1 - min(max(v, 0.0), 1.0)) for v in (st.mean - st.se, st.mean + st.se))
            svg.add("line", x1=f"{mid:.2f}", y1=f"{lo:.2f}", x2=f"{mid:.2f}", y2=f"{hi:.2f}", stroke="black", stroke_width=1)
    _legend(svg, svg.h - 16)
    return svg.bytes()


# -- entry point -------------------------------------------------------------


def render_report(
    store: RunStore,
    corpus: Corpus,
    methods: Optional[Sequence[str]] = None,
    engines: Optional[Sequence[str]] = None,
    include_fixture: bool = False,
    out_dir: Optional[Path] = None,
) -> ReportBundle:
    """Write the report directory for a judged run and return what was written.

    Output depends only on the run's logs, the corpus snapshot and the
    arguments, so identical inputs give byte-identical files.
    """
    out = Path(out_dir or store.report_dir)
    view = RunView(store, corpus, engines, include_fixture)
    judgments = [j for j in store.judgments.read_all() if j["engine"] in view.engines]
    logged = sorted({j["method"] for j in judgments})
    wanted = [Method(m).value for m in methods] if methods else logged
    bundle = ReportBundle()

    def write(name: str, data: bytes) -> None:
        atomic_write_bytes(out / name, data)
        bundle.files.append(out / name)

    for kind in view.kinds:
        bundle.coverage[kind] = coverage_table(view, kind)
        write(f"coverage_{kind}.csv", coverage_csv(bundle.coverage[kind], view.engines))

    for method in wanted:
        if method not in logged:
            msg = f"method {method} has no judgments in this run; omitted"
            log.warning(msg)
            bundle.notices.append(msg)
            continue
        series = metric_series(view, judgments, method)
        bundle.series[method] = series
        missing = [(e, k, g, p) for e in view.engines for k in view.kinds for g in GROUPS for p in POPULATIONS if (e, k, g, p) not in series]
        for key in missing:
            bundle.notices.append(f"{method}: no queries for {'/'.join(key)}")
        write(f"precision_{method}.csv", curve_csv(series, "precision_at_k", "k"))
        write(f"retrievability_{method}.csv", curve_csv(series, "retrievability_at_c", "c"))
        write(f"mrr_{method}.csv", mrr_csv(series))
        write(f"gaps_{method}.csv", gaps_csv(series, view.engines, view.kinds))
        write(f"precision_{method}.svg", curve_svg(series, view.engines, view.kinds, "precision_at_k", "k", f"Precision at k ({method})"))
        write(
            f"retrievability_{method}.svg",
            curve_svg(series, view.engines, view.kinds, "retrievability_at_c", "c", f"Retrievability at c ({method})"),
        )
        write(f"mrr_{method}.svg", mrr_svg(series, view.engines, view.kinds, f"Mean reciprocal rank ({method})"))

    write("failures.csv", failures_csv(judgments, view.engines))
    write("submissions.csv", submissions_csv(view))
    m = store.manifest
    bundle.provenance = {
        "run_id": m.run_id,
        "created_at": m.created_at,
        "corpus_digest": m.corpus_digest,
        "engine_config_digest": m.engine_config_digest,
        "thresholds": m.thresholds,
        "stage_outputs": {s: v for s, v in sorted(m.stage_outputs.items()) if s != "report"},
        "engines": view.engines,
        "methods": [mm for mm in wanted if mm in logged],
        "cutoffs": list(CUTOFFS),
        "populations": list(POPULATIONS),
        "notices": bundle.notices,
    }
    write("provenance.json", (json.dumps(bundle.provenance, indent=2, sort_keys=True) + "\n").encode())
    return bundle


def submissions_csv(view: RunView) -> bytes:
    counts: dict = defaultdict(int)
    for s in view.submissions:
        if s["engine"] in view.engines:
            counts[(s["engine"], s["kind"], s["status"])] += 1
    rows = [["engine", "kind", "status", "queries"]]
    rows += [[e, k, st, n] for (e, k, st), n in sorted(counts.items())]
    return _csv(rows)


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


__all__ = [
    "ReportBundle",
    "RunView",
    "class_gap",
    "coverage_table",
    "metric_series",
    "read_csv",
    "render_report",
]
