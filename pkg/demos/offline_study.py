"""
A complete study without the network
====================================

Builds a small corpus, plants results in the fixture engine, then runs the
acquire, submit, judge and report stages exactly as the ``risbench pipeline``
command does. Every thumbnail is a local file, so this runs offline.

Run with ``python demos/offline_study.py [workdir]``.
"""

import sys
import tempfile
from pathlib import Path

from risbench.fixtures import build_fixture_study
from risbench.pipeline import Config, Pipeline
from risbench.report import read_csv

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="risbench-demo-"))

# five queries per category; the query itself is planted at rank 1, 1, 1, 3 or not at all
corpus, fixture_dir = build_fixture_study(work)
print("corpus:", corpus.category_counts())

cfg = Config().with_overrides(
    runs_dir=str(work / "runs"),
    corpus_dir=str(corpus.dir),
    engines={"enabled": ["fixture"], "fixture_dir": str(fixture_dir)},
)

with Pipeline(cfg, "demo") as pipe:
    result = pipe.run()
    report = pipe.store.report_dir

print("stages:", {s.stage: s.ran for s in result.stages})
print("report files in", report)

# the "all" population keeps queries the engine answered with nothing (they score 0)
for row in read_csv(report / "retrievability_phash.csv"):
    if row["category"] == "all" and row["population"] == "all" and row["c"] in ("1", "3", "10"):
        print(f"  {row['kind']:<11} r@{row['c']:<3} {float(row['mean']):.3f}")
for row in read_csv(report / "mrr_phash.csv"):
    if row["category"] in ("abstract", "natural") and row["population"] == "responsive":
        print(f"  {row['kind']:<11} MRR {row['category']:<9} {float(row['mean']):.3f} (n={row['n']})")

# running again is a no-op: every stage is already complete in the manifest
with Pipeline(cfg, "demo") as pipe:
    print("second run:", {s.stage: s.ran for s in pipe.run().stages})
