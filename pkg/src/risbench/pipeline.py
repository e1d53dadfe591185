"""Configuration and stage orchestration: acquire -> submit -> judge -> report.

Configuration is YAML. Path resolution order: an explicit path, then the
``RISBENCH_CONFIG`` environment variable, then built-in defaults. Unknown
keys are rejected so typos do not silently fall back to defaults.

Example::

    runs_dir: runs
    corpus_dir: corpus
    acquire:
      terms: [diagram, schematic, photo, photograph]
      per_term: 100
      width: 640
    engines:
      enabled: [baidu, bing, google, yandex]
      delay: 5.0
      upload_limits: {bing: 1048576}
    judge:
      methods: [phash, vishash]
      phash_bits: 5
      vishash_distance: 0.3
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import yaml

from risbench.corpus import COMMONS_API, DEFAULT_TERMS, Category, Corpus, MediaRepository, acquire
from risbench.engines.base import LIVE_ENGINES, EngineAdapter, EngineId
from risbench.engines.fixture import FixtureEngine
from risbench.engines.live import ADAPTERS
from risbench.engines.runner import FAILED, SubmitSummary, submit_corpus
from risbench.errors import ChecksumMismatch, ConfigError, FixtureError
from risbench.hashcore import DistanceThreshold
from risbench.judge import JudgeSummary, Method, judge_run
from risbench.report import ReportBundle, render_report
from risbench.store import RunStore

log = logging.getLogger(__name__)

CONFIG_ENV = "RISBENCH_CONFIG"

DEFAULTS: dict = {
    "runs_dir": "runs",
    "corpus_dir": "corpus",
    "acquire": {
        "api_url": COMMONS_API,
        "terms": list(DEFAULT_TERMS),
        "per_term": 100,
        "width": 640,
        "parallelism": 4,
        "attempts": 3,
    },
    "engines": {
        "enabled": [e.value for e in LIVE_ENGINES],
        "endpoints": {},
        "upload_limits": {},
        "delay": 5.0,
        "jitter": 1.0,
        "attempts": 3,
        "backoff": 30.0,
        "max_pages": 10,
        "timeout": 60.0,
        "fixture_dir": None,
    },
    "judge": {
        "methods": [m.value for m in Method],
        "phash_bits": 5,
        "vishash_distance": 0.3,
        "parallelism": 8,
        "attempts": 3,
    },
    "report": {"include_fixture": False},
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key not in ("endpoints", "upload_limits"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            _check_type(base[key], value, f"{where}{key}")
            out[key] = value
    return out


def _check_type(default, value, name: str) -> None:
    # the defaults double as the schema; a None default accepts anything
    if default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{name} has the wrong type: {value!r}")


@dataclass
class Config:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: Optional[str] = None

    def __getitem__(self, key):
        return self.data[key]

    @property
    def thresholds(self) -> DistanceThreshold:
        return DistanceThreshold(self["judge"]["phash_bits"], self["judge"]["vishash_distance"])

    @property
    def methods(self) -> list[str]:
        return [Method(m).value for m in self["judge"]["methods"]]

    @property
    def engines(self) -> list[str]:
        return list(self["engines"]["enabled"])

    @property
    def fixture_mode(self) -> bool:
        return bool(self["engines"]["fixture_dir"])

    def engine_digest(self) -> str:
        text = json.dumps(self["engines"], sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, **sections) -> "Config":
        """Copy with ``section={key: value}`` overrides; ``None`` values are ignored."""
        data = copy.deepcopy(self.data)
        for section, values in sections.items():
            if section not in data:
                raise ConfigError(f"unknown config key {section!r}")
            if isinstance(values, dict):
                data[section].update({k: v for k, v in values.items() if v is not None})
            elif values is not None:
                data[section] = values
        cfg = Config(data, self.source)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        d = self.data
        try:
            for t in d["acquire"]["terms"]:
                Category(t)
            for e in d["engines"]["enabled"]:
                EngineId(e)
            for m in d["judge"]["methods"]:
                Method(m)
            self.thresholds
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("per_term", "width", "parallelism", "attempts"):
            if int(d["acquire"][name]) < 1:
                raise ConfigError(f"acquire.{name} must be >= 1")
        if d["engines"]["delay"] < 0 or d["engines"]["jitter"] < 0:
            raise ConfigError("engines.delay and engines.jitter must be non-negative")
        for e, limit in d["engines"]["upload_limits"].items():
            if e not in {x.value for x in EngineId} or not isinstance(limit, int) or limit <= 0:
                raise ConfigError(f"engines.upload_limits.{e} must be a positive byte count for a known engine")
        if EngineId.FIXTURE.value in d["engines"]["enabled"] and not d["engines"]["fixture_dir"]:
            raise ConfigError("the fixture engine needs engines.fixture_dir")


def load_config(path: Optional[str | Path] = None) -> Config:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        cfg = Config()
        cfg.validate()
        return cfg
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = Config(_merge(DEFAULTS, raw), str(path))
    base = Path(path).parent
    for key in ("runs_dir", "corpus_dir"):
        cfg.data[key] = str(base / cfg.data[key])
    if cfg.data["engines"]["fixture_dir"]:
        cfg.data["engines"]["fixture_dir"] = str(base / cfg.data["engines"]["fixture_dir"])
    cfg.validate()
    return cfg


def build_adapters(cfg: Config, sleep: Callable[[float], None] = time.sleep) -> dict[str, EngineAdapter]:
    e = cfg["engines"]
    common = dict(delay=e["delay"], jitter=e["jitter"], max_pages=e["max_pages"], timeout=e["timeout"], sleep=sleep)
    out: dict[str, EngineAdapter] = {}
    for name in cfg.engines:
        limit = e["upload_limits"].get(name)
        if name == EngineId.FIXTURE.value:
            try:
                out[name] = FixtureEngine(e["fixture_dir"], max_upload_bytes=limit, **{**common, "delay": 0.0, "jitter": 0.0})
            except FixtureError as exc:
                raise ConfigError(str(exc)) from exc
            continue
        cls = ADAPTERS[EngineId(name)]
        url = e["endpoints"].get(name)
        out[name] = cls(url, max_upload_bytes=limit, **common) if url else cls(max_upload_bytes=limit, **common)
    return out


@dataclass
class StageResult:
    stage: str
    ran: bool
    detail: object = None


@dataclass
class PipelineResult:
    stages: list = field(default_factory=list)
    partial: bool = False

    @property
    def exit_code(self) -> int:
        return 2 if self.partial else 0


class Pipeline:
    """One run of the protocol. Each stage is skipped when the manifest says it is done."""

    def __init__(
        self,
        cfg: Config,
        run_id: str,
        sleep: Callable[[float], None] = time.sleep,
        repo: Optional[MediaRepository] = None,
        adapters: Optional[dict[str, EngineAdapter]] = None,
    ):
        self.cfg = cfg
        self.run_id = run_id
        self.sleep = sleep
        self._repo = repo
        self._adapters = adapters
        self.store = RunStore(cfg["runs_dir"], run_id)
        m = self.store.manifest
        self.corpus = Corpus(m.corpus_dir or cfg["corpus_dir"])

    def close(self) -> None:
        self.store.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- gating --

    def _check_corpus(self) -> None:
        """A run is bound to the corpus it started with; a changed corpus needs a new run."""
        m = self.store.manifest
        if m.corpus_digest and self.corpus.snapshot.path.exists() and self.corpus.digest() != m.corpus_digest:
            raise ChecksumMismatch(f"corpus {self.corpus.dir} changed since run {self.run_id} recorded it")

    def _done(self, stage: str) -> bool:
        if not self.store.is_complete(stage):
            return False
        if stage == "acquire":
            return self.corpus.snapshot.path.exists() and self.corpus.digest() == self.store.manifest.corpus_digest
        return True

    # -- stages --

    def acquire(self, force: bool = False) -> StageResult:
        if self._done("acquire") and not force:
            return StageResult("acquire", False)
        self._check_corpus()
        a = self.cfg["acquire"]
        if self.corpus.snapshot.path.exists() and not force:
            log.info("using existing corpus at %s", self.corpus.dir)
        else:
            repo = self._repo or MediaRepository(a["api_url"], attempts=a["attempts"], sleep=self.sleep)
            self.corpus = acquire(self.corpus.dir, a["terms"], a["per_term"], a["width"], repo, a["parallelism"], a["attempts"], self.sleep)
            self._check_corpus()
        m = self.store.manifest
        m.corpus_digest = self.corpus.digest()
        m.corpus_dir = str(self.corpus.dir.resolve())
        self.store.mark_complete("acquire", [])
        return StageResult("acquire", True, self.corpus.category_counts())

    def submit(self, force: bool = False) -> StageResult:
        self._check_corpus()
        digest = self.cfg.engine_digest()
        m = self.store.manifest
        if m.engine_config_digest and m.engine_config_digest != digest:
            log.info("engine configuration changed; submitting again for new or failed queries")
            self.store.invalidate_from("submit")
        if self._done("submit") and not force:
            return StageResult("submit", False, self._failed_engines())
        adapters = self._adapters or build_adapters(self.cfg, self.sleep)
        e = self.cfg["engines"]
        self.store.mark("submit", "pending")
        summary: SubmitSummary = submit_corpus(self.store, self.corpus, adapters, e["attempts"], e["backoff"], self.sleep)
        m.engine_config_digest = digest
        self.store.invalidate_from("judge")
        self.store.mark_complete("submit", ["sers.log", "submissions.log"])
        return StageResult("submit", True, summary)

    def _failed_engines(self) -> list[str]:
        return sorted({s["engine"] for s in self.store.submissions if s["status"] == FAILED})

    def judge(self, force: bool = False) -> StageResult:
        self._check_corpus()
        t = self.cfg.thresholds
        want = {"phash_bits": t.phash_bits, "vishash_distance": t.vishash_distance}
        m = self.store.manifest
        methods_path = self.store.dir / "judge_stats.json"
        prior_methods = json.loads(methods_path.read_text()).get("methods") if methods_path.exists() else None
        if m.thresholds != want or prior_methods != sorted(self.cfg.methods):
            self.store.invalidate_from("judge")
        if self._done("judge") and not force:
            return StageResult("judge", False)
        if not self.store.is_complete("submit"):
            raise ChecksumMismatch("judge needs a completed submit stage")
        j = self.cfg["judge"]
        summary: JudgeSummary = judge_run(self.store, self.corpus, self.cfg.methods, t, j["parallelism"], attempts=j["attempts"], sleep=self.sleep)
        m.thresholds = want
        self.store.invalidate_from("report")
        self.store.mark_complete("judge", ["judgments.log", "judge_stats.json"])
        return StageResult("judge", True, summary)

    def report(self, force: bool = False) -> StageResult:
        self._check_corpus()
        if self._done("report") and not force:
            return StageResult("report", False)
        self.store.verify("judge")
        include = self.cfg["report"]["include_fixture"] or self.cfg.fixture_mode
        bundle: ReportBundle = render_report(self.store, self.corpus, self.cfg.methods, include_fixture=include)
        self.store.mark_complete("report", [p.relative_to(self.store.dir) for p in bundle.files])
        return StageResult("report", True, bundle)

    def run(self) -> PipelineResult:
        result = PipelineResult()
        for stage in (self.acquire, self.submit, self.judge, self.report):
            result.stages.append(stage())
        result.partial = bool(self._failed_engines())
        return result
