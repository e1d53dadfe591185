"""Run-scoped persistence.

A run lives in ``runs/<id>/``::

    manifest.json       RunManifest (stage status + output checksums)
    sers.log            one SearchResultRecord per line
    submissions.log     one submission outcome per (query, engine, kind)
    judgments.log       one Judgment per (record, method)
    judge_stats.json    thresholds, methods and failure counts of the last judge
    raw/ thumbs/ report/

Every ``*.log`` is JSON Lines whose first line is a header naming the schema
and its version. Appends are a single ``write(2)`` on an ``O_APPEND``
descriptor, so a crash can leave at most one partial trailing line; that line
is moved to ``<log>.quarantine`` the next time the log is opened.
"""

from __future__ import annotations

import contextlib
import dataclasses
import fcntl
import hashlib
import json
import logging
import os
import tempfile
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional

from risbench.errors import ChecksumMismatch, LockHeld, RisError

log = logging.getLogger(__name__)

LOG_VERSION = 1
STAGES = ("acquire", "submit", "judge", "report")


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dumps_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            os.fchmod(f.fileno(), 0o644)
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


class RecordLog:
    """Append-only JSON Lines file with a versioned schema header."""

    def __init__(self, path: Path | str, schema: str):
        self.path = Path(path)
        self.schema = schema
        self._lock = threading.Lock()

    @property
    def header(self) -> dict:
        return {"schema": self.schema, "version": LOG_VERSION}

    def _ensure_header(self) -> None:
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._write(dumps_line(self.header))

    def _write(self, text: str) -> None:
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, text.encode("utf-8"))
        finally:
            os.close(fd)

    def recover(self) -> Optional[bytes]:
        """Quarantine a partial trailing line; returns the removed bytes, if any."""
        if not self.path.exists():
            return None
        with open(self.path, "rb+") as f:
            data = f.read()
            if not data or data.endswith(b"\n"):
                return None
            cut = data.rfind(b"\n") + 1
            tail = data[cut:]
            with open(self.path.with_name(self.path.name + ".quarantine"), "ab") as q:
                q.write(tail + b"\n")
            f.truncate(cut)
        log.warning("quarantined %d trailing bytes from %s", len(tail), self.path)
        return tail

    def append(self, record: dict) -> None:
        with self._lock:
            self._ensure_header()
            self._write(dumps_line(record))

    def extend(self, records: Iterable[dict]) -> None:
        with self._lock:
            self._ensure_header()
            text = "".join(dumps_line(r) for r in records)
            if text:
                self._write(text)

    def rewrite(self, records: Iterable[dict]) -> None:
        """Atomically replace the whole log (used for compaction to canonical order)."""
        text = dumps_line(self.header) + "".join(dumps_line(r) for r in records)
        with self._lock:
            atomic_write_bytes(self.path, text.encode("utf-8"))

    def __iter__(self) -> Iterator[dict]:
        if not self.path.exists():
            return
        self.recover()
        with open(self.path, encoding="utf-8") as f:
            first = f.readline()
            if not first:
                return
            header = json.loads(first)
            if header.get("schema") != self.schema:
                raise RisError(f"{self.path}: expected schema {self.schema!r}, found {header.get('schema')!r}")
            if header.get("version", 0) > LOG_VERSION:
                raise RisError(f"{self.path}: log version {header['version']} is newer than supported")
            for line in f:
                if line.strip():
                    yield json.loads(line)

    def read_all(self) -> list[dict]:
        return list(self)


@dataclasses.dataclass
class RunManifest:
    run_id: str
    created_at: str = dataclasses.field(default_factory=utc_now)
    corpus_digest: str = ""
    corpus_dir: str = ""
    engine_config_digest: str = ""
    thresholds: dict = dataclasses.field(default_factory=lambda: {"phash_bits": 5, "vishash_distance": 0.3})
    stage_status: dict = dataclasses.field(default_factory=lambda: {s: "pending" for s in STAGES})
    stage_outputs: dict = dataclasses.field(default_factory=dict)
    version: int = LOG_VERSION

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


class RunStore:
    """Handle on one run directory.

    Writers hold an advisory lock for the lifetime of the handle; a second
    writer gets :class:`LockHeld`. Readers (``writable=False``) never lock.
    """

    def __init__(self, root: Path | str, run_id: str, writable: bool = True):
        self.run_id = run_id
        self.dir = Path(root) / run_id
        self.writable = writable
        self._lock_fd: Optional[int] = None
        if writable:
            self.dir.mkdir(parents=True, exist_ok=True)
            self._acquire_lock()
        elif not self.dir.is_dir():
            raise RisError(f"no such run: {self.dir}")
        if self.manifest_path.exists():
            self.manifest = RunManifest.from_json(self.manifest_path.read_text())
        else:
            self.manifest = RunManifest(run_id=run_id)
            if writable:
                self.save_manifest()
        self.sers = RecordLog(self.dir / "sers.log", "risbench/sers")
        self.submissions = RecordLog(self.dir / "submissions.log", "risbench/submissions")
        self.judgments = RecordLog(self.dir / "judgments.log", "risbench/judgments")

    # -- locking --

    def _acquire_lock(self) -> None:
        fd = os.open(self.dir / ".lock", os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(fd)
            raise LockHeld(f"run {self.run_id} is locked by another writer") from None
        self._lock_fd = fd

    def close(self) -> None:
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None

    def __enter__(self) -> "RunStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- layout --

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    @property
    def raw_dir(self) -> Path:
        return self.dir / "raw"

    @property
    def thumbs_dir(self) -> Path:
        return self.dir / "thumbs"

    @property
    def report_dir(self) -> Path:
        return self.dir / "report"

    def save_manifest(self) -> None:
        self._require_writer()
        atomic_write_bytes(self.manifest_path, self.manifest.to_json().encode("utf-8"))

    def _require_writer(self) -> None:
        if not self.writable:
            raise RisError("run opened read-only")

    # -- stage lifecycle --

    def status(self, stage: str) -> str:
        return self.manifest.stage_status.get(stage, "pending")

    def mark_complete(self, stage: str, outputs: Iterable[Path | str]) -> None:
        sums = {}
        for p in outputs:
            path = self.dir / p
            if not path.is_file():
                raise ChecksumMismatch(f"stage {stage}: declared output {p} does not exist")
            sums[str(Path(p))] = sha256_file(path)
        self.manifest.stage_outputs[stage] = dict(sorted(sums.items()))
        self.manifest.stage_status[stage] = "complete"
        self.save_manifest()

    def mark(self, stage: str, status: str) -> None:
        self.manifest.stage_status[stage] = status
        if status != "complete":
            self.manifest.stage_outputs.pop(stage, None)
        self.save_manifest()

    def invalidate_from(self, stage: str) -> None:
        """Reset ``stage`` and every later stage to pending."""
        for s in STAGES[STAGES.index(stage):]:
            self.manifest.stage_status[s] = "pending"
            self.manifest.stage_outputs.pop(s, None)
        self.save_manifest()

    def verify(self, stage: str) -> None:
        """Raise :class:`ChecksumMismatch` unless ``stage`` is complete with intact outputs."""
        if self.status(stage) != "complete":
            raise ChecksumMismatch(f"stage {stage} is not complete")
        for rel, expected in self.manifest.stage_outputs.get(stage, {}).items():
            path = self.dir / rel
            if not path.is_file():
                raise ChecksumMismatch(f"{rel} is missing")
            actual = sha256_file(path)
            if actual != expected:
                raise ChecksumMismatch(f"{rel}: sha256 {actual} != recorded {expected}")

    def is_complete(self, stage: str) -> bool:
        try:
            self.verify(stage)
        except ChecksumMismatch:
            return False
        return True


@contextlib.contextmanager
def open_run(root: Path | str, run_id: str, writable: bool = True) -> Iterator[RunStore]:
    store = RunStore(root, run_id, writable=writable)
    try:
        yield store
    finally:
        store.close()

