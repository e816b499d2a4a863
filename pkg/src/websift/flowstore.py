"""Embedded store for flow records plus content-addressed blob storage.

Layout under the store root:

    records.log     append-only JSONL, one full record version per line;
                    the latest line for a record id wins
    index/          sidecar acceleration data (ids.log, meta.json); always
                    reconstructible from records.log
    blobs/xx/yy/    blob files named by their SHA-1, two-level hex fan-out

One writer owns the store at a time (advisory file lock); readers open
with writable=False and skip the lock.  Bodies are deduplicated by
SHA-1 and referenced from records by digest, never inlined.
"""

from __future__ import annotations

import datetime as dt
import fcntl
import hashlib
import json
import os
import re
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentInfo
from .features import FeatureVector
from .labels import LabelSet
from .wire import HttpExchange

BLOB_CAP = 64 * 1024 * 1024
EMPTY_SHA1 = "da39a3ee5e6b4b0d3255bfef95601890afd80709"

_SHA1_RE = re.compile(r"^[0-9a-f]{40}$")
_EXTRA_KEY_RE = re.compile(r"^[a-z0-9_]+\.[A-Za-z0-9_.\-]+$")
_PATH_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*(\.[A-Za-z0-9_\-]+)*$")

QUERY_OPS = ("eq", "exists", "range", "prefix")


class StoreError(RuntimeError):
    pass


class StoreLockError(StoreError):
    pass


class BlobNotFoundError(KeyError):
    pass


class BlobCorruptError(StoreError):
    pass


class BlobTooLargeError(ValueError):
    pass


class RecordNotFoundError(KeyError):
    pass


class DanglingBlobError(ValueError):
    pass


class QueryError(ValueError):
    pass


@dataclass
class ContentBlob:
    sha1: str
    size: int
    data: bytes


@dataclass
class FlowRecord:
    """One captured exchange with labels, augmentation and features.

    exchange.body is never persisted here; the bytes live in the blob
    store under body_sha1 (raw) and decoded_sha1 (after contentprep).
    extra is an open map for heterogeneous fields; keys must carry a
    source prefix such as "wire." or "report.".
    """

    record_id: int = 0
    exchange: HttpExchange | None = None
    body_sha1: str | None = None
    decoded_sha1: str | None = None
    labels: LabelSet = field(default_factory=LabelSet)
    augment: AugmentInfo | None = None
    features: FeatureVector | None = None
    extra: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "record_id": self.record_id,
            "exchange": self.exchange.to_doc() if self.exchange else None,
            "body_sha1": self.body_sha1,
            "decoded_sha1": self.decoded_sha1,
            "labels": self.labels.to_doc(),
            "augment": self.augment.to_doc() if self.augment else None,
            "features": self.features.to_doc() if self.features else None,
            "extra": dict(self.extra),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FlowRecord":
        return cls(
            record_id=doc["record_id"],
            exchange=HttpExchange.from_doc(doc["exchange"]) if doc.get("exchange") else None,
            body_sha1=doc.get("body_sha1"),
            decoded_sha1=doc.get("decoded_sha1"),
            labels=LabelSet.from_doc(doc.get("labels") or {}),
            augment=AugmentInfo.from_doc(doc["augment"]) if doc.get("augment") else None,
            features=FeatureVector.from_doc(doc["features"]) if doc.get("features") else None,
            extra=dict(doc.get("extra") or {}),
        )


# ---------------------------------------------------------------------------
# timestamp rendering for export

def format_timestamp_ms(epoch_ms: int) -> str:
    """Epoch milliseconds -> ISO-8601 UTC with millisecond precision."""
    seconds, ms = divmod(int(epoch_ms), 1000)
    stamp = dt.datetime.fromtimestamp(seconds, dt.timezone.utc)
    return stamp.strftime("%Y-%m-%dT%H:%M:%S") + f".{ms:03d}Z"


def parse_timestamp_ms(text: str) -> int:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    stamp = dt.datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=dt.timezone.utc)
    return round(stamp.timestamp() * 1000)


def _dump_line(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# dotted-path resolution; extra keys may themselves contain dots

_MISSING = object()


def _resolve_path(doc, parts: list[str]):
    node = doc
    i = 0
    while i < len(parts):
        if not isinstance(node, dict):
            return _MISSING
        remaining = ".".join(parts[i:])
        if remaining in node:
            return node[remaining]
        if parts[i] in node:
            node = node[parts[i]]
            i += 1
            continue
        return _MISSING
    return node


def _match_clause(doc: dict, path: str, op: str, value) -> bool:
    got = _resolve_path(doc, path.split("."))
    if op == "exists":
        want = True if value is None else bool(value)
        present = got is not _MISSING and got is not None and got != [] and got != {}
        return present == want
    if got is _MISSING or got is None:
        return False
    if op == "eq":
        return got == value
    if op == "range":
        lo, hi = value
        if not isinstance(got, (int, float)) or isinstance(got, bool):
            return False
        if lo is not None and got < lo:
            return False
        if hi is not None and got > hi:
            return False
        return True
    if op == "prefix":
        return isinstance(got, str) and got.startswith(value)
    raise QueryError(f"unknown query op {op!r}")


def _check_clauses(clauses) -> list[tuple[str, str, object]]:
    checked = []
    for clause in clauses:
        if not isinstance(clause, (tuple, list)) or len(clause) != 3:
            raise QueryError(f"clause must be (path, op, value): {clause!r}")
        path, op, value = clause
        if not isinstance(path, str) or not _PATH_RE.match(path):
            raise QueryError(f"malformed field path {path!r}")
        if op not in QUERY_OPS:
            raise QueryError(f"unknown query op {op!r}")
        if op == "range":
            if not isinstance(value, (tuple, list)) or len(value) != 2:
                raise QueryError("range value must be a (low, high) pair")
        checked.append((path, op, value))
    return checked


# ---------------------------------------------------------------------------
# the store

class FlowStore:
    def __init__(self, root, writable: bool = True, create: bool = True):
        self.root = Path(root)
        self.writable = writable
        if create:
            (self.root / "blobs").mkdir(parents=True, exist_ok=True)
            (self.root / "index").mkdir(parents=True, exist_ok=True)
        elif not self.root.is_dir():
            raise StoreError(f"store root {self.root} does not exist")

        self._lock_fh = None
        if writable:
            lock_path = self.root / "records.lock"
            self._lock_fh = open(lock_path, "a+")
            try:
                fcntl.flock(self._lock_fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
            except OSError:
                self._lock_fh.close()
                self._lock_fh = None
                raise StoreLockError(
                    f"another writer holds {lock_path}") from None

        self._docs: dict[int, dict] = {}
        self._next_id = 1
        self._log_path = self.root / "records.log"
        self._replay_log()
        self._log_fh = open(self._log_path, "a", encoding="utf-8") if writable else None
        self._ids_fh = (open(self.root / "index" / "ids.log", "a", encoding="utf-8")
                        if writable else None)

    def _replay_log(self) -> None:
        if not self._log_path.exists():
            return
        with open(self._log_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError:
                    continue  # tolerate a torn final line from a crash
                rid = doc.get("record_id")
                if isinstance(rid, int) and rid > 0:
                    self._docs[rid] = doc
                    self._next_id = max(self._next_id, rid + 1)

    def close(self) -> None:
        for fh in (self._log_fh, self._ids_fh):
            if fh is not None:
                fh.flush()
                os.fsync(fh.fileno())
                fh.close()
        self._log_fh = None
        self._ids_fh = None
        if self._lock_fh is not None:
            if self.writable:
                self._write_meta()
            fcntl.flock(self._lock_fh.fileno(), fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def _write_meta(self) -> None:
        meta = {"next_record_id": self._next_id, "record_count": len(self._docs),
                "blob_count": self.blob_count()}
        tmp = self.root / "index" / f".meta-{uuid.uuid4().hex}.tmp"
        tmp.write_text(_dump_line(meta) + "\n", encoding="utf-8")
        os.replace(tmp, self.root / "index" / "meta.json")

    def __enter__(self) -> "FlowStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def flush(self) -> None:
        if self._log_fh is not None:
            self._log_fh.flush()
            os.fsync(self._log_fh.fileno())

    # --- blobs

    def _blob_path(self, sha1: str) -> Path:
        return self.root / "blobs" / sha1[:2] / sha1[2:4] / sha1

    def put_blob(self, data: bytes) -> str:
        if not self.writable:
            raise StoreError("store opened read-only")
        if len(data) > BLOB_CAP:
            raise BlobTooLargeError(f"blob of {len(data)} bytes exceeds cap {BLOB_CAP}")
        sha1 = hashlib.sha1(data).hexdigest()
        path = self._blob_path(sha1)
        if path.exists():
            return sha1
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f".tmp-{uuid.uuid4().hex}"
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        return sha1

    def has_blob(self, sha1: str) -> bool:
        return bool(_SHA1_RE.match(sha1 or "")) and self._blob_path(sha1).exists()

    def get_blob(self, sha1: str) -> ContentBlob:
        if not _SHA1_RE.match(sha1 or ""):
            raise BlobNotFoundError(sha1)
        path = self._blob_path(sha1)
        if not path.exists():
            raise BlobNotFoundError(sha1)
        data = path.read_bytes()
        actual = hashlib.sha1(data).hexdigest()
        if actual != sha1:
            raise BlobCorruptError(
                f"blob {sha1} reads back with digest {actual}")
        return ContentBlob(sha1=sha1, size=len(data), data=data)

    def blob_count(self) -> int:
        base = self.root / "blobs"
        return sum(1 for p in base.glob("??/??/*") if p.is_file())

    # --- records

    def _validate_record(self, record: FlowRecord, require_blobs: bool = True) -> None:
        if record.exchange is not None:
            record.exchange.validate()
        for name in ("body_sha1", "decoded_sha1"):
            sha1 = getattr(record, name)
            if sha1 is not None:
                if not _SHA1_RE.match(sha1):
                    raise DanglingBlobError(f"{name} {sha1!r} is not a sha1 digest")
                if require_blobs and not self.has_blob(sha1):
                    raise DanglingBlobError(f"{name} {sha1} references no stored blob")
        record.labels.validate()
        if record.augment is not None:
            record.augment.validate()
        for key in record.extra:
            if not isinstance(key, str) or not _EXTRA_KEY_RE.match(key):
                raise ValueError(
                    f"extra key {key!r} must be namespaced like 'source.name'")

    def _append(self, doc: dict) -> None:
        if self._log_fh is None:
            raise StoreError("store opened read-only")
        offset = self._log_fh.tell()
        line = _dump_line(doc)
        self._log_fh.write(line + "\n")
        self._log_fh.flush()
        self._ids_fh.write(f"{doc['record_id']} {offset} {len(line)}\n")
        self._ids_fh.flush()
        self._docs[doc["record_id"]] = doc

    def put_record(self, record: FlowRecord) -> int:
        if record.record_id not in (0, None):
            raise ValueError("record ids are assigned by the store")
        self._validate_record(record)
        record.record_id = self._next_id
        self._next_id += 1
        self._append(record.to_doc())
        return record.record_id

    def update_record(self, record_id: int, **fields) -> FlowRecord:
        """Append a new version of the record; the latest version wins."""
        record = self.get_record(record_id)
        allowed = {"exchange", "body_sha1", "decoded_sha1", "labels",
                   "augment", "features", "extra"}
        for name, value in fields.items():
            if name not in allowed:
                raise ValueError(f"cannot update field {name!r}")
            setattr(record, name, value)
        self._validate_record(record)
        self._append(record.to_doc())
        return record

    def get_record(self, record_id: int) -> FlowRecord:
        doc = self._docs.get(record_id)
        if doc is None:
            raise RecordNotFoundError(record_id)
        return FlowRecord.from_doc(doc)

    def records(self):
        for rid in sorted(self._docs):
            yield FlowRecord.from_doc(self._docs[rid])

    def record_count(self) -> int:
        return len(self._docs)

    # --- query and export

    def query(self, clauses) -> list[FlowRecord]:
        """Conjunction of (path, op, value) clauses; ops: eq, exists, range, prefix."""
        checked = _check_clauses(clauses)
        out = []
        for rid in sorted(self._docs):
            doc = self._docs[rid]
            if all(_match_clause(doc, *clause) for clause in checked):
                out.append(FlowRecord.from_doc(doc))
        return out

    def export_jsonl(self, path, clauses=None) -> int:
        records = self.query(clauses or [])
        count = 0
        with open(path, "w", encoding="utf-8") as fh:
            for record in records:
                doc = record.to_doc()
                doc["schema"] = "flow-record/1"
                if doc.get("exchange"):
                    doc["exchange"]["started_at"] = format_timestamp_ms(
                        doc["exchange"]["started_at"])
                fh.write(_dump_line(doc) + "\n")
                count += 1
        return count

    def import_jsonl(self, path) -> int:
        """Load exported records, preserving their original ids."""
        count = 0
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise StoreError(f"bad JSONL at line {lineno}: {exc}") from None
                doc.pop("schema", None)
                exchange = doc.get("exchange")
                if exchange and isinstance(exchange.get("started_at"), str):
                    exchange["started_at"] = parse_timestamp_ms(exchange["started_at"])
                record = FlowRecord.from_doc(doc)
                rid = record.record_id
                if not isinstance(rid, int) or rid <= 0:
                    raise StoreError(f"line {lineno}: bad record_id {rid!r}")
                # digests are carried as data; blob bytes transfer separately
                self._validate_record(record, require_blobs=False)
                self._append(record.to_doc())
                self._next_id = max(self._next_id, rid + 1)
                count += 1
        return count
