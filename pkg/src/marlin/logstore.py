"""Disaggregated storage layer: named append-only logs with conditional append.

Every durable fact in the system lives in a log: one shared membership log
(SysLog) plus one write-ahead log per compute node (GLog).  The only write
primitive is ``append(log, records, target_lsn)``, a single indivisible
check-and-append: it succeeds only when the log tail equals ``target_lsn``,
which is how concurrent writers fence each other out.  An LSN here is a dense
batch index (0 = empty log); one successful append consumes exactly one slot,
no matter how many records the batch carries.

A :class:`PageStore` materializes row images by folding log records, pulled
forward on demand by ``get_page``–style reads.  Multi-participant transaction
updates ride in a vote batch and stay invisible to the page store until a
commit decision record lands on the same log.

Storage is in-memory by default; pass ``log_dir`` to also persist each log to
one framed binary file, which the ``fsck`` CLI subcommand can refold.
"""

from __future__ import annotations

import json
import os
import struct
import threading
from dataclasses import dataclass, field

MTABLE = "mtable"
GTABLE = "gtable"
USER = "user"

UPDATES = "updates"
VOTE = "vote"
DECISION = "decision"

COMMIT = "commit"
ABORT = "abort"

_FRAME_HEAD = struct.Struct(">QI")  # 8-byte LSN, 4-byte payload length


class UnknownLog(Exception):
    """The target log does not exist (deleted or never created)."""


class FutureLsn(Exception):
    """A read asked for an LSN beyond the log tail; the caller's tracker is corrupt."""


class LogLifecycleError(Exception):
    """Duplicate create or missing delete: a protocol bug, never retried."""


@dataclass(frozen=True)
class LogId:
    """SysLog when node_id is None, otherwise the per-node GLog."""

    node_id: int | None = None

    @classmethod
    def syslog(cls) -> "LogId":
        return cls(None)

    @classmethod
    def node(cls, node_id: int) -> "LogId":
        return cls(node_id)

    @property
    def is_syslog(self) -> bool:
        return self.node_id is None

    def token(self) -> str:
        return "sys" if self.node_id is None else f"g{self.node_id}"

    @classmethod
    def from_token(cls, token: str) -> "LogId":
        if token == "sys":
            return cls(None)
        if token.startswith("g"):
            return cls(int(token[1:]))
        raise ValueError(f"bad log token {token!r}")

    def __str__(self) -> str:
        return "SysLog" if self.node_id is None else f"GLog{self.node_id}"

    def __lt__(self, other: "LogId") -> bool:  # SysLog sorts first
        a = -1 if self.node_id is None else self.node_id
        b = -1 if other.node_id is None else other.node_id
        return a < b


SYSLOG = LogId.syslog()


@dataclass(frozen=True)
class WriteOp:
    """One row mutation.  value None is a tombstone.

    mtable rows: key = node id, value = address string.
    gtable rows: key = granule id, value = (lo, hi, owner node id).
    user rows:   key = user key, value = opaque payload.
    """

    table: str
    key: int
    value: object | None = None

    def to_json(self) -> list:
        value = list(self.value) if isinstance(self.value, tuple) else self.value
        return [self.table, self.key, value]

    @classmethod
    def from_json(cls, data: list) -> "WriteOp":
        table, key, value = data
        if table == GTABLE and value is not None:
            value = tuple(value)
        return cls(table, key, value)


@dataclass(frozen=True)
class LogRecord:
    """One log entry.

    kind=updates: a single-participant transaction's writes, visible at once.
    kind=vote:    a multi-participant yes-vote; carries no ops itself but the
                  participant roster, so any reader can locate the sibling logs.
    kind=decision: commit/abort verdict for txn_id; ops always empty.

    A two-phase vote batch is appended as (vote record, updates record) in one
    slot, mirroring a commit protocol that logs the vote and the writes
    together.
    """

    txn_id: str
    kind: str
    ops: tuple[WriteOp, ...] = ()
    verdict: str | None = None
    participants: tuple[str, ...] = ()

    def to_json(self) -> dict:
        out: dict = {"txn": self.txn_id, "kind": self.kind}
        if self.ops:
            out["ops"] = [op.to_json() for op in self.ops]
        if self.verdict is not None:
            out["verdict"] = self.verdict
        if self.participants:
            out["parts"] = list(self.participants)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "LogRecord":
        return cls(
            txn_id=data["txn"],
            kind=data["kind"],
            ops=tuple(WriteOp.from_json(o) for o in data.get("ops", [])),
            verdict=data.get("verdict"),
            participants=tuple(data.get("parts", [])),
        )


@dataclass(frozen=True)
class AppendResult:
    ok: bool
    lsn: int  # new tail on success, current tail on failure


Batch = tuple[LogRecord, ...]


@dataclass
class LogInstance:
    slots: list[Batch] = field(default_factory=list)

    @property
    def tail(self) -> int:
        return len(self.slots)


class LogService:
    """All log instances plus their lifecycle.

    ``append`` is the only operation that must tolerate concurrent callers
    (threaded soak mode); it serializes per log.  Deleted logs are kept as
    read-only tombstones so a post-hoc audit can still fold them.

    ``unconditional=True`` is a seeded-bug switch that downgrades the
    check-and-append to a plain append; it exists only so the verifier's
    sensitivity tests have something to catch.
    """

    def __init__(self, log_dir: str | None = None, unconditional: bool = False):
        self.logs: dict[LogId, LogInstance] = {}
        self.archived: dict[LogId, LogInstance] = {}
        self.unconditional = unconditional
        self.log_dir = log_dir
        self._locks: dict[LogId, threading.Lock] = {}
        self._lifecycle = threading.Lock()
        self.on_append = None  # callback(log, lsn, batch) for tracing
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)

    # -- lifecycle ---------------------------------------------------------

    def create_log(self, log: LogId) -> None:
        with self._lifecycle:
            if log in self.logs:
                raise LogLifecycleError(f"{log} already exists")
            self.logs[log] = LogInstance()
            self._locks[log] = threading.Lock()
            if self.log_dir:
                open(self._path(log), "wb").close()

    def delete_log(self, log: LogId) -> None:
        with self._lifecycle:
            if log not in self.logs:
                raise LogLifecycleError(f"{log} does not exist")
            self.archived[log] = self.logs.pop(log)
            self._locks.pop(log)
            if self.log_dir:
                os.replace(self._path(log), self._path(log) + ".tombstone")

    def exists(self, log: LogId) -> bool:
        return log in self.logs

    def log_ids(self) -> list[LogId]:
        return sorted(self.logs)

    # -- data path ---------------------------------------------------------

    def tail(self, log: LogId) -> int:
        inst = self.logs.get(log)
        if inst is None:
            raise UnknownLog(str(log))
        return inst.tail

    def append(self, log: LogId, records: list[LogRecord] | Batch, target_lsn: int) -> AppendResult:
        lock = self._locks.get(log)
        if lock is None:
            raise UnknownLog(str(log))
        with lock:
            inst = self.logs.get(log)
            if inst is None:
                raise UnknownLog(str(log))
            if not self.unconditional and inst.tail != target_lsn:
                return AppendResult(False, inst.tail)
            batch = tuple(records)
            inst.slots.append(batch)
            lsn = inst.tail
            if self.log_dir:
                self._persist(log, lsn, batch)
        if self.on_append is not None:
            self.on_append(log, lsn, batch)
        return AppendResult(True, lsn)

    def append_retry(self, log: LogId, records: list[LogRecord] | Batch, max_rounds: int = 10000) -> int:
        """Append at whatever the current tail is, retrying on CAS failure.

        Used for decision records only: a decision does not race for a fencing
        slot, it just needs to become durable.
        """
        for _ in range(max_rounds):
            result = self.append(log, records, self.tail(log))
            if result.ok:
                return result.lsn
        raise RuntimeError(f"append_retry starved on {log}")

    def validate(self, log: LogId, target_lsn: int) -> bool:
        """The degenerate zero-payload append: check the tail, mutate nothing."""
        return self.tail(log) == target_lsn

    def read(self, log: LogId, from_lsn: int) -> list[LogRecord]:
        """Records in slots (from_lsn, tail], flattened in append order."""
        out = []
        for _, batch in self.read_slots(log, from_lsn):
            out.extend(batch)
        return out

    def read_slots(self, log: LogId, from_lsn: int = 0) -> list[tuple[int, Batch]]:
        inst = self.logs.get(log)
        if inst is None:
            raise UnknownLog(str(log))
        if from_lsn > inst.tail:
            raise FutureLsn(f"{log}: asked from {from_lsn}, tail {inst.tail}")
        return [(i + 1, inst.slots[i]) for i in range(from_lsn, inst.tail)]

    def read_archived_slots(self, log: LogId) -> list[tuple[int, Batch]]:
        inst = self.archived.get(log)
        if inst is None:
            raise UnknownLog(str(log))
        return [(i + 1, batch) for i, batch in enumerate(inst.slots)]

    # -- file backing --------------------------------------------------------

    def _path(self, log: LogId) -> str:
        return os.path.join(self.log_dir, log.token() + ".log")

    def _persist(self, log: LogId, lsn: int, batch: Batch) -> None:
        payload = json.dumps([r.to_json() for r in batch], separators=(",", ":")).encode()
        with open(self._path(log), "ab") as f:
            f.write(_FRAME_HEAD.pack(lsn, len(payload)))
            f.write(payload)
            f.write(b"\n")


def refold_log_file(path: str) -> list[tuple[int, Batch]]:
    """Re-read one framed log file; raises ValueError on corrupt framing."""
    slots = []
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    expect = 1
    while pos < len(data):
        if pos + _FRAME_HEAD.size > len(data):
            raise ValueError(f"{path}: truncated frame header at byte {pos}")
        lsn, length = _FRAME_HEAD.unpack_from(data, pos)
        pos += _FRAME_HEAD.size
        if lsn != expect:
            raise ValueError(f"{path}: expected LSN {expect}, found {lsn}")
        if pos + length + 1 > len(data):
            raise ValueError(f"{path}: truncated payload at LSN {lsn}")
        payload = data[pos : pos + length]
        pos += length
        if data[pos : pos + 1] != b"\n":
            raise ValueError(f"{path}: missing frame terminator at LSN {lsn}")
        pos += 1
        batch = tuple(LogRecord.from_json(r) for r in json.loads(payload))
        slots.append((lsn, batch))
        expect += 1
    return slots


def visible_ops(slots) -> list[WriteOp]:
    """Ops visible to readers of one log, in application order: plain update
    records at their own slot, vote-batch updates only once a commit decision
    for the same transaction has landed on this log."""
    pending: dict[str, tuple[WriteOp, ...]] = {}
    out: list[WriteOp] = []
    for _, batch in slots:
        voted = {r.txn_id for r in batch if r.kind == VOTE}
        for rec in batch:
            if rec.kind == UPDATES:
                if rec.txn_id in voted:
                    pending[rec.txn_id] = rec.ops
                else:
                    out.extend(rec.ops)
            elif rec.kind == DECISION and rec.verdict == COMMIT:
                ops = pending.pop(rec.txn_id, None)
                if ops:
                    out.extend(ops)
    return out


def apply_write_ops(image: dict, ops) -> dict:
    """Deterministic left fold of ops into a row image; shared by the page
    store, cache refresh, and the audit-side folds.  Mutates and returns
    ``image``.  Last writer wins per key; a None value removes the row."""
    for op in ops:
        if op.value is None:
            image.pop(op.key, None)
        else:
            image[op.key] = op.value
    return image


class PageStore:
    """Materialized row images, advanced by replaying logs on demand.

    Replay is per log and purely deterministic: updates from a vote batch are
    parked until a commit decision record for the same transaction shows up on
    that log (abort means the commit record simply never arrives, so parked
    updates stay invisible forever).  Images for deleted logs are frozen into
    an archive at the tail they had when the log died.
    """

    def __init__(self, service: LogService):
        self.service = service
        self.applied: dict[LogId, int] = {}
        self.mtable: dict[int, str] = {}
        self.gtable: dict[int, dict[int, tuple]] = {}
        self.user: dict[int, dict[int, object]] = {}
        self.central: dict[int, tuple] = {}  # gtable rows on SysLog (ablation mode)
        self.pending: dict[LogId, dict[str, list[WriteOp]]] = {}
        self.archived_gtable: dict[int, dict[int, tuple]] = {}

    # -- replay --------------------------------------------------------------

    def replay(self, log: LogId, min_lsn: int | None = None) -> int:
        """Fold records until applied_lsn >= min_lsn (or the current tail)."""
        tail = self.service.tail(log)
        if min_lsn is None:
            min_lsn = tail
        if min_lsn > tail:
            raise FutureLsn(f"{log}: requested {min_lsn}, tail {tail}")
        done = self.applied.get(log, 0)
        if done >= min_lsn:
            return done
        for lsn, batch in self.service.read_slots(log, done):
            if lsn > min_lsn:
                break
            self._fold_slot(log, batch)
            self.applied[log] = lsn
        return self.applied[log]

    def _fold_slot(self, log: LogId, batch: Batch) -> None:
        voted = {r.txn_id for r in batch if r.kind == VOTE}
        for rec in batch:
            if rec.kind == UPDATES:
                if rec.txn_id in voted:
                    self.pending.setdefault(log, {})[rec.txn_id] = list(rec.ops)
                else:
                    self._apply(log, rec.ops)
            elif rec.kind == DECISION and rec.verdict == COMMIT:
                ops = self.pending.get(log, {}).pop(rec.txn_id, None)
                if ops:
                    self._apply(log, ops)
            # abort decisions leave parked updates parked: a fencing abort can
            # land before the vote it fences, and a late moot abort must not
            # swallow updates that a commit record will still unlock.

    def _apply(self, log: LogId, ops) -> None:
        if log.is_syslog:
            apply_write_ops(self.mtable, [op for op in ops if op.table == MTABLE])
            apply_write_ops(self.central, [op for op in ops if op.table == GTABLE])
        else:
            nid = log.node_id
            apply_write_ops(
                self.gtable.setdefault(nid, {}), [op for op in ops if op.table == GTABLE]
            )
            apply_write_ops(
                self.user.setdefault(nid, {}), [op for op in ops if op.table == USER]
            )

    def archive_log(self, log: LogId) -> None:
        """Freeze images before the log is deleted; the audit still sees them."""
        self.replay(log)
        if not log.is_syslog:
            self.archived_gtable[log.node_id] = dict(self.gtable.pop(log.node_id, {}))
            self.user.pop(log.node_id, None)
        self.pending.pop(log, None)
        self.applied.pop(log, None)

    # -- reads ---------------------------------------------------------------

    def get_page(self, table: str, ref: int | None, key: int, min_lsn: int):
        """Row image for ``key`` after replaying the governing log to min_lsn.

        table/ref: ("mtable", None) | ("gtable", owner node) | ("user", node).
        Returns the row value or None when absent.
        """
        log = SYSLOG if table == MTABLE else LogId.node(ref)
        self.replay(log, min_lsn)
        if table == MTABLE:
            return self.mtable.get(key)
        if table == GTABLE:
            return self.gtable.get(ref, {}).get(key)
        return self.user.get(ref, {}).get(key)

    def mtable_image(self, min_lsn: int) -> dict[int, str]:
        self.replay(SYSLOG, min_lsn)
        return dict(self.mtable)

    def gtable_partition(self, owner: int, min_lsn: int) -> dict[int, tuple]:
        self.replay(LogId.node(owner), min_lsn)
        return dict(self.gtable.get(owner, {}))

    def user_row(self, node: int, key: int, min_lsn: int):
        self.replay(LogId.node(node), min_lsn)
        return self.user.get(node, {}).get(key)

    def central_entry(self, granule: int):
        return self.central.get(granule)
