"""The compute node: guarded user transactions and reconfiguration coordinators.

A node serves user transactions under two-phase locking with NO_WAIT (a
conflicting lock request aborts immediately, so deadlock is impossible) and
an ownership guard: before touching a key the transaction takes a shared
lock on the covering granule's ownership row and checks that this node's own
partition names this node as the owner.  The guard is then re-validated for
free by the fenced append at commit: if anything else landed on this node's
log in between, the commit aborts with an LSN mismatch.

Reconfiguration transactions are small event-driven coordinators.  Membership
changes are one-phase commits on the shared log.  Migrations are two-phase
across the source and destination nodes' own logs; failover migrations swap
the unresponsive source node for its raw log as the participant, which is
what lets the destination seize ownership without the source's help.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import commit as cp
from .logstore import (
    ABORT,
    COMMIT,
    GTABLE,
    MTABLE,
    SYSLOG,
    USER,
    LogId,
    UnknownLog,
    WriteOp,
)
from .systables import GranuleSpace, LsnTracker, MetaCache, owns, self_owned

COMMITTED = "committed"
ABORTED = "aborted"

WRONG_NODE = "wrong_node"
NODE_EXISTS = "node_already_exists"
NODE_MISSING = "node_not_exists"
LOCK_CONFLICT = "lock_conflict"
LSN_MISMATCH = cp.LSN_MISMATCH
UNKNOWN_LOG = cp.UNKNOWN_LOG
GUARD_FAILED = "guard_failed"
UNREACHABLE = "participant_unreachable"
STALE_SNAPSHOT = "stale_snapshot"
NOT_EMPTY = "granules_not_recovered"

SHARED = "shared"
EXCLUSIVE = "exclusive"


@dataclass
class TxnResult:
    status: str
    reason: str | None = None
    values: dict | None = None
    owner_hint: int | None = None

    @property
    def committed(self) -> bool:
        return self.status == COMMITTED


class LockTable:
    """NO_WAIT lock table: grant or abort, never block."""

    def __init__(self):
        self.locks: dict[tuple, dict[str, object]] = {}

    def acquire(self, key: tuple, holder: str, mode: str) -> bool:
        entry = self.locks.get(key)
        if entry is None:
            self.locks[key] = {"mode": mode, "holders": {holder}}
            return True
        if holder in entry["holders"]:
            if mode == EXCLUSIVE and (entry["mode"] == EXCLUSIVE or len(entry["holders"]) == 1):
                entry["mode"] = EXCLUSIVE
                return True
            return mode == SHARED
        if mode == SHARED and entry["mode"] == SHARED:
            entry["holders"].add(holder)
            return True
        return False

    def release_all(self, holder: str) -> None:
        for key in [k for k, e in self.locks.items() if holder in e["holders"]]:
            entry = self.locks[key]
            entry["holders"].discard(holder)
            if not entry["holders"]:
                del self.locks[key]

    def held_by(self, holder: str) -> list[tuple]:
        return [k for k, e in self.locks.items() if holder in e["holders"]]


@dataclass
class UserTxn:
    txn_id: str
    reads: list[int]
    writes: list[tuple[int, object]]
    granules: list[int] = field(default_factory=list)
    values: dict = field(default_factory=dict)
    # LSN of our own log at which the ownership guard read its state; the
    # commit append is conditioned on it.  Advanced only when our own log
    # grows by our own appends, never over foreign records.
    pinned: int = 0


class NodeRuntime:
    """Volatile node state plus the single-step handlers the simulator drives.

    ``env`` supplies the cluster wiring: the log service, the page store, the
    granule space, message passing, scheduling, and trace emission.
    """

    def __init__(self, node_id: int, address: str, env):
        self.node_id = node_id
        self.address = address
        self.env = env
        self.alive = True
        self.decommissioned = False
        self.tracker = LsnTracker()
        self.cache = MetaCache()
        self.locks = LockTable()
        self.user_rows: dict[int, object] = {}
        self.inflight: dict[str, UserTxn] = {}
        self.vote_holds: dict[str, dict] = {}
        self.hb_misses: dict[int, int] = {}

    @property
    def log(self) -> LogId:
        return LogId.node(self.node_id)

    # -- volatile lifecycle ----------------------------------------------------

    def crash(self) -> None:
        self.alive = False
        self.tracker = LsnTracker()
        self.cache = MetaCache()
        self.locks = LockTable()
        self.user_rows = {}
        self.inflight = {}
        self.vote_holds = {}
        self.hb_misses = {}

    def recover(self) -> None:
        self.alive = True
        svc = self.env.service
        if not svc.exists(self.log):
            self.decommissioned = True
            return
        # close out any in-doubt transactions parked in our own log, then
        # resync the tracker and ownership view from the tail
        for txn_id, logs in cp.undecided_intents(svc, self.log):
            cp.resolve_txn(svc, txn_id, logs)
        tail = svc.tail(self.log)
        self.tracker.observe(self.log, tail)
        image = self.env.pagestore.gtable_partition(self.node_id, tail)
        self.cache.gtable[self.node_id] = (image, tail)
        self.user_rows = dict(self.env.pagestore.user.get(self.node_id, {}))

    # -- cached system-table reads ----------------------------------------------

    def mtable_image(self) -> dict[int, str]:
        if self.cache.mtable is not None:
            return self.cache.mtable[0]
        lsn = self.tracker.get(SYSLOG)
        if lsn is None:
            lsn = self.env.service.tail(SYSLOG)
            self.tracker.observe(SYSLOG, lsn)
        image = self.env.pagestore.mtable_image(lsn)
        self.cache.mtable = (image, lsn)
        return image

    def own_partition(self) -> dict[int, tuple]:
        cached = self.cache.gtable.get(self.node_id)
        if cached is not None:
            return cached[0]
        lsn = self.tracker.get(self.log)
        if lsn is None:
            lsn = self.env.service.tail(self.log)
            self.tracker.observe(self.log, lsn)
        image = self.env.pagestore.gtable_partition(self.node_id, lsn)
        self.cache.gtable[self.node_id] = (image, lsn)
        return image

    def peer_partition(self, nid: int) -> dict[int, tuple]:
        """Possibly stale view of another node's partition; hints only."""
        cached = self.cache.gtable.get(nid)
        if cached is not None:
            return cached[0]
        try:
            lsn = self.env.service.tail(LogId.node(nid))
        except UnknownLog:
            return {}
        image = self.env.pagestore.gtable_partition(nid, lsn)
        self.cache.gtable[nid] = (image, lsn)
        return image

    def owner_hint(self, granule: int) -> int | None:
        """Best current-owner guess, chasing re-pointed entries."""
        seen: set[int] = set()
        candidate = self.node_id
        for _ in range(len(self.mtable_image()) + 2):
            if candidate in seen:
                return candidate
            seen.add(candidate)
            part = self.own_partition() if candidate == self.node_id else self.peer_partition(candidate)
            entry = part.get(granule)
            if entry is None:
                break
            if entry[2] == candidate:
                return candidate
            candidate = entry[2]
        for nid in sorted(self.mtable_image()):
            if nid in seen:
                continue
            entry = self.peer_partition(nid).get(granule)
            if entry is not None:
                return entry[2]
        return None if candidate == self.node_id else candidate

    # -- fenced append ------------------------------------------------------------

    def try_log(self, log: LogId, records, target: int | None = None) -> cp.TryLogOutcome:
        """Fenced append; ``target`` overrides the tracker when the append
        must be conditioned on an explicit read snapshot (a coordinator
        appending to a log it does not own)."""

        def on_clear(entry):
            self.env.trace_cache_clear(self.node_id, entry)

        if target is None:
            return cp.try_log(self.env.service, self.tracker, self.cache, log, records, on_clear)
        try:
            result = self.env.service.append(log, records, target)
        except UnknownLog:
            on_clear(self.cache.clear_for_log(SYSLOG))
            return cp.TryLogOutcome(ABORT, UNKNOWN_LOG, 0, target)
        self.tracker.observe(log, result.lsn)
        if result.ok:
            return cp.TryLogOutcome(COMMIT, None, result.lsn, target)
        on_clear(self.cache.clear_for_log(log))
        return cp.TryLogOutcome(ABORT, LSN_MISMATCH, result.lsn, target)

    def apply_own_commit(self, lsn: int, ops) -> None:
        """After a fenced append on our own log succeeded, the cached images
        plus these ops equal the fold at the new LSN: nothing else got in."""
        cached = self.cache.gtable.get(self.node_id)
        if cached is not None:
            image = cached[0]
            for op in ops:
                if op.table != GTABLE:
                    continue
                if op.value is None:
                    image.pop(op.key, None)
                else:
                    image[op.key] = op.value
            self.cache.gtable[self.node_id] = (image, lsn)
        for op in ops:
            if op.table == USER:
                if op.value is None:
                    self.user_rows.pop(op.key, None)
                else:
                    self.user_rows[op.key] = op.value
        self.bump_pins(lsn)

    def bump_pins(self, lsn: int) -> None:
        """Our own append landed at ``lsn``: in-flight guards stay valid
        (lock conflicts would have stopped any local ownership change), so
        their fences slide forward with the tail."""
        for txn in self.inflight.values():
            if txn.pinned == lsn - 1:
                txn.pinned = lsn

    # -- user transactions ----------------------------------------------------------

    def user_txn_begin(self, txn: UserTxn) -> TxnResult | None:
        """Guard, lock, and execute; returns an abort result or None when the
        transaction is holding its locks awaiting the commit step."""
        space: GranuleSpace = self.env.space
        if self.decommissioned:
            return TxnResult(ABORTED, WRONG_NODE, owner_hint=None)
        keys = list(txn.reads) + [k for k, _ in txn.writes]
        txn.granules = sorted({space.granule_of(k) for k in keys})
        part = self.own_partition()
        for gid in txn.granules:
            if not self.locks.acquire(("granule", gid), txn.txn_id, SHARED):
                self.locks.release_all(txn.txn_id)
                return TxnResult(ABORTED, LOCK_CONFLICT)
            if not owns(part, gid, self.node_id):
                self.locks.release_all(txn.txn_id)
                return TxnResult(ABORTED, WRONG_NODE, owner_hint=self.owner_hint(gid))
        for key in keys:
            mode = EXCLUSIVE if any(k == key for k, _ in txn.writes) else SHARED
            if not self.locks.acquire(("user", key), txn.txn_id, mode):
                self.locks.release_all(txn.txn_id)
                return TxnResult(ABORTED, LOCK_CONFLICT)
        for key in txn.reads:
            txn.values[key] = self.user_rows.get(key)
        txn.pinned = self.cache.gtable[self.node_id][1]
        self.inflight[txn.txn_id] = txn
        return None

    def user_txn_commit(self, txn_id: str) -> TxnResult:
        txn = self.inflight.pop(txn_id, None)
        if txn is None:
            return TxnResult(ABORTED, LOCK_CONFLICT)
        ops = [WriteOp(USER, k, v) for k, v in txn.writes]
        outcome = self.try_log(self.log, cp.onephase_batch(txn_id, ops), target=txn.pinned)
        self.locks.release_all(txn_id)
        if outcome.decision == COMMIT:
            self.apply_own_commit(outcome.lsn, ops)
            self.env.trace_txn(
                txn_id, "user", self.node_id, COMMITTED, None,
                params={"writes": txn.writes, "reads": txn.reads, "granules": txn.granules},
                landings={self.log.token(): (outcome.target, outcome.lsn)},
            )
            return TxnResult(COMMITTED, values=txn.values)
        self.env.trace_txn(
            txn_id, "user", self.node_id, ABORTED, outcome.reason,
            params={"writes": txn.writes, "reads": txn.reads, "granules": txn.granules},
        )
        return TxnResult(ABORTED, outcome.reason)

    def user_txn_abort(self, txn_id: str) -> None:
        self.inflight.pop(txn_id, None)
        self.locks.release_all(txn_id)

    # -- participant side of two-phase commits ------------------------------------

    def handle_vote_request(self, txn_id: str, ops, participants, lock_granules, expect_owner: dict[int, int]) -> dict:
        """Vote = guards hold, locks granted, and the fenced append lands."""
        for gid in sorted(lock_granules):
            if not self.locks.acquire(("granule", gid), txn_id, EXCLUSIVE):
                self.locks.release_all(txn_id)
                return {"vote": False, "reason": LOCK_CONFLICT}
        part = self.own_partition()
        for gid, owner in sorted(expect_owner.items()):
            entry = part.get(gid)
            actual = entry[2] if entry else None
            if actual != owner:
                self.locks.release_all(txn_id)
                return {"vote": False, "reason": GUARD_FAILED, "owner": actual}
        outcome = self.try_log(self.log, cp.vote_batch(txn_id, ops, participants))
        if outcome.decision != COMMIT:
            self.locks.release_all(txn_id)
            return {"vote": False, "reason": outcome.reason}
        self.bump_pins(outcome.lsn)
        self.vote_holds[txn_id] = {"ops": list(ops)}
        plogs = [cp.participant_log(p) for p in participants]
        self.env.post_decision_check(self.node_id, txn_id, plogs)
        return {"vote": True, "lsn": outcome.lsn, "target": outcome.target}

    def append_own_decision(self, txn_id: str, verdict: str) -> None:
        """Make the decision durable on our own log, keeping the tracker and
        in-flight fences exact when the append is clean."""
        batch = cp.decision_batch(txn_id, verdict)
        out = self.try_log(self.log, batch)
        if out.decision == COMMIT:
            self.bump_pins(out.lsn)
            return
        try:
            self.env.service.append_retry(self.log, batch)
        except UnknownLog:
            pass

    def handle_decision(self, txn_id: str, verdict: str, tail_lsn: int) -> None:
        """Decision notification: refresh the ownership view from the log at
        the notified tail, resync the tracker, drop the vote-phase locks."""
        self.vote_holds.pop(txn_id, None)
        self.locks.release_all(txn_id)
        if verdict == COMMIT:
            try:
                image = self.env.pagestore.gtable_partition(self.node_id, tail_lsn)
            except UnknownLog:
                return
            self.cache.gtable[self.node_id] = (image, tail_lsn)
            self.tracker.observe(self.log, tail_lsn)

    def handle_scan_request(self) -> dict:
        part = self.own_partition()
        stamp = self.cache.gtable[self.node_id][1]
        tail = self.env.service.tail(self.log)
        if stamp != tail:
            # our own log moved under us (a recovery append): resync first
            self.cache.clear_for_log(self.log)
            self.tracker.observe(self.log, tail)
            part = self.own_partition()
            stamp = tail
        return {"partition": dict(part), "tail": stamp, "node": self.node_id}
