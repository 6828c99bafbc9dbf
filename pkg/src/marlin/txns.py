"""Reconfiguration transaction coordinators.

Each coordinator is a small event-driven state machine owned by the node that
launched the transaction.  Steps that touch storage or a peer go through the
environment (one storage round trip or one RPC per step), so the simulator's
event order is the only source of interleaving.

Membership transactions (add/delete) are one-phase commits on the shared log
and retry internally after a fenced abort, refreshing the membership cache
first.  Migration is a two-phase commit across the source and destination
logs with both nodes voting.  Failover migration replaces the unresponsive
source node with its raw log: the coordinator reads the partition at a tail
snapshot, resolves any in-doubt votes parked there, and conditions its own
append on that snapshot, so racing recoverers or a revenant source node lose
the fence.  The ownership scan commits in validation mode: it appends
nothing and merely checks that no participant log moved under the snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import commit as cp
from .logstore import ABORT, COMMIT, GTABLE, MTABLE, SYSLOG, LogId, UnknownLog, WriteOp
from .node import (
    ABORTED,
    COMMITTED,
    GUARD_FAILED,
    LOCK_CONFLICT,
    NODE_EXISTS,
    NODE_MISSING,
    NOT_EMPTY,
    STALE_SNAPSHOT,
    UNREACHABLE,
    WRONG_NODE,
    NodeRuntime,
    TxnResult,
)
from .systables import owns, self_owned

ADD_NODE = "add_node"
DELETE_NODE = "delete_node"
MIGRATION = "migration"
RECOVERY_MIGRATION = "recovery_migration"
SCAN_GTABLE = "scan_gtable"
USER_TXN = "user"


@dataclass
class Coordinator:
    runtime: NodeRuntime
    env: object
    txn_id: str
    on_done: object = None
    done: bool = False
    result: TxnResult | None = None
    kind: str = ""
    params: dict = field(default_factory=dict)
    landings: dict = field(default_factory=dict)

    def finish(self, status: str, reason: str | None = None, owner_hint: int | None = None, values=None):
        if self.done:
            return
        self.done = True
        self.result = TxnResult(status, reason, values=values, owner_hint=owner_hint)
        self.env.trace_txn(
            self.txn_id, self.kind, self.runtime.node_id, status, reason,
            params=self.params, landings=self.landings or None,
        )
        if self.on_done is not None:
            self.on_done(self.result)

    def storage_step(self, fn, *args):
        self.env.storage_step(self.runtime.node_id, fn, *args)


@dataclass
class AddNodeTxn(Coordinator):
    """Joining node adds itself to the membership table (one-phase on SysLog)."""

    kind: str = ADD_NODE
    attempts: int = 0

    def start(self):
        self.params = {"node": self.runtime.node_id, "address": self.runtime.address}
        self.storage_step(self._attempt)

    def _attempt(self, reachable: bool):
        if self.done:
            return
        if not reachable:
            return self._retry()
        node = self.runtime
        image = node.mtable_image()
        if node.node_id in image:
            return self.finish(ABORTED, NODE_EXISTS)
        ops = [WriteOp(MTABLE, node.node_id, node.address)]
        out = node.try_log(SYSLOG, cp.onephase_batch(self.txn_id, ops))
        if out.decision == COMMIT:
            cached = node.cache.mtable
            if cached is not None:
                cached[0][node.node_id] = node.address
                node.cache.mtable = (cached[0], out.lsn)
            self.landings = {SYSLOG.token(): (out.target, out.lsn)}
            return self.finish(COMMITTED)
        self._retry(out.reason)

    def _retry(self, reason=LOCK_CONFLICT):
        self.attempts += 1
        if self.attempts > self.env.config.retry_limit:
            return self.finish(ABORTED, reason)
        self.env.post(self.env.backoff(self.attempts), self.storage_step, self._attempt)


@dataclass
class DeleteNodeTxn(Coordinator):
    """Remove a node from the membership table, then drop its log.

    The precondition is an emptied partition: every granule it owned must
    already be recovered or migrated away, otherwise the delete aborts.
    """

    kind: str = DELETE_NODE
    target: int = -1
    attempts: int = 0

    def start(self):
        self.params = {"node": self.target, "by": self.runtime.node_id}
        self.storage_step(self._attempt)

    def _attempt(self, reachable: bool):
        if self.done:
            return
        if not reachable:
            return self._retry()
        node = self.runtime
        svc = self.env.service
        image = node.mtable_image()
        if self.target not in image:
            return self.finish(ABORTED, NODE_MISSING)
        target_log = LogId.node(self.target)
        if svc.exists(target_log):
            for txn_id, logs in cp.undecided_intents(svc, target_log):
                cp.resolve_txn(svc, txn_id, logs)
            part = self.env.pagestore.gtable_partition(self.target, svc.tail(target_log))
            if self_owned(part, self.target):
                return self.finish(ABORTED, NOT_EMPTY)
        ops = [WriteOp(MTABLE, self.target, None)]
        out = node.try_log(SYSLOG, cp.onephase_batch(self.txn_id, ops))
        if out.decision == COMMIT:
            cached = node.cache.mtable
            if cached is not None:
                cached[0].pop(self.target, None)
                node.cache.mtable = (cached[0], out.lsn)
            if svc.exists(target_log):
                self.env.pagestore.archive_log(target_log)
                svc.delete_log(target_log)
                self.env.trace_log_deleted(target_log, self.runtime.node_id)
            self.landings = {SYSLOG.token(): (out.target, out.lsn)}
            return self.finish(COMMITTED)
        self._retry(out.reason)

    def _retry(self, reason=LOCK_CONFLICT):
        self.attempts += 1
        if self.attempts > self.env.config.retry_limit:
            return self.finish(ABORTED, reason)
        self.env.post(self.env.backoff(self.attempts), self.storage_step, self._attempt)


@dataclass
class MigrationTxn(Coordinator):
    """Two-phase ownership hand-off, coordinated on the destination node."""

    kind: str = MIGRATION
    granules: tuple[int, ...] = ()
    src: int = -1
    ops: list = field(default_factory=list)
    participants: list = field(default_factory=list)
    src_vote: dict | None = None
    self_vote: dict | None = None

    def start(self):
        self.params = {"granules": list(self.granules), "src": self.src, "dst": self.runtime.node_id}
        if self.env.config.centralized_gtable:
            return self.storage_step(self._central_attempt)
        self.env.rpc(
            self.runtime.node_id, self.src, "read_entries",
            {"granules": list(self.granules)},
            on_reply=self._on_entries,
            on_timeout=lambda: self.finish(ABORTED, UNREACHABLE),
        )

    # Ablation path: every ownership row is forced through the shared log, so
    # migrations become one-phase commits that all contend on one tail.
    def _central_attempt(self, reachable: bool):
        if self.done:
            return
        if not reachable:
            return self.finish(ABORTED, UNREACHABLE)
        node = self.runtime
        svc = self.env.service
        lsn = node.tracker.get(SYSLOG)
        if lsn is None:
            lsn = svc.tail(SYSLOG)
            node.tracker.observe(SYSLOG, lsn)
        self.env.pagestore.replay(SYSLOG, lsn)
        for gid in self.granules:
            entry = self.env.pagestore.central_entry(gid)
            if entry is None or entry[2] != self.src:
                return self.finish(ABORTED, WRONG_NODE, owner_hint=entry[2] if entry else None)
        ops = [
            WriteOp(GTABLE, gid, (*self.env.space.ranges[gid], node.node_id))
            for gid in self.granules
        ]
        out = node.try_log(SYSLOG, cp.onephase_batch(self.txn_id, ops))
        if out.decision == COMMIT:
            self.landings = {SYSLOG.token(): (out.target, out.lsn)}
            return self.finish(COMMITTED)
        return self.finish(ABORTED, out.reason)

    # Normal two-phase path.
    def _on_entries(self, reply):
        if self.done:
            return
        entries = reply["entries"]
        for gid in self.granules:
            entry = entries.get(gid)
            if entry is None or entry[2] != self.src:
                return self.finish(
                    ABORTED, WRONG_NODE, owner_hint=entry[2] if entry else None
                )
        self.ops = [
            WriteOp(GTABLE, gid, (entries[gid][0], entries[gid][1], self.runtime.node_id))
            for gid in self.granules
        ]
        self.participants = [cp.node_participant(self.src), cp.node_participant(self.runtime.node_id)]
        self.storage_step(self._self_vote)

    def _self_vote(self, reachable: bool):
        if self.done:
            return
        if not reachable:
            return self.finish(ABORTED, UNREACHABLE)
        self.self_vote = self.runtime.handle_vote_request(
            self.txn_id, self.ops, self.participants,
            lock_granules=self.granules, expect_owner={},
        )
        if not self.self_vote["vote"]:
            return self.finish(ABORTED, self.self_vote["reason"])
        self.env.rpc(
            self.runtime.node_id, self.src, "vote",
            {
                "txn": self.txn_id,
                "ops": self.ops,
                "participants": self.participants,
                "lock_granules": list(self.granules),
                "expect_owner": {g: self.src for g in self.granules},
            },
            on_reply=self._on_src_vote,
            on_timeout=self._on_src_timeout,
            timeout=self.env.config.vote_timeout,
        )

    def _on_src_vote(self, reply):
        if self.done:
            return
        self.src_vote = reply
        verdict = COMMIT if reply["vote"] else ABORT
        self.storage_step(self._propagate, verdict, reply.get("reason"))

    def _on_src_timeout(self):
        # The source is unreachable: decide through its log.  Resolution
        # fences the log if the vote never landed and derives the verdict
        # from whatever is durable.
        if self.done:
            return
        self.storage_step(self._propagate, None, UNREACHABLE)

    def _propagate(self, reachable: bool, verdict, abort_reason):
        if self.done:
            return
        if not reachable:
            return self.finish(ABORTED, UNREACHABLE)
        svc = self.env.service
        src_log, own_log = LogId.node(self.src), self.runtime.log
        if verdict is not None:
            self.runtime.append_own_decision(self.txn_id, verdict)
        resolved = cp.resolve_txn(svc, self.txn_id, [src_log, own_log])
        if verdict is not None and verdict != resolved:
            raise AssertionError(f"{self.txn_id}: verdict {verdict} != resolved {resolved}")
        try:
            src_tail = svc.tail(src_log)
            self.env.send_decision(self.src, self.txn_id, resolved, src_tail)
        except UnknownLog:
            pass
        self.runtime.handle_decision(self.txn_id, resolved, svc.tail(own_log))
        if resolved == COMMIT:
            if self.src_vote and self.src_vote.get("vote"):
                self.landings[src_log.token()] = (self.src_vote["target"], self.src_vote["lsn"])
            self.landings[own_log.token()] = (self.self_vote["target"], self.self_vote["lsn"])
            self.finish(COMMITTED)
        else:
            reason = abort_reason or (self.src_vote or {}).get("reason") or LOCK_CONFLICT
            hint = (self.src_vote or {}).get("owner")
            self.finish(ABORTED, reason, owner_hint=hint)


@dataclass
class RecoveryMigrationTxn(Coordinator):
    """Seize granules from an unresponsive node by committing to its log.

    Executed solely on the destination; the source's participant is its raw
    log.  The guard read and the conditional append share one tail snapshot,
    and any in-doubt vote parked on the source log for these granules is
    resolved before the snapshot is trusted.
    """

    kind: str = RECOVERY_MIGRATION
    granules: tuple[int, ...] = ()
    src: int = -1
    rounds: int = 0
    ops: list = field(default_factory=list)
    participants: list = field(default_factory=list)
    snapshot: int = 0
    self_vote: dict | None = None

    def start(self):
        self.params = {"granules": list(self.granules), "src": self.src, "dst": self.runtime.node_id}
        self.storage_step(self._read)

    def _read(self, reachable: bool):
        if self.done:
            return
        if not reachable:
            return self.finish(ABORTED, UNREACHABLE)
        svc = self.env.service
        src_log = LogId.node(self.src)
        if not svc.exists(src_log):
            return self.finish(ABORTED, GUARD_FAILED)
        intents = cp.undecided_intents(svc, src_log, set(self.granules))
        if intents:
            for txn_id, logs in intents:
                cp.resolve_txn(svc, txn_id, logs)
            self.rounds += 1
            if self.rounds > 8:
                return self.finish(ABORTED, GUARD_FAILED)
            return self.storage_step(self._read)
        self.snapshot = svc.tail(src_log)
        image = self.env.pagestore.gtable_partition(self.src, self.snapshot)
        if not all(owns(image, g, self.src) for g in self.granules):
            return self.finish(ABORTED, GUARD_FAILED)
        self.ops = [
            WriteOp(GTABLE, g, (image[g][0], image[g][1], self.runtime.node_id))
            for g in self.granules
        ]
        self.participants = [cp.log_participant(src_log), cp.node_participant(self.runtime.node_id)]
        self.storage_step(self._self_vote)

    def _self_vote(self, reachable: bool):
        if self.done:
            return
        if not reachable:
            return self.finish(ABORTED, UNREACHABLE)
        self.self_vote = self.runtime.handle_vote_request(
            self.txn_id, self.ops, self.participants,
            lock_granules=self.granules, expect_owner={},
        )
        if not self.self_vote["vote"]:
            return self.finish(ABORTED, self.self_vote["reason"])
        self.storage_step(self._log_vote)

    def _log_vote(self, reachable: bool):
        if self.done:
            return
        if not reachable:
            return self.finish(ABORTED, UNREACHABLE)
        src_log = LogId.node(self.src)
        out = self.runtime.try_log(
            src_log, cp.vote_batch(self.txn_id, self.ops, self.participants), target=self.snapshot
        )
        self.storage_step(self._propagate, out)

    def _propagate(self, reachable: bool, out):
        if self.done:
            return
        if not reachable:
            return self.finish(ABORTED, UNREACHABLE)
        svc = self.env.service
        src_log, own_log = LogId.node(self.src), self.runtime.log
        verdict = COMMIT if out.decision == COMMIT else ABORT
        self.runtime.append_own_decision(self.txn_id, verdict)
        resolved = cp.resolve_txn(svc, self.txn_id, [src_log, own_log])
        self.runtime.handle_decision(self.txn_id, resolved, svc.tail(own_log))
        if resolved == COMMIT:
            self.landings = {
                src_log.token(): (out.target, out.lsn),
                own_log.token(): (self.self_vote["target"], self.self_vote["lsn"]),
            }
            self.finish(COMMITTED)
        else:
            self.finish(ABORTED, out.reason or LOCK_CONFLICT)


@dataclass
class ScanGTableTxn(Coordinator):
    """Consistent full-cluster ownership snapshot, certified in validation
    mode: no participant log may have moved since its partition was scanned."""

    kind: str = SCAN_GTABLE
    replies: dict = field(default_factory=dict)
    expected: list = field(default_factory=list)
    sys_stamp: int = 0

    def start(self):
        self.params = {"initiator": self.runtime.node_id}
        node = self.runtime
        image = node.mtable_image()
        self.sys_stamp = node.cache.mtable[1]
        self.expected = sorted(image)
        self.replies[node.node_id] = node.handle_scan_request()
        for nid in self.expected:
            if nid == node.node_id:
                continue
            self.env.rpc(
                node.node_id, nid, "scan", {},
                on_reply=self._on_scan,
                on_timeout=lambda: self.finish(ABORTED, UNREACHABLE),
            )
        self._maybe_validate()

    def _on_scan(self, reply):
        if self.done:
            return
        self.replies[reply["node"]] = reply
        self._maybe_validate()

    def _maybe_validate(self):
        if self.done or set(self.replies) != set(self.expected):
            return
        self.storage_step(self._validate)

    def _validate(self, reachable: bool):
        if self.done:
            return
        if not reachable:
            return self.finish(ABORTED, UNREACHABLE)
        svc = self.env.service
        node = self.runtime
        ok = True
        if not svc.validate(SYSLOG, self.sys_stamp):
            # same treatment as a fenced-append failure: drop the stale cache
            # entry and resync the tracker so the retry reads fresh state
            node.cache.clear_for_log(SYSLOG)
            node.tracker.observe(SYSLOG, svc.tail(SYSLOG))
            ok = False
        for nid in self.expected:
            log = LogId.node(nid)
            try:
                if not svc.validate(log, self.replies[nid]["tail"]):
                    node.cache.clear_for_log(log)
                    ok = False
            except UnknownLog:
                node.cache.clear_for_log(SYSLOG)
                node.tracker.observe(SYSLOG, svc.tail(SYSLOG))
                ok = False
        if not ok:
            return self.finish(ABORTED, STALE_SNAPSHOT)
        merged = {}
        for nid in self.expected:
            for gid, entry in self.replies[nid]["partition"].items():
                if entry[2] == nid:
                    merged[gid] = nid
        self.finish(COMMITTED, values=merged)
