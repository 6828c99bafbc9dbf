"""Invariant auditing over execution traces.

The auditor replays a trace entry by entry, maintaining its own fold of every
log (independent of the node runtime's apply path), and checks the ownership
invariants at every cut:

  I1  membership and logs are one-one: every member has a live log, a live
      log without a member owns nothing, every membership slot changes at
      most one row, and archived partitions carry no ownership claims.
  I2  every installed granule has at least one owner.
  I3  every granule has at most one owner.
  I4  the conjunction of I2 and I3: exactly one owner, always.
  I5  only the owner commits user transactions on a granule (the guard
      predicate audited against actual committed work).
  I0  per log, committed transactions are totally ordered by their fenced
      append LSNs, with no foreign append between the fence and the landing.

Ownership here is the ground-truth definition: node N owns granule G exactly
when N's own partition row for G names N.  A multi-participant transaction's
effects count as soon as every participant log holds a valid vote, which is
the earliest point at which its outcome is determined.

The final audit additionally rebuilds the logs into a fresh service, folds
them with the independent ground-truth implementation, and cross-checks the
incremental images, the final ownership map, and the last committed write
per user key against the trace's commit order (lost/duplicated updates).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .commit import parse_participant, participant_log
from .groundtruth import GroundTruth
from .logstore import (
    ABORT,
    COMMIT,
    DECISION,
    GTABLE,
    MTABLE,
    SYSLOG,
    UPDATES,
    USER,
    VOTE,
    LogId,
    LogRecord,
    LogService,
)
from .systables import GranuleSpace
from .trace import Trace, TraceEntry


@dataclass(frozen=True)
class Violation:
    invariant: str
    seq: int
    tick: int
    detail: str

    def to_json(self) -> dict:
        return {"invariant": self.invariant, "seq": self.seq, "tick": self.tick, "detail": self.detail}


@dataclass
class TxnState:
    roster: tuple[LogId, ...] = ()
    valid_votes: set = field(default_factory=set)
    fenced: set = field(default_factory=set)
    ops_by_log: dict = field(default_factory=dict)
    verdict: str = "pending"


class TraceAuditor:
    """Streaming invariant checker; feed entries in order, then finish()."""

    def __init__(self):
        self.space: GranuleSpace | None = None
        self.slots: dict[LogId, list] = {}
        self.live: set[LogId] = set()
        self.archived: set[LogId] = set()
        self.mtable: dict[int, str] = {}
        self.partitions: dict[int, dict] = {}
        self.archived_partitions: dict[int, dict] = {}
        self.central: dict[int, tuple] = {}
        self.user_seen: dict[str, int] = {}  # committed user txn -> records seen
        self.txns: dict[str, TxnState] = {}
        self.claims: dict[int, set[int]] = {}
        self.installed: set[int] = set()
        self.commit_order: dict[LogId, list] = {}
        self.committed_user: list[TraceEntry] = []
        self.violations: list[Violation] = []
        self.flags: dict = {}
        self._entry: TraceEntry | None = None

    # -- entry dispatch --------------------------------------------------------

    def feed(self, entry: TraceEntry) -> None:
        self._entry = entry
        handler = getattr(self, f"_on_{entry.ev}", None)
        if handler is not None:
            handler(entry.data)

    def _flag(self, invariant: str, detail: str) -> None:
        entry = self._entry
        self.violations.append(Violation(invariant, entry.seq, entry.tick, detail))

    def _on_setup(self, data) -> None:
        self.space = GranuleSpace({int(g): tuple(span) for g, span in data["granules"].items()})
        self.flags = data.get("flags", {})

    def _on_log_created(self, data) -> None:
        log = LogId.from_token(data["log"])
        self.live.add(log)
        self.slots.setdefault(log, [])
        if not log.is_syslog:
            self.partitions.setdefault(log.node_id, {})

    def _on_log_deleted(self, data) -> None:
        log = LogId.from_token(data["log"])
        self.live.discard(log)
        self.archived.add(log)
        part = self.partitions.pop(log.node_id, {})
        self.archived_partitions[log.node_id] = part
        owned = [g for g, e in part.items() if e[2] == log.node_id]
        if owned:
            self._flag("I1", f"log {data['log']} deleted while owning granules {owned}")
        self._check_membership_logs()

    def _on_crash(self, data) -> None:
        pass

    def _on_recover(self, data) -> None:
        pass

    def _on_append(self, data) -> None:
        log = LogId.from_token(data["log"])
        if log not in self.live:
            self.live.add(log)  # syslog is created implicitly at bootstrap
        slots = self.slots.setdefault(log, [])
        lsn = data["lsn"]
        if lsn != len(slots) + 1:
            self._flag("I0", f"{data['log']}: append at LSN {lsn} but {len(slots)} slots known")
        batch = tuple(LogRecord.from_json(r) for r in data["records"])
        slots.append(batch)
        self._fold_batch(log, lsn, batch)

    def _fold_batch(self, log: LogId, lsn: int, batch) -> None:
        voted_here = {r.txn_id for r in batch if r.kind == VOTE}
        for rec in batch:
            if rec.kind == VOTE:
                state = self.txns.setdefault(rec.txn_id, TxnState())
                if not state.roster and rec.participants:
                    state.roster = tuple(
                        participant_log(parse_participant(t)) for t in rec.participants
                    )
                if log in state.fenced:
                    continue  # landed after a fencing abort: not a valid vote
                state.valid_votes.add(log)
                self._reverdict(rec.txn_id, state)
            elif rec.kind == DECISION:
                state = self.txns.setdefault(rec.txn_id, TxnState())
                if rec.verdict == ABORT and log not in state.valid_votes:
                    state.fenced.add(log)
                    self._reverdict(rec.txn_id, state)
                elif rec.verdict == COMMIT and state.verdict == ABORT:
                    self._flag("I0", f"commit decision for fenced txn {rec.txn_id} on {log}")
            elif rec.kind == UPDATES:
                if rec.txn_id in voted_here or rec.txn_id in self.txns:
                    state = self.txns.setdefault(rec.txn_id, TxnState())
                    state.ops_by_log[log] = rec.ops
                    if state.verdict == COMMIT:
                        self._apply(log, rec.ops)
                else:
                    self._apply(log, rec.ops)
                    if any(op.table == USER for op in rec.ops):
                        self.user_seen[rec.txn_id] = self.user_seen.get(rec.txn_id, 0) + 1

    def _reverdict(self, txn_id: str, state: TxnState) -> None:
        if state.verdict != "pending" or not state.roster:
            return
        if state.fenced:
            state.verdict = ABORT
            return
        if set(state.roster) <= state.valid_votes:
            state.verdict = COMMIT
            for log in state.roster:
                ops = state.ops_by_log.get(log)
                if ops:
                    self._apply(log, ops)

    def _apply(self, log: LogId, ops) -> None:
        touched: set[int] = set()
        if log.is_syslog:
            changed = 0
            for op in ops:
                if op.table == MTABLE:
                    before = self.mtable.get(op.key)
                    if op.value is None:
                        self.mtable.pop(op.key, None)
                    else:
                        self.mtable[op.key] = op.value
                    if before != op.value:
                        changed += 1
                elif op.table == GTABLE:
                    if op.value is None:
                        self.central.pop(op.key, None)
                    else:
                        self.central[op.key] = tuple(op.value)
                    touched.add(op.key)
            if changed > 1:
                self._flag("I1", f"membership slot changed {changed} rows")
            if changed:
                self._check_membership_logs()
        else:
            part = self.partitions.setdefault(log.node_id, {})
            for op in ops:
                if op.table == GTABLE:
                    if op.value is None:
                        part.pop(op.key, None)
                    else:
                        part[op.key] = tuple(op.value)
                    touched.add(op.key)
        for gid in touched:
            self._recheck_granule(gid)

    def _recheck_granule(self, gid: int) -> None:
        claims = {n for n, part in self.partitions.items() if part.get(gid, (0, 0, None))[2] == n}
        entry = self.central.get(gid)
        if entry is not None:
            claims.add(entry[2])
        self.claims[gid] = claims
        if claims:
            self.installed.add(gid)
        if len(claims) > 1:
            self._flag("I3", f"granule {gid} owned by {sorted(claims)}")
        if not claims and gid in self.installed:
            self._flag("I2", f"granule {gid} has no owner")
        for nid in claims:
            if nid not in self.mtable and LogId.node(nid) in self.live:
                # claims by a live log whose member row is gone: allowed only
                # transiently never at all, since deletes require emptiness
                self._flag("I1", f"granule {gid} owned by non-member node {nid}")

    def _check_membership_logs(self) -> None:
        for nid in self.mtable:
            if LogId.node(nid) not in self.live:
                self._flag("I1", f"member node {nid} has no live log")
        for log in self.live:
            if log.is_syslog or log.node_id in self.mtable:
                continue
            part = self.partitions.get(log.node_id, {})
            owned = [g for g, e in part.items() if e[2] == log.node_id]
            if owned:
                self._flag("I1", f"non-member log {log.token()} owns granules {owned}")

    def _on_txn(self, data) -> None:
        txn_id, kind, result = data["txn"], data["kind"], data["result"]
        if result != "committed":
            return
        landings = data.get("landings") or {}
        for token, (target, landed) in landings.items():
            if landed != target + 1:
                self._flag(
                    "I0",
                    f"txn {txn_id} on {token}: fenced at {target} but landed at {landed}",
                )
            log = LogId.from_token(token)
            slots = self.slots.get(log, [])
            if len(slots) < landed or all(r.txn_id != txn_id for r in slots[landed - 1]):
                self._flag("I0", f"txn {txn_id} landing at {token}@{landed} not found in log")
            self.commit_order.setdefault(log, []).append((txn_id, landed, kind))
        if kind == "user":
            self.committed_user.append(self._entry)
            node = data["node"]
            for gid in data.get("params", {}).get("granules", []):
                if self.claims.get(gid) != {node}:
                    self._flag(
                        "I5",
                        f"user txn {txn_id} committed on node {node} but granule {gid} owned by {sorted(self.claims.get(gid, ()))}",
                    )

    # -- final checks ----------------------------------------------------------

    def check_serialization(self) -> None:
        for log, commits in self.commit_order.items():
            last = 0
            for txn_id, landed, kind in commits:
                if landed <= last:
                    self._flag(
                        "I0",
                        f"{log.token()}: commit of {txn_id} at LSN {landed} out of order (last {last})",
                    )
                last = landed

    def rebuild_service(self) -> LogService:
        svc = LogService()
        for log in sorted(self.slots):
            svc.create_log(log)
            for i, batch in enumerate(self.slots[log]):
                svc.append(log, batch, i)
            if log in self.archived:
                svc.delete_log(log)
        return svc

    def finish(self) -> GroundTruth | None:
        self.check_serialization()
        if self.space is None:
            self._flag("I0", "trace missing setup header")
            return None
        svc = self.rebuild_service()
        gt = GroundTruth.from_service(svc)
        # dual-fold equivalence: the streaming fold must agree with the
        # independent ground-truth fold
        if gt.mtable != self.mtable:
            self._flag("I1", f"membership fold mismatch: {gt.mtable} vs {self.mtable}")
        for nid, part in gt.partitions.items():
            if part != self.partitions.get(nid, {}):
                self._flag("I1", f"partition fold mismatch for node {nid}")
        # exactly-one-owner sweep over the whole granule space
        for gid in sorted(self.space.ranges):
            claims = gt.owner_claims(gid)
            if len(claims) != 1:
                self._flag("I4", f"final ownership of granule {gid}: {claims}")
        # lost/duplicated updates: trace commit order is the oracle
        expected: dict[int, object] = {}
        for entry in self.committed_user:
            for key, value in entry.data.get("params", {}).get("writes", []):
                expected[int(key)] = value
        actual = gt.final_user_values(self.space)
        for key, value in expected.items():
            if actual.get(key) != value:
                self._flag(
                    "LOST_UPDATE",
                    f"key {key}: last committed write {value!r} but fold yields {actual.get(key)!r}",
                )
        for entry in self.committed_user:
            txn_id = entry.data["txn"]
            if entry.data.get("params", {}).get("writes") and self.user_seen.get(txn_id, 0) != 1:
                self._flag(
                    "LOST_UPDATE",
                    f"user txn {txn_id} has {self.user_seen.get(txn_id, 0)} update records",
                )
        return gt


def audit_trace(trace: Trace) -> tuple[list[Violation], TraceAuditor]:
    auditor = TraceAuditor()
    for entry in trace.entries:
        auditor.feed(entry)
    auditor.finish()
    return auditor.violations, auditor
