"""Audit-side fold of the logs: the system state nobody's cache can dispute.

This fold is deliberately independent of the node runtime's apply path.  It
reads raw log contents (live logs plus tombstone archives), derives each
multi-participant transaction's verdict from durable votes alone, and applies
updates accordingly: a transaction's writes count on *all* its participant
logs exactly when every participant log holds a valid vote.  That makes
ownership well defined at any cut, including the window where decision
records are still propagating.

User rows need one extra notion: writes to the same key land on different
logs over time as its granule migrates.  The fold orders them by the
granule's ownership chain, which is itself recoverable from the logs: each
committed migration writes the same row on the old owner's log (re-pointing
it) and on the new owner's log (the self-claim), so the chain of (log, LSN)
hops is explicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .commit import PENDING, global_verdict, parse_participant, participant_log, scan_txn
from .logstore import (
    COMMIT,
    DECISION,
    GTABLE,
    MTABLE,
    SYSLOG,
    UPDATES,
    USER,
    VOTE,
    LogId,
    LogService,
)
from .systables import GranuleSpace


@dataclass
class AppliedOp:
    lsn: int
    txn_id: str
    key: int
    value: object | None


@dataclass
class GroundTruth:
    mtable: dict[int, str] = field(default_factory=dict)
    partitions: dict[int, dict[int, tuple]] = field(default_factory=dict)
    archived_partitions: dict[int, dict[int, tuple]] = field(default_factory=dict)
    central_gtable: dict[int, tuple] = field(default_factory=dict)  # ablation mode only
    verdicts: dict[str, str] = field(default_factory=dict)
    rosters: dict[str, tuple[LogId, ...]] = field(default_factory=dict)
    gtable_ops: dict[LogId, list[AppliedOp]] = field(default_factory=dict)
    user_ops: dict[LogId, list[AppliedOp]] = field(default_factory=dict)
    live_logs: list[LogId] = field(default_factory=list)
    archived_logs: list[LogId] = field(default_factory=list)
    tails: dict[LogId, int] = field(default_factory=dict)
    membership_deltas: list[tuple[int, int]] = field(default_factory=list)  # (lsn, rows changed)

    @classmethod
    def from_service(cls, service: LogService) -> "GroundTruth":
        gt = cls()
        gt.live_logs = sorted(service.logs)
        gt.archived_logs = sorted(service.archived)
        sources = [(log, service.read_slots(log, 0), False) for log in gt.live_logs]
        sources += [(log, service.read_archived_slots(log), True) for log in gt.archived_logs]

        for log, slots, _ in sources:
            gt.tails[log] = slots[-1][0] if slots else 0
            for _, batch in slots:
                for rec in batch:
                    if rec.kind == VOTE and rec.participants:
                        gt.rosters[rec.txn_id] = tuple(
                            participant_log(parse_participant(t)) for t in rec.participants
                        )
        for txn_id, logs in gt.rosters.items():
            gt.verdicts[txn_id] = global_verdict(scan_txn(service, txn_id, logs))

        for log, slots, archived in sources:
            image: dict = {}
            for lsn, batch in slots:
                voted = {r.txn_id for r in batch if r.kind == VOTE}
                for rec in batch:
                    if rec.kind != UPDATES:
                        continue
                    if rec.txn_id in voted and gt.verdicts.get(rec.txn_id) != COMMIT:
                        continue
                    if log.is_syslog:
                        changed = 0
                        touched_mtable = False
                        for op in rec.ops:
                            if op.table == GTABLE:
                                if op.value is None:
                                    gt.central_gtable.pop(op.key, None)
                                else:
                                    gt.central_gtable[op.key] = op.value
                                continue
                            if op.table != MTABLE:
                                continue
                            touched_mtable = True
                            before = gt.mtable.get(op.key)
                            if op.value is None:
                                gt.mtable.pop(op.key, None)
                            else:
                                gt.mtable[op.key] = op.value
                            if before != op.value:
                                changed += 1
                        if touched_mtable:
                            gt.membership_deltas.append((lsn, changed))
                    else:
                        for op in rec.ops:
                            if op.table == GTABLE:
                                if op.value is None:
                                    image.pop(op.key, None)
                                else:
                                    image[op.key] = op.value
                                gt.gtable_ops.setdefault(log, []).append(
                                    AppliedOp(lsn, rec.txn_id, op.key, op.value)
                                )
                            elif op.table == USER:
                                gt.user_ops.setdefault(log, []).append(
                                    AppliedOp(lsn, rec.txn_id, op.key, op.value)
                                )
            if not log.is_syslog:
                if archived:
                    gt.archived_partitions[log.node_id] = image
                else:
                    gt.partitions[log.node_id] = image
        return gt

    # -- ownership -------------------------------------------------------------

    def owner_claims(self, granule: int) -> list[int]:
        """Nodes whose own live partition names them the owner.  In the
        centralized ablation the shared-log image is the single authority."""
        claims = {
            nid
            for nid, part in self.partitions.items()
            if part.get(granule) is not None and part[granule][2] == nid
        }
        entry = self.central_gtable.get(granule)
        if entry is not None:
            claims.add(entry[2])
        return sorted(claims)

    def all_granules(self) -> set[int]:
        grans: set[int] = set(self.central_gtable)
        for part in list(self.partitions.values()) + list(self.archived_partitions.values()):
            grans.update(part)
        return grans

    def owners(self) -> dict[int, list[int]]:
        return {g: self.owner_claims(g) for g in sorted(self.all_granules())}

    # -- ownership chains and the cross-log user fold ---------------------------

    def ownership_chain(self, granule: int) -> list[tuple[int, LogId, int, int | None]]:
        """Epochs of (owner, log, first LSN of the claim, last LSN before the
        hand-off or None while current).  Raises ValueError on a malformed
        history (no unique install, broken hop)."""
        installs = []
        for log, ops in self.gtable_ops.items():
            for op in ops:
                if op.key != granule or op.value is None:
                    continue
                if op.txn_id not in self.rosters and op.value[2] == log.node_id:
                    installs.append((log, op))
        if not installs:
            raise ValueError(f"granule {granule} has no install record")
        if len(installs) > 1:
            raise ValueError(f"granule {granule} has {len(installs)} install records")

        log, op = installs[0]
        chain: list[tuple[int, LogId, int, int | None]] = []
        owner, cursor = op.value[2], op.lsn
        seen_hops = 0
        while True:
            nxt = next(
                (o for o in self.gtable_ops.get(log, []) if o.key == granule and o.lsn > cursor),
                None,
            )
            if nxt is None:
                chain.append((owner, log, cursor, None))
                return chain
            chain.append((owner, log, cursor, nxt.lsn))
            new_owner = nxt.value[2]
            dst_log = LogId.node(new_owner)
            claim = next(
                (o for o in self.gtable_ops.get(dst_log, []) if o.key == granule and o.txn_id == nxt.txn_id),
                None,
            )
            if claim is None:
                raise ValueError(
                    f"granule {granule}: hop {nxt.txn_id} has no claim on {dst_log}"
                )
            owner, log, cursor = new_owner, dst_log, claim.lsn
            seen_hops += 1
            if seen_hops > 10000:
                raise ValueError(f"granule {granule}: ownership chain does not terminate")

    def final_user_values(self, space: GranuleSpace) -> dict[int, object]:
        """Last committed write per user key, ordered by ownership epochs."""
        by_granule: dict[int, list[AppliedOp]] = {}
        for log, ops in self.user_ops.items():
            for op in ops:
                by_granule.setdefault(space.granule_of(op.key), []).append(op)
        values: dict[int, object] = {}
        for granule in sorted({space.granule_of(k) for ops in self.user_ops.values() for k in [o.key for o in ops]}):
            try:
                chain = self.ownership_chain(granule)
            except ValueError:
                continue
            for owner, log, start, end in chain:
                for op in self.user_ops.get(log, []):
                    if space.granule_of(op.key) != granule:
                        continue
                    if op.lsn <= start:
                        continue
                    if end is not None and op.lsn > end:
                        continue
                    if op.value is None:
                        values.pop(op.key, None)
                    else:
                        values[op.key] = op.value
        return values
