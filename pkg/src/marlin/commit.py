"""Commit protocol primitives: fenced appends, vote batches, txn verdicts.

A transaction commits through one conditional append per participant log.
``try_log`` is the per-node step: append at the node's tracked LSN, advance
the tracker on success, or invalidate the matching system-table cache and
resync the tracker on failure.  Single-participant transactions are done
after one such append (one-phase).  Multi-participant transactions append a
vote batch (vote record + updates record in one slot) per participant log and
are committed exactly when every participant log holds a valid vote.

That last point is load-bearing: the verdict of a multi-participant
transaction is a pure function of durable log contents, never of who is still
alive.  A vote is *valid* if no abort decision for the same transaction
precedes it on its log.  Any party can therefore finish an in-doubt
transaction (``resolve_txn``): fence the logs that are still missing votes by
appending an abort decision (which makes a late vote's conditional append
fail), re-read, and propagate the now-determined verdict.  Two resolvers, or
a resolver racing the original coordinator, always derive the same verdict.

Decision records are appended with plain retry (they do not race for a
fencing slot); their role is to unlock parked updates in the page store and
to fence missing votes, not to define the outcome.
"""

from __future__ import annotations

from dataclasses import dataclass

from .logstore import (
    ABORT,
    COMMIT,
    DECISION,
    UPDATES,
    VOTE,
    LogId,
    LogRecord,
    LogService,
    SYSLOG,
    UnknownLog,
    WriteOp,
)
from .systables import LsnTracker, MetaCache

PENDING = "pending"

LSN_MISMATCH = "lsn_mismatch"
UNKNOWN_LOG = "unknown_log"


# -- participants -------------------------------------------------------------


def log_participant(log: LogId) -> tuple:
    return ("log", log)


def node_participant(node_id: int) -> tuple:
    return ("node", node_id)


def participant_token(p: tuple) -> str:
    kind, ref = p
    return f"log:{ref.token()}" if kind == "log" else f"node:{ref}"


def parse_participant(token: str) -> tuple:
    kind, _, ref = token.partition(":")
    if kind == "log":
        return ("log", LogId.from_token(ref))
    return ("node", int(ref))


def participant_log(p: tuple) -> LogId:
    """The log a participant votes on: its own GLog for a node participant."""
    kind, ref = p
    return ref if kind == "log" else LogId.node(ref)


# -- record builders ----------------------------------------------------------


def onephase_batch(txn_id: str, ops) -> tuple[LogRecord, ...]:
    return (LogRecord(txn_id, UPDATES, tuple(ops)),)


def vote_batch(txn_id: str, ops, participants) -> tuple[LogRecord, ...]:
    tokens = tuple(participant_token(p) for p in participants)
    return (
        LogRecord(txn_id, VOTE, participants=tokens),
        LogRecord(txn_id, UPDATES, tuple(ops)),
    )


def decision_batch(txn_id: str, verdict: str) -> tuple[LogRecord, ...]:
    return (LogRecord(txn_id, DECISION, verdict=verdict),)


def stage_migration(granule: int, span: tuple[int, int], dst: int) -> list[WriteOp]:
    """The ownership swap as written to *both* sides: the source's entry is
    re-pointed at dst and the destination claims the granule for itself.  Both
    sides carry the identical row, so either partition answers redirects."""
    lo, hi = span
    return [WriteOp("gtable", granule, (lo, hi, dst))]


# -- try_log ------------------------------------------------------------------


@dataclass(frozen=True)
class TryLogOutcome:
    decision: str  # COMMIT or ABORT
    reason: str | None
    lsn: int  # new tail on success, observed tail on failure
    target: int  # the fenced LSN this append was conditioned on


def try_log(
    service: LogService,
    tracker: LsnTracker,
    cache: MetaCache,
    log: LogId,
    records,
    on_cache_clear=None,
) -> TryLogOutcome:
    """One fenced append using the node's tracked LSN for ``log``.

    First contact with a log initializes the tracker from the current tail, so
    a fresh coordinator does not spuriously abort against pre-existing history.
    On failure the cached table image governed by ``log`` is invalidated and
    the tracker resyncs to the returned tail.
    """
    target = tracker.get(log)
    if target is None:
        try:
            target = service.tail(log)
        except UnknownLog:
            entry = cache.clear_for_log(SYSLOG)
            if on_cache_clear:
                on_cache_clear(entry)
            return TryLogOutcome(ABORT, UNKNOWN_LOG, 0, 0)
        tracker.observe(log, target)
    try:
        result = service.append(log, records, target)
    except UnknownLog:
        entry = cache.clear_for_log(SYSLOG)
        if on_cache_clear:
            on_cache_clear(entry)
        tracker.forget(log)
        return TryLogOutcome(ABORT, UNKNOWN_LOG, 0, target)
    if result.ok:
        tracker.observe(log, result.lsn)
        return TryLogOutcome(COMMIT, None, result.lsn, target)
    entry = cache.clear_for_log(log)
    if on_cache_clear:
        on_cache_clear(entry)
    tracker.observe(log, result.lsn)
    return TryLogOutcome(ABORT, LSN_MISMATCH, result.lsn, target)


# -- verdicts -----------------------------------------------------------------


@dataclass
class TxnLogStatus:
    vote_lsn: int | None = None
    vote_valid: bool = False  # vote present and not preceded by an abort decision
    fenced: bool = False  # abort decision present with no valid vote before it
    commit_recorded: bool = False
    abort_recorded: bool = False
    ops: tuple[WriteOp, ...] = ()


def txn_status_on_log(slots, txn_id: str) -> TxnLogStatus:
    status = TxnLogStatus()
    for lsn, batch in slots:
        for rec in batch:
            if rec.txn_id != txn_id:
                continue
            if rec.kind == VOTE and status.vote_lsn is None:
                status.vote_lsn = lsn
                status.vote_valid = not status.fenced
            elif rec.kind == UPDATES:
                status.ops = rec.ops
            elif rec.kind == DECISION:
                if rec.verdict == COMMIT:
                    status.commit_recorded = True
                elif rec.verdict == ABORT:
                    status.abort_recorded = True
                    if not status.vote_valid:
                        status.fenced = True
    return status


def _slots_for(service: LogService, log: LogId):
    if service.exists(log):
        return service.read_slots(log, 0)
    if log in service.archived:
        return service.read_archived_slots(log)
    return None


def scan_txn(service: LogService, txn_id: str, logs) -> dict[LogId, TxnLogStatus]:
    out = {}
    for log in logs:
        slots = _slots_for(service, log)
        if slots is None:
            # the log is gone and was never archived: treat as permanently voteless
            out[log] = TxnLogStatus(fenced=True)
        else:
            out[log] = txn_status_on_log(slots, txn_id)
    return out


def global_verdict(status_by_log: dict[LogId, TxnLogStatus]) -> str:
    """Commit iff every participant log holds a valid vote; abort once any
    log is fenced; pending otherwise."""
    if all(s.vote_valid for s in status_by_log.values()):
        return COMMIT
    if any(s.fenced for s in status_by_log.values()):
        return ABORT
    return PENDING


def resolve_txn(service: LogService, txn_id: str, participant_logs) -> str:
    """Drive an in-doubt transaction to a durable verdict; idempotent, safe to
    race with the original coordinator or other resolvers."""
    status = scan_txn(service, txn_id, participant_logs)
    verdict = global_verdict(status)
    if verdict == PENDING:
        for log, st in status.items():
            if st.vote_lsn is None and not st.fenced and service.exists(log):
                service.append_retry(log, decision_batch(txn_id, ABORT))
        status = scan_txn(service, txn_id, participant_logs)
        verdict = global_verdict(status)
        if verdict == PENDING:
            # every voteless log is now fenced, so this cannot remain pending
            verdict = ABORT
    for log, st in status.items():
        if not service.exists(log):
            continue
        if verdict == COMMIT and not st.commit_recorded:
            service.append_retry(log, decision_batch(txn_id, verdict))
        elif verdict == ABORT and not st.abort_recorded:
            service.append_retry(log, decision_batch(txn_id, verdict))
    return verdict


def undecided_intents(service: LogService, log: LogId, granules=None) -> list[tuple[str, list[LogId]]]:
    """Valid votes on ``log`` whose transactions have no determined verdict
    yet, optionally filtered to those staging ownership rows for ``granules``.
    A reader about to claim state off this log must resolve these first."""
    slots = _slots_for(service, log)
    if slots is None:
        return []
    candidates: dict[str, tuple[WriteOp, ...]] = {}
    parts: dict[str, tuple[str, ...]] = {}
    for _, batch in slots:
        for rec in batch:
            if rec.kind == VOTE:
                parts[rec.txn_id] = rec.participants
            elif rec.kind == UPDATES and rec.txn_id in parts:
                candidates[rec.txn_id] = rec.ops
    out = []
    for txn_id, tokens in parts.items():
        ops = candidates.get(txn_id, ())
        if granules is not None and not any(
            op.table == "gtable" and op.key in granules for op in ops
        ):
            continue
        plogs = [participant_log(parse_participant(t)) for t in tokens]
        if global_verdict(scan_txn(service, txn_id, plogs)) == PENDING:
            out.append((txn_id, plogs))
    return out
