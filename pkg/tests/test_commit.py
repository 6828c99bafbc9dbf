import itertools

from marlin.commit import (
    LSN_MISMATCH,
    PENDING,
    UNKNOWN_LOG,
    decision_batch,
    global_verdict,
    log_participant,
    node_participant,
    onephase_batch,
    parse_participant,
    participant_log,
    participant_token,
    resolve_txn,
    scan_txn,
    stage_migration,
    try_log,
    undecided_intents,
    vote_batch,
)
from marlin.logstore import (
    ABORT,
    COMMIT,
    GTABLE,
    SYSLOG,
    LogId,
    LogRecord,
    LogService,
    PageStore,
    WriteOp,
    apply_write_ops,
    visible_ops,
)
from marlin.systables import LsnTracker, MetaCache

G2, G3 = LogId.node(2), LogId.node(3)


def svc_with(*logs):
    svc = LogService()
    for log in logs:
        svc.create_log(log)
    return svc


def test_participant_tokens_round_trip():
    for p in [log_participant(SYSLOG), log_participant(G3), node_participant(2)]:
        assert parse_participant(participant_token(p)) == p
    assert participant_log(node_participant(2)) == G2
    assert participant_log(log_participant(SYSLOG)) == SYSLOG


def test_try_log_steady_state_advances_tracker():
    svc = svc_with(G2)
    tracker, cache = LsnTracker(), MetaCache()
    out = try_log(svc, tracker, cache, G2, onephase_batch("t1", []))
    assert out.decision == COMMIT and out.lsn == 1 and out.target == 0
    assert tracker.get(G2) == 1


def test_try_log_failover_fence_aborts_and_invalidates_cache():
    # A recovered node tracks GLog3 at 1 while the actual tail moved to 2:
    # the append aborts, the tracker resyncs, and the node's own ownership
    # cache entry is invalidated.
    svc = svc_with(G3)
    svc.append(G3, onephase_batch("install", [WriteOp(GTABLE, 3, (200, 300, 3))]), 0)
    svc.append(G3, vote_batch("recover", stage_migration(3, (200, 300), 2), [node_participant(2)]), 1)

    tracker, cache = LsnTracker(), MetaCache()
    tracker.observe(G3, 1)
    cache.gtable[3] = ({3: (200, 300, 3)}, 1)
    out = try_log(svc, tracker, cache, G3, onephase_batch("user", []))
    assert out.decision == ABORT and out.reason == LSN_MISMATCH
    assert tracker.get(G3) == 2
    assert cache.gtable.get(3) is None


def test_try_log_first_contact_initializes_from_tail():
    svc = svc_with(SYSLOG)
    svc.append(SYSLOG, onephase_batch("boot", []), 0)
    tracker, cache = LsnTracker(), MetaCache()
    out = try_log(svc, tracker, cache, SYSLOG, onephase_batch("t", []))
    assert out.decision == COMMIT and out.target == 1 and out.lsn == 2


def test_try_log_unknown_log_clears_membership_cache():
    svc = svc_with()
    tracker, cache = LsnTracker(), MetaCache()
    cache.mtable = ({1: "a"}, 1)
    out = try_log(svc, tracker, cache, G3, onephase_batch("t", []))
    assert out.decision == ABORT and out.reason == UNKNOWN_LOG
    assert cache.mtable is None


def test_racing_try_logs_exactly_one_commit_in_both_orders():
    # Oracle: enumerate both interleavings of two nodes appending to SysLog
    # from the same tracked LSN.
    for order in itertools.permutations([0, 1]):
        svc = svc_with(SYSLOG)
        svc.append(SYSLOG, onephase_batch("boot", []), 0)
        nodes = [(LsnTracker(), MetaCache()) for _ in range(2)]
        for tracker, _ in nodes:
            tracker.observe(SYSLOG, 1)
        outcomes = []
        for i in order:
            tracker, cache = nodes[i]
            outcomes.append(try_log(svc, tracker, cache, SYSLOG, onephase_batch(f"t{i}", [])))
        assert sorted(o.decision for o in outcomes) == [ABORT, COMMIT]
        assert svc.tail(SYSLOG) == 2


# -- verdicts ------------------------------------------------------------------


def recovery_txn(svc, txn="rec1"):
    """Stage a two-participant recovery: direct append on GLog3, node vote on GLog2."""
    parts = [log_participant(G3), node_participant(2)]
    ops = stage_migration(3, (200, 300), 2)
    return txn, parts, ops


def test_verdict_commit_when_all_votes_land():
    svc = svc_with(G2, G3)
    txn, parts, ops = recovery_txn(svc)
    svc.append(G3, vote_batch(txn, ops, parts), 0)
    svc.append(G2, vote_batch(txn, ops, parts), 0)
    assert global_verdict(scan_txn(svc, txn, [G3, G2])) == COMMIT


def test_verdict_pending_with_partial_votes_then_resolved():
    svc = svc_with(G2, G3)
    txn, parts, ops = recovery_txn(svc)
    svc.append(G3, vote_batch(txn, ops, parts), 0)
    assert global_verdict(scan_txn(svc, txn, [G3, G2])) == PENDING
    # resolution fences the voteless log and propagates an abort
    assert resolve_txn(svc, txn, [G3, G2]) == ABORT
    # the fence makes a late vote's conditional append fail
    late = svc.append(G2, vote_batch(txn, ops, parts), 0)
    assert not late.ok
    assert global_verdict(scan_txn(svc, txn, [G3, G2])) == ABORT


def test_resolve_commit_propagates_commit_records():
    svc = svc_with(G2, G3)
    txn, parts, ops = recovery_txn(svc)
    svc.append(G3, vote_batch(txn, ops, parts), 0)
    svc.append(G2, vote_batch(txn, ops, parts), 0)
    assert resolve_txn(svc, txn, [G3, G2]) == COMMIT
    # commit records unlock the parked updates for page-store readers
    for log, nid in [(G3, 3), (G2, 2)]:
        image = apply_write_ops({}, [op for op in visible_ops(svc.read_slots(log, 0)) if op.table == GTABLE])
        assert image[3] == (200, 300, 2)


def test_moot_abort_after_valid_vote_does_not_flip_verdict():
    # A slow resolver may append an abort decision after the vote already
    # landed; the vote stays valid and both parties re-derive commit.
    svc = svc_with(G2, G3)
    txn, parts, ops = recovery_txn(svc)
    svc.append(G3, vote_batch(txn, ops, parts), 0)
    svc.append(G2, vote_batch(txn, ops, parts), 0)
    svc.append_retry(G2, decision_batch(txn, ABORT))
    assert global_verdict(scan_txn(svc, txn, [G3, G2])) == COMMIT
    assert resolve_txn(svc, txn, [G3, G2]) == COMMIT


def test_resolver_and_late_vote_agree_in_every_interleaving():
    # Two-party enumeration: the voter's own append to G2 races the
    # resolver's fencing abort.  Whichever order the storage serializes,
    # both sides must end with the same verdict.
    def voter_step(svc, txn, parts, ops):
        return svc.append(G2, vote_batch(txn, ops, parts), 0)

    def resolver_step(svc, txn):
        return resolve_txn(svc, txn, [G3, G2])

    verdicts = {}
    for order in ["voter_first", "resolver_first"]:
        svc = svc_with(G2, G3)
        txn, parts, ops = recovery_txn(svc)
        svc.append(G3, vote_batch(txn, ops, parts), 0)
        if order == "voter_first":
            vote_result = voter_step(svc, txn, parts, ops)
            verdict = resolver_step(svc, txn)
            assert vote_result.ok
        else:
            verdict = resolver_step(svc, txn)
            vote_result = voter_step(svc, txn, parts, ops)
            assert not vote_result.ok
        # verdict seen by any third party equals the resolver's
        assert global_verdict(scan_txn(svc, txn, [G3, G2])) == verdict
        verdicts[order] = verdict
    assert verdicts == {"voter_first": COMMIT, "resolver_first": ABORT}


def test_undecided_intents_filter_and_lifecycle():
    svc = svc_with(G2, G3)
    txn, parts, ops = recovery_txn(svc)
    svc.append(G3, vote_batch(txn, ops, parts), 0)
    intents = undecided_intents(svc, G3, granules={3})
    assert [t for t, _ in intents] == [txn]
    assert undecided_intents(svc, G3, granules={99}) == []
    resolve_txn(svc, txn, [G3, G2])
    assert undecided_intents(svc, G3, granules={3}) == []


def test_visible_ops_matches_page_store_fold():
    # Dual-route check: the pure fold and the incremental page store must agree.
    svc = svc_with(G2)
    svc.append(G2, onephase_batch("i", [WriteOp(GTABLE, 2, (0, 10, 2))]), 0)
    svc.append(G2, vote_batch("m1", [WriteOp(GTABLE, 2, (0, 10, 3))], [node_participant(2), node_participant(3)]), 1)
    svc.append(G2, onephase_batch("u1", [WriteOp("user", 5, "x")]), 2)
    svc.append(G2, decision_batch("m1", COMMIT), 3)

    store = PageStore(svc)
    store.replay(G2)
    pure_gtable = apply_write_ops({}, [op for op in visible_ops(svc.read_slots(G2, 0)) if op.table == GTABLE])
    pure_user = apply_write_ops({}, [op for op in visible_ops(svc.read_slots(G2, 0)) if op.table == "user"])
    assert store.gtable[2] == pure_gtable == {2: (0, 10, 3)}
    assert store.user[2] == pure_user == {5: "x"}
