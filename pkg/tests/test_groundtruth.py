import pytest

from marlin.commit import (
    decision_batch,
    log_participant,
    node_participant,
    onephase_batch,
    stage_migration,
    vote_batch,
)
from marlin.groundtruth import GroundTruth
from marlin.logstore import ABORT, COMMIT, GTABLE, MTABLE, SYSLOG, USER, LogId, LogService, WriteOp
from marlin.systables import GranuleSpace

G1, G2, G3 = LogId.node(1), LogId.node(2), LogId.node(3)
SPACE = GranuleSpace({1: (0, 100), 2: (100, 200), 3: (200, 300)})


def bootstrap(nodes):
    """nodes: {nid: [granule ids]}; returns a service with honest history."""
    svc = LogService()
    svc.create_log(SYSLOG)
    for i, nid in enumerate(sorted(nodes)):
        svc.append(SYSLOG, onephase_batch(f"boot-n{nid}", [WriteOp(MTABLE, nid, f"node-{nid}")]), i)
    for nid, grans in sorted(nodes.items()):
        log = LogId.node(nid)
        svc.create_log(log)
        if grans:
            ops = [WriteOp(GTABLE, g, (*SPACE.ranges[g], nid)) for g in grans]
            svc.append(log, onephase_batch(f"boot-g{nid}", ops), 0)
    return svc


def migrate(svc, txn, granule, src, dst, decide=True):
    parts = [node_participant(src), node_participant(dst)]
    ops = stage_migration(granule, SPACE.ranges[granule], dst)
    src_log, dst_log = LogId.node(src), LogId.node(dst)
    svc.append(src_log, vote_batch(txn, ops, parts), svc.tail(src_log))
    svc.append(dst_log, vote_batch(txn, ops, parts), svc.tail(dst_log))
    if decide:
        svc.append_retry(src_log, decision_batch(txn, COMMIT))
        svc.append_retry(dst_log, decision_batch(txn, COMMIT))


def test_initial_state_folds_clean():
    svc = bootstrap({1: [1], 2: [2, 3]})
    gt = GroundTruth.from_service(svc)
    assert gt.mtable == {1: "node-1", 2: "node-2"}
    assert gt.owners() == {1: [1], 2: [2], 3: [2]}
    assert all(delta == 1 for _, delta in gt.membership_deltas)


def test_committed_migration_swaps_exactly_one_owner():
    svc = bootstrap({1: [1], 2: [2, 3], 3: []})
    migrate(svc, "m1", 3, 2, 3)
    gt = GroundTruth.from_service(svc)
    assert gt.owners() == {1: [1], 2: [2], 3: [3]}
    # both sides carry the identical re-pointed row
    assert gt.partitions[2][3] == (200, 300, 3)
    assert gt.partitions[3][3] == (200, 300, 3)


def test_votes_without_decision_records_still_commit_globally():
    # Verdict is a function of durable votes, not of decision propagation.
    svc = bootstrap({1: [1], 2: [2, 3], 3: []})
    migrate(svc, "m1", 3, 2, 3, decide=False)
    gt = GroundTruth.from_service(svc)
    assert gt.verdicts["m1"] == COMMIT
    assert gt.owner_claims(3) == [3]


def test_partial_votes_leave_old_owner_in_place():
    svc = bootstrap({1: [1], 2: [2, 3], 3: []})
    parts = [node_participant(2), node_participant(3)]
    ops = stage_migration(3, SPACE.ranges[3], 3)
    svc.append(G2, vote_batch("m1", ops, parts), svc.tail(G2))
    gt = GroundTruth.from_service(svc)
    assert gt.verdicts["m1"] == "pending"
    assert gt.owner_claims(3) == [2]


def test_fenced_transaction_is_void_everywhere():
    svc = bootstrap({1: [1], 2: [2, 3], 3: []})
    parts = [node_participant(2), node_participant(3)]
    ops = stage_migration(3, SPACE.ranges[3], 3)
    svc.append(G2, vote_batch("m1", ops, parts), svc.tail(G2))
    svc.append_retry(G3, decision_batch("m1", ABORT))
    gt = GroundTruth.from_service(svc)
    assert gt.verdicts["m1"] == ABORT
    assert gt.owner_claims(3) == [2]


def test_recovery_direct_log_append_moves_ownership():
    svc = bootstrap({1: [1], 2: [2], 3: [3]})
    parts = [log_participant(G3), node_participant(2)]
    ops = stage_migration(3, SPACE.ranges[3], 2)
    svc.append(G3, vote_batch("rec", ops, parts), svc.tail(G3))
    svc.append(G2, vote_batch("rec", ops, parts), svc.tail(G2))
    gt = GroundTruth.from_service(svc)
    assert gt.owner_claims(3) == [2]


def test_archived_partition_kept_for_audit():
    svc = bootstrap({1: [1], 2: [2, 3], 3: []})
    migrate(svc, "m1", 3, 2, 3)
    migrate(svc, "m2", 2, 2, 1)
    svc.delete_log(G2)
    gt = GroundTruth.from_service(svc)
    assert gt.archived_partitions[2] == {2: (100, 200, 1), 3: (200, 300, 3)}
    assert gt.owner_claims(2) == [1]


def test_ownership_chain_tracks_hops():
    svc = bootstrap({1: [1], 2: [2, 3], 3: []})
    migrate(svc, "m1", 3, 2, 3)
    migrate(svc, "m2", 3, 3, 1)
    gt = GroundTruth.from_service(svc)
    chain = gt.ownership_chain(3)
    assert [(owner, log.node_id) for owner, log, _, _ in chain] == [(2, 2), (3, 3), (1, 1)]
    assert chain[-1][3] is None


def test_ownership_chain_rejects_duplicate_install():
    svc = bootstrap({1: [1], 2: [2, 3]})
    svc.append(G1, onephase_batch("dup", [WriteOp(GTABLE, 3, (200, 300, 1))]), svc.tail(G1))
    gt = GroundTruth.from_service(svc)
    with pytest.raises(ValueError):
        gt.ownership_chain(3)


def test_final_user_values_follow_ownership_epochs():
    # Oracle: writes in wall order are w1 (on N2), migrate, w2 (on N3); the
    # epoch fold must pick w2 even though the logs replay in any order.
    svc = bootstrap({1: [1], 2: [2, 3], 3: []})
    svc.append(G2, onephase_batch("u1", [WriteOp(USER, 250, "old")]), svc.tail(G2))
    migrate(svc, "m1", 3, 2, 3)
    svc.append(G3, onephase_batch("u2", [WriteOp(USER, 250, "new")]), svc.tail(G3))
    gt = GroundTruth.from_service(svc)
    assert gt.final_user_values(SPACE) == {250: "new"}


def test_final_user_values_migrate_away_and_back():
    svc = bootstrap({1: [1], 2: [2, 3], 3: []})
    svc.append(G2, onephase_batch("u1", [WriteOp(USER, 250, "a")]), svc.tail(G2))
    migrate(svc, "m1", 3, 2, 3)
    svc.append(G3, onephase_batch("u2", [WriteOp(USER, 250, "b")]), svc.tail(G3))
    migrate(svc, "m2", 3, 3, 2)
    svc.append(G2, onephase_batch("u3", [WriteOp(USER, 251, "c")]), svc.tail(G2))
    gt = GroundTruth.from_service(svc)
    assert gt.final_user_values(SPACE) == {250: "b", 251: "c"}


def test_write_outside_ownership_epoch_is_ignored():
    # A write appended to a log that never owned the granule at that point
    # must not count: that is exactly what a disabled guard would produce.
    svc = bootstrap({1: [1], 2: [2, 3], 3: []})
    svc.append(G1, onephase_batch("rogue", [WriteOp(USER, 250, "rogue")]), svc.tail(G1))
    svc.append(G2, onephase_batch("u1", [WriteOp(USER, 250, "good")]), svc.tail(G2))
    gt = GroundTruth.from_service(svc)
    assert gt.final_user_values(SPACE) == {250: "good"}
