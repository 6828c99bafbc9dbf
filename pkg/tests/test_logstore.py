import itertools
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marlin.logstore import (
    ABORT,
    COMMIT,
    DECISION,
    GTABLE,
    MTABLE,
    SYSLOG,
    UPDATES,
    USER,
    VOTE,
    AppendResult,
    FutureLsn,
    LogId,
    LogLifecycleError,
    LogRecord,
    LogService,
    PageStore,
    UnknownLog,
    WriteOp,
    apply_write_ops,
    refold_log_file,
)


def rec(txn, ops=(), kind=UPDATES, verdict=None, parts=()):
    return LogRecord(txn_id=txn, kind=kind, ops=tuple(ops), verdict=verdict, participants=tuple(parts))


def fresh(log=SYSLOG):
    svc = LogService()
    svc.create_log(log)
    return svc


def test_append_empty_log_base_case():
    svc = fresh()
    result = svc.append(SYSLOG, [rec("t1")], 0)
    assert result == AppendResult(True, 1)
    assert svc.tail(SYSLOG) == 1


def test_append_failure_returns_current_tail_and_mutates_nothing():
    svc = fresh()
    svc.append(SYSLOG, [rec("t1")], 0)
    before = svc.read(SYSLOG, 0)
    result = svc.append(SYSLOG, [rec("t2")], 0)
    assert result == AppendResult(False, 1)
    assert svc.read(SYSLOG, 0) == before


def test_concurrent_appends_same_target_exactly_one_wins():
    # Oracle: brute-force both serial orders of two appends targeting tail 5.
    # Both orders must yield the same outcome set: one Success(6), one Failure(6).
    for order in itertools.permutations(["a", "b"]):
        svc = fresh()
        for i in range(5):
            svc.append(SYSLOG, [rec(f"fill{i}")], i)
        outcomes = {}
        for name in order:
            outcomes[name] = svc.append(SYSLOG, [rec(name)], 5)
        assert sorted((r.ok, r.lsn) for r in outcomes.values()) == [(False, 6), (True, 6)]


def test_scaleout_membership_append_lands_at_lsn_3():
    svc = fresh()
    svc.append(SYSLOG, [rec("boot1", [WriteOp(MTABLE, 1, "n1:0")])], 0)
    svc.append(SYSLOG, [rec("boot2", [WriteOp(MTABLE, 2, "n2:0")])], 1)
    result = svc.append(SYSLOG, [rec("add3", [WriteOp(MTABLE, 3, "n3:0")])], 2)
    assert result == AppendResult(True, 3)


def test_read_empty_and_at_tail():
    svc = fresh()
    assert svc.read(SYSLOG, 0) == []
    svc.append(SYSLOG, [rec("t1")], 0)
    assert svc.read(SYSLOG, 1) == []


def test_read_from_offset_returns_suffix_in_order():
    svc = fresh()
    records = [rec(f"t{i}") for i in range(3)]
    for i, r in enumerate(records):
        svc.append(SYSLOG, [r], i)
    assert svc.read(SYSLOG, 1) == records[1:]


def test_read_past_tail_is_future_lsn():
    svc = fresh()
    with pytest.raises(FutureLsn):
        svc.read_slots(SYSLOG, 1)


def test_lifecycle_create_delete_and_unknown_log():
    svc = LogService()
    glog = LogId.node(3)
    svc.create_log(glog)
    assert svc.tail(glog) == 0
    with pytest.raises(LogLifecycleError):
        svc.create_log(glog)
    svc.delete_log(glog)
    with pytest.raises(UnknownLog):
        svc.append(glog, [rec("t")], 0)
    with pytest.raises(LogLifecycleError):
        svc.delete_log(glog)
    # tombstone still readable for audits
    assert svc.read_archived_slots(glog) == []


def test_append_retry_lands_despite_stale_target():
    svc = fresh()
    svc.append(SYSLOG, [rec("t1")], 0)
    lsn = svc.append_retry(SYSLOG, [rec("d1", kind=DECISION, verdict=COMMIT)])
    assert lsn == 2


def test_validate_checks_tail_without_mutation():
    svc = fresh()
    svc.append(SYSLOG, [rec("t1")], 0)
    assert svc.validate(SYSLOG, 1)
    assert not svc.validate(SYSLOG, 0)
    assert svc.tail(SYSLOG) == 1


@given(st.lists(st.integers(0, 3), min_size=0, max_size=12))
@settings(max_examples=200, deadline=None)
def test_cas_history_is_gap_free_with_one_winner_per_slot(targets):
    # Property: whatever targets callers supply, the successful appends form
    # a dense LSN sequence 1..tail with exactly one success per slot.
    svc = fresh()
    successes = []
    for i, t in enumerate(targets):
        result = svc.append(SYSLOG, [rec(f"t{i}")], t)
        if result.ok:
            successes.append(result.lsn)
    assert successes == list(range(1, svc.tail(SYSLOG) + 1))


@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), max_size=10))
@settings(max_examples=100, deadline=None)
def test_failed_append_leaves_log_byte_identical(ops):
    svc = fresh()
    for i, (key, _) in enumerate(ops):
        svc.append(SYSLOG, [rec(f"w{i}", [WriteOp(USER, key, i)])], i)
    snapshot = svc.read(SYSLOG, 0)
    bad = svc.append(SYSLOG, [rec("stale")], svc.tail(SYSLOG) + 1)
    assert not bad.ok
    assert svc.read(SYSLOG, 0) == snapshot


def test_threaded_appends_serialize_per_log():
    # Smoke-scale version of the soak acceptance run: 4 threads race CAS
    # appends on one log until 500 slots land.
    svc = fresh()
    wins: dict[int, list[int]] = {i: [] for i in range(4)}
    total = 500

    def worker(wid):
        while True:
            tail = svc.tail(SYSLOG)
            if tail >= total:
                return
            result = svc.append(SYSLOG, [rec(f"w{wid}")], tail)
            if result.ok:
                wins[wid].append(result.lsn)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    landed = sorted(lsn for per in wins.values() for lsn in per)
    assert landed == list(range(1, svc.tail(SYSLOG) + 1))


def test_unconditional_flag_breaks_the_fence():
    svc = LogService(unconditional=True)
    svc.create_log(SYSLOG)
    assert svc.append(SYSLOG, [rec("a")], 0).ok
    assert svc.append(SYSLOG, [rec("b")], 0).ok  # stale target still lands
    assert svc.tail(SYSLOG) == 2


# -- apply_write_ops fold ----------------------------------------------------


def test_apply_write_ops_empty_is_identity():
    image = {1: "x"}
    assert apply_write_ops(image, []) == {1: "x"}


def test_apply_write_ops_tombstone_and_last_writer_wins():
    image = {}
    apply_write_ops(
        image,
        [
            WriteOp(MTABLE, 3, "a"),
            WriteOp(MTABLE, 3, "b"),
            WriteOp(MTABLE, 4, "c"),
            WriteOp(MTABLE, 4, None),
        ],
    )
    assert image == {3: "b"}


# -- page store ----------------------------------------------------------------


def make_gtable_store():
    svc = LogService()
    glog = LogId.node(2)
    svc.create_log(glog)
    return svc, PageStore(svc), glog


def test_get_page_absent_key():
    svc, store, glog = make_gtable_store()
    assert store.get_page(GTABLE, 2, 99, 0) is None


def test_get_page_after_k_updates_returns_kth_value():
    # Oracle: fold of the log by hand.
    svc, store, glog = make_gtable_store()
    k = 5
    for i in range(k):
        svc.append(glog, [rec(f"t{i}", [WriteOp(USER, 7, f"v{i}")])], i)
    assert store.get_page(USER, 2, 7, k) == f"v{k-1}"


def test_get_page_reflects_committed_migration_owner():
    svc, store, glog = make_gtable_store()
    svc.append(glog, [rec("install", [WriteOp(GTABLE, 3, (200, 300, 2))])], 0)
    batch = [
        rec("mig", kind=VOTE, parts=("g2", "g3")),
        rec("mig", ops=[WriteOp(GTABLE, 3, (200, 300, 3))]),
    ]
    svc.append(glog, batch, 1)
    # votes logged, no decision: still the old owner
    assert store.get_page(GTABLE, 2, 3, 2) == (200, 300, 2)
    svc.append(glog, [rec("mig", kind=DECISION, verdict=COMMIT)], 2)
    assert store.get_page(GTABLE, 2, 3, 3) == (200, 300, 3)


def test_vote_batch_with_abort_decision_stays_invisible():
    svc, store, glog = make_gtable_store()
    svc.append(glog, [rec("install", [WriteOp(GTABLE, 3, (200, 300, 2))])], 0)
    batch = [rec("mig", kind=VOTE), rec("mig", ops=[WriteOp(GTABLE, 3, (200, 300, 3))])]
    svc.append(glog, batch, 1)
    svc.append(glog, [rec("mig", kind=DECISION, verdict=ABORT)], 2)
    assert store.get_page(GTABLE, 2, 3, 3) == (200, 300, 2)


def test_get_page_future_lsn_rejected():
    svc, store, glog = make_gtable_store()
    with pytest.raises(FutureLsn):
        store.get_page(GTABLE, 2, 3, 1)


def test_replay_determinism_across_schedules():
    # Two stores fed the same logs through different replay schedules
    # converge to identical images once applied LSNs match.
    svc = LogService()
    a, b = LogId.node(1), LogId.node(2)
    svc.create_log(a)
    svc.create_log(b)
    svc.append(a, [rec("i1", [WriteOp(GTABLE, 1, (0, 10, 1)), WriteOp(USER, 3, "x")])], 0)
    svc.append(b, [rec("i2", [WriteOp(GTABLE, 2, (10, 20, 2))])], 0)
    svc.append(a, [rec("u1", [WriteOp(USER, 3, "y")])], 1)

    s1, s2 = PageStore(svc), PageStore(svc)
    s1.replay(a)
    s1.replay(b)
    s2.replay(b, 1)
    s2.replay(a, 1)
    s2.replay(a)
    for s in (s1, s2):
        assert s.gtable[1] == {1: (0, 10, 1)}
        assert s.gtable[2] == {2: (10, 20, 2)}
        assert s.user[1] == {3: "y"}


def test_archive_log_freezes_partition_image():
    svc, store, glog = make_gtable_store()
    svc.append(glog, [rec("install", [WriteOp(GTABLE, 3, (200, 300, 2))])], 0)
    store.archive_log(glog)
    svc.delete_log(glog)
    assert store.archived_gtable[2] == {3: (200, 300, 2)}


# -- file backing ---------------------------------------------------------------


def test_file_backed_log_refolds_to_same_records(tmp_path):
    svc = LogService(log_dir=str(tmp_path))
    svc.create_log(SYSLOG)
    r1 = rec("t1", [WriteOp(MTABLE, 1, "addr")])
    r2 = rec("t2", kind=DECISION, verdict=COMMIT)
    svc.append(SYSLOG, [r1], 0)
    svc.append(SYSLOG, [r2], 1)
    slots = refold_log_file(str(tmp_path / "sys.log"))
    assert slots == [(1, (r1,)), (2, (r2,))]


def test_refold_rejects_corrupt_framing(tmp_path):
    svc = LogService(log_dir=str(tmp_path))
    svc.create_log(SYSLOG)
    svc.append(SYSLOG, [rec("t1")], 0)
    path = tmp_path / "sys.log"
    with open(path, "ab") as f:
        f.write(b"junk")
    with pytest.raises(ValueError):
        refold_log_file(str(path))
