"""Deterministic cluster simulation: one event loop, simulated messages,
fault injection, ring heartbeating, and failover orchestration.

Everything is driven by a single (tick, seq) ordered heap; identical seeds
and scenarios produce byte-identical traces.  Messages are reliable unless a
partition or a dead endpoint drops them; isolated nodes also lose storage
access (an isolated node behaves like one suffering a long stall).  Crashes
erase all volatile node state; a recovering node re-reads its tracker and
ownership view from its log tail, after first closing out any in-doubt
transactions parked there.

Failure detection is a heartbeat ring over the cached membership table: each
node pings its k successors every period, and a configurable number of
consecutive misses triggers failover.  Detection is allowed to be wrong;
safety never depends on it, only on the log fences.  Before acting, the
detector re-probes the suspect, recovers every granule the suspect owns,
then removes it from the membership table and deletes its log.

The threaded soak harness at the bottom bypasses the event loop entirely and
races real threads against the log service's conditional append.
"""

from __future__ import annotations

import heapq
import random
import threading
from dataclasses import dataclass, field

from . import commit as cp
from .logstore import (
    COMMIT,
    GTABLE,
    MTABLE,
    SYSLOG,
    LogId,
    LogRecord,
    LogService,
    PageStore,
    UnknownLog,
    WriteOp,
)
from .node import ABORTED, COMMITTED, LSN_MISMATCH, LOCK_CONFLICT, WRONG_NODE, NodeRuntime, UserTxn
from .systables import GranuleSpace, self_owned
from .trace import Trace
from .txns import (
    AddNodeTxn,
    DeleteNodeTxn,
    MigrationTxn,
    RecoveryMigrationTxn,
    ScanGTableTxn,
)

RETRYABLE = {LOCK_CONFLICT, LSN_MISMATCH, "stale_snapshot", "participant_unreachable", "guard_failed"}


@dataclass
class SimConfig:
    seed: int = 0
    latency: tuple[int, int] = (1, 3)
    storage_latency: int = 1
    exec_ticks: int = 2
    request_timeout: int = 40
    heartbeat_period: int = 5
    heartbeat_k: int = 1
    miss_threshold: int = 3
    probe_timeout: int = 6
    vote_timeout: int = 10
    decision_timeout: int = 30
    retry_limit: int = 8
    backoff_base: int = 2
    recovery_policy: str = "detector"  # or "round_robin"
    heartbeats: bool = True
    warmup_after_migration: bool = False
    disable_guard: bool = False
    unconditional_append: bool = False
    centralized_gtable: bool = False
    tick_budget: int = 50_000


class Cluster:
    """The wired-together world: storage, nodes, network, clients, and clock."""

    def __init__(self, config: SimConfig, scenario: dict):
        self.config = config
        self.scenario = scenario
        self.rng = random.Random(config.seed)
        self.now = 0
        self._seq = 0
        self._heap: list = []
        self._work_queued = 0
        self.active: set[str] = set()
        self.trace = Trace()
        self.current_actor: int | None = None

        self.space = GranuleSpace({int(g): tuple(span) for g, span in scenario["granules"].items()})
        self.space.validate_partition()
        self.service = LogService(unconditional=config.unconditional_append)
        self.service.on_append = self._on_append
        self.pagestore = PageStore(self.service)
        self.nodes: dict[int, NodeRuntime] = {}
        self.isolated: set[int] = set()
        self.routes: dict[int, int] = {}  # client-side granule -> node hints
        self.txn_counter = 0
        self.client_counter = 0
        self._token_counter = 0
        self.suspicions: dict[tuple[int, int], FailoverOrchestrator] = {}
        self.pending_report: dict = {}

        self.trace.emit(
            0, "setup",
            granules={str(g): list(span) for g, span in self.space.ranges.items()},
            nodes={str(n): sorted(int(g) for g in gids) for n, gids in scenario["nodes"].items()},
            seed=config.seed,
            flags={
                "disable_guard": config.disable_guard,
                "unconditional_append": config.unconditional_append,
                "centralized_gtable": config.centralized_gtable,
            },
        )
        self._bootstrap(scenario)
        for action in scenario.get("actions", []):
            self.post_at(action["at"], self._run_action, dict(action))

    # -- bootstrap ---------------------------------------------------------------

    def _bootstrap(self, scenario) -> None:
        self.service.create_log(SYSLOG)
        initial = {int(n): [int(g) for g in gids] for n, gids in scenario["nodes"].items()}
        # a node's log exists before its membership row, as in a live join
        for nid in sorted(initial):
            log = LogId.node(nid)
            self.service.create_log(log)
            self.trace.emit(0, "log_created", log=log.token(), actor=None)
            ops = [WriteOp(MTABLE, nid, f"node-{nid}")]
            self.service.append(SYSLOG, cp.onephase_batch(f"boot-n{nid}", ops), self.service.tail(SYSLOG))
        for nid in sorted(initial):
            log = LogId.node(nid)
            gops = [
                WriteOp(GTABLE, g, (*self.space.ranges[g], nid)) for g in sorted(initial[nid])
            ]
            if gops:
                target = SYSLOG if self.config.centralized_gtable else log
                self.service.append(target, cp.onephase_batch(f"boot-g{nid}", gops), self.service.tail(target))
        sys_tail = self.service.tail(SYSLOG)
        mtable = self.pagestore.mtable_image(sys_tail)
        for nid in sorted(initial):
            node = NodeRuntime(nid, f"node-{nid}", self)
            node.tracker.observe(SYSLOG, sys_tail)
            node.cache.mtable = (dict(mtable), sys_tail)
            tail = self.service.tail(node.log)
            node.tracker.observe(node.log, tail)
            node.cache.gtable[nid] = (self.pagestore.gtable_partition(nid, tail), tail)
            self.nodes[nid] = node
            if self.config.heartbeats:
                self.post(self.config.heartbeat_period, self._heartbeat_tick, nid, kind="timer")
        for nid, gids in initial.items():
            for g in gids:
                self.routes[g] = nid

    # -- scheduling ----------------------------------------------------------------

    def post(self, delay: int, fn, *args, kind: str = "work", actor: int | None = None) -> None:
        self.post_at(self.now + max(0, delay), fn, *args, kind=kind, actor=actor)

    def post_at(self, tick: int, fn, *args, kind: str = "work", actor: int | None = None) -> None:
        if kind == "work":
            self._work_queued += 1
        heapq.heappush(self._heap, (tick, self._seq, kind, actor, fn, args))
        self._seq += 1

    def backoff(self, attempt: int) -> int:
        base = self.config.backoff_base
        return min(base ** attempt, 64) + self.rng.randint(0, 1)

    def run(self) -> dict:
        budget = self.scenario.get("tick_budget", self.config.tick_budget)
        exhausted = False
        while self._heap:
            if self._work_queued == 0 and not self.active:
                break
            tick, _, kind, actor, fn, args = heapq.heappop(self._heap)
            if tick > budget:
                exhausted = True
                break
            if kind == "work":
                self._work_queued -= 1
            self.now = tick
            self.current_actor = actor
            fn(*args)
            self.current_actor = None
        pending = sorted(self.active)
        self.pending_report = {
            "quiescent": not exhausted and not pending,
            "pending": pending,
            "queued_work": self._work_queued if exhausted else 0,
            "final_tick": self.now,
        }
        self.trace.emit(self.now, "end", **self.pending_report)
        return self.pending_report

    # -- network -------------------------------------------------------------------

    def net_delay(self) -> int:
        lo, hi = self.config.latency
        return lo if lo == hi else self.rng.randint(lo, hi)

    def can_reach(self, src: int | None, dst: int) -> bool:
        node = self.nodes.get(dst)
        if node is None or not node.alive:
            return False
        if src is not None and ((src in self.isolated) != (dst in self.isolated)):
            return False
        return True

    def storage_ok(self, nid: int) -> bool:
        return nid not in self.isolated

    def storage_step(self, nid: int, fn, *args) -> None:
        def fire():
            node = self.nodes.get(nid)
            ok = node is not None and node.alive and self.storage_ok(nid)
            fn(ok, *args)

        self.post(self.config.storage_latency, fire, actor=nid)

    def rpc(self, src: int, dst: int, method: str, payload: dict, on_reply, on_timeout=None, timeout=None):
        state = {"done": False}

        def deliver_request():
            if not self.can_reach(src, dst):
                return
            node = self.nodes[dst]
            if node.decommissioned and method != "ping":
                return
            if method == "ping":
                reply = {"pong": True}
            elif method == "read_entries":
                part = node.own_partition()
                reply = {"entries": {g: part.get(g) for g in payload["granules"]}}
            elif method == "vote":
                reply = node.handle_vote_request(
                    payload["txn"], payload["ops"], payload["participants"],
                    payload["lock_granules"], payload["expect_owner"],
                )
            elif method == "scan":
                reply = node.handle_scan_request()
            elif method == "recover_request":
                self.launch_recovery(dst, payload["granules"], payload["src"])
                reply = {"ok": True}
            else:
                raise ValueError(f"unknown rpc {method}")

            def deliver_reply():
                if state["done"] or not self.can_reach(dst, src):
                    return
                state["done"] = True
                on_reply(reply)

            self.post(self.net_delay(), deliver_reply, actor=src)

        self.post(self.net_delay(), deliver_request, actor=dst)
        if on_timeout is not None:
            def fire_timeout():
                if not state["done"]:
                    state["done"] = True
                    on_timeout()

            self.post(timeout or self.config.vote_timeout, fire_timeout, kind="timer")

    def send_decision(self, dst: int, txn_id: str, verdict: str, tail_lsn: int) -> None:
        def deliver():
            if self.can_reach(None, dst) and dst not in self.isolated:
                self.nodes[dst].handle_decision(txn_id, verdict, tail_lsn)

        self.post(self.net_delay(), deliver, actor=dst)

    def post_decision_check(self, nid: int, txn_id: str, participant_logs) -> None:
        """Participant-side termination: a node holding a yes-vote whose
        decision never arrives finishes the transaction from the logs."""

        def check():
            node = self.nodes.get(nid)
            if node is None or not node.alive or txn_id not in node.vote_holds:
                return
            if not self.storage_ok(nid):
                self.post(self.config.decision_timeout, check, kind="timer")
                return
            verdict = cp.resolve_txn(self.service, txn_id, participant_logs)
            try:
                tail = self.service.tail(node.log)
            except UnknownLog:
                tail = 0
            node.handle_decision(txn_id, verdict, tail)

        self.post(self.config.decision_timeout, check, kind="timer")

    # -- tracing -------------------------------------------------------------------

    def _on_append(self, log, lsn, batch):
        self.trace.emit(
            self.now, "append",
            log=log.token(), lsn=lsn, actor=self.current_actor,
            records=[r.to_json() for r in batch],
        )

    def trace_txn(self, txn_id, kind, node, status, reason, params=None, landings=None):
        data = {"txn": txn_id, "kind": kind, "node": node, "result": status, "reason": reason}
        if params:
            data["params"] = params
        if landings:
            data["landings"] = {log: list(t) for log, t in landings.items()}
        self.trace.emit(self.now, "txn", **data)

    def trace_cache_clear(self, node, entry):
        self.trace.emit(self.now, "cache_clear", node=node, entry=entry)

    def trace_log_deleted(self, log, actor):
        self.trace.emit(self.now, "log_deleted", log=log.token(), actor=actor)

    # -- transaction launchers -------------------------------------------------------

    def next_txn_id(self, prefix: str) -> str:
        self.txn_counter += 1
        return f"{prefix}{self.txn_counter}"

    def _track(self, coordinator):
        token = f"txn:{coordinator.txn_id}"
        self.active.add(token)
        inner = coordinator.on_done

        def done(result):
            self.active.discard(token)
            if inner is not None:
                inner(result)

        coordinator.on_done = done
        coordinator.start()
        return coordinator

    def launch_with_retry(self, make, attempts: int = 0, on_final=None):
        """Launch a coordinator; relaunch under a fresh txn id on retryable aborts."""
        self._token_counter += 1
        token = f"retry:{self._token_counter}"
        self.active.add(token)

        def done(result):
            self.active.discard(token)
            if result.committed or result.reason not in RETRYABLE or attempts >= self.config.retry_limit:
                if on_final is not None:
                    on_final(result)
                return
            self.post(self.backoff(attempts + 1), self.launch_with_retry, make, attempts + 1, on_final)

        self._track(make(done))

    def launch_recovery(self, dst: int, granules, src: int, on_final=None):
        def make(done):
            return RecoveryMigrationTxn(
                self.nodes[dst], self, self.next_txn_id("r"),
                granules=tuple(granules), src=src, on_done=done,
            )

        self.launch_with_retry(make, on_final=on_final)

    # -- scripted actions --------------------------------------------------------------

    def _run_action(self, action: dict) -> None:
        op = action["op"]
        if op == "add_node":
            nid = int(action["node"])
            log = LogId.node(nid)
            self.service.create_log(log)
            self.trace.emit(self.now, "log_created", log=log.token(), actor=nid)
            node = NodeRuntime(nid, f"node-{nid}", self)
            node.tracker.observe(log, 0)
            node.cache.gtable[nid] = ({}, 0)
            self.nodes[nid] = node

            def after(result):
                if result.committed and self.config.heartbeats:
                    self.post(self.config.heartbeat_period, self._heartbeat_tick, nid, kind="timer")

            self._track(AddNodeTxn(node, self, self.next_txn_id("a"), on_done=after))
        elif op == "remove_node":
            nid = int(action["node"])
            executor = self.nodes[int(action.get("by", nid))]
            self._track(DeleteNodeTxn(executor, self, self.next_txn_id("d"), target=nid))
        elif op == "migrate":
            dst = int(action["dst"])

            def make(done, action=action, dst=dst):
                return MigrationTxn(
                    self.nodes[dst], self, self.next_txn_id("m"),
                    granules=tuple(int(g) for g in action["granules"]),
                    src=int(action["src"]), on_done=done,
                )

            self.launch_with_retry(make)
        elif op == "recover_migrate":
            self.launch_recovery(int(action["dst"]), [int(g) for g in action["granules"]], int(action["src"]))
        elif op == "scan":
            nid = int(action["node"])

            def make_scan(done, nid=nid):
                return ScanGTableTxn(self.nodes[nid], self, self.next_txn_id("s"), on_done=done)

            self.launch_with_retry(make_scan)
        elif op == "crash":
            nid = int(action["node"])
            self.nodes[nid].crash()
            self.trace.emit(self.now, "crash", node=nid)
        elif op == "recover":
            nid = int(action["node"])
            self.nodes[nid].recover()
            self.trace.emit(self.now, "recover", node=nid)
            if self.config.heartbeats and not self.nodes[nid].decommissioned:
                self.post(self.config.heartbeat_period, self._heartbeat_tick, nid, kind="timer")
        elif op == "partition":
            self.isolated = {int(n) for n in action["isolate"]}
            self.trace.emit(self.now, "partition", isolated=sorted(self.isolated))
        elif op == "heal":
            self.isolated = set()
            self.trace.emit(self.now, "heal")
        elif op == "user":
            self.issue_client_txn(
                int(action["node"]),
                [int(k) for k in action.get("reads", [])],
                [(int(k), v) for k, v in action.get("writes", [])],
            )
        elif op == "load":
            self._start_load(action)
        else:
            raise ValueError(f"unknown action {op}")

    # -- clients --------------------------------------------------------------------

    def issue_client_txn(self, target: int, reads, writes, attempts=0, redirects=0, cid=None):
        if cid is None:
            self.client_counter += 1
            cid = f"c{self.client_counter}"
        token = f"client:{cid}"
        self.active.add(token)
        txn_id = self.next_txn_id("u")
        txn = UserTxn(txn_id, list(reads), list(writes))
        state = {"done": False}

        def settle(result):
            if state["done"]:
                return
            state["done"] = True
            self.active.discard(token)
            if result is not None and result.committed:
                self.trace.emit(
                    self.now, "client", client=cid, result=COMMITTED,
                    attempts=attempts + 1, redirects=redirects, node=target, txn=txn_id,
                )
                return
            reason = result.reason if result is not None else "timeout"
            next_target = target
            extra_redirects = redirects
            if result is not None and result.reason == WRONG_NODE:
                extra_redirects += 1
                if result.owner_hint is not None:
                    next_target = result.owner_hint
                    for k in list(reads) + [k for k, _ in writes]:
                        self.routes[self.space.granule_of(k)] = next_target
                else:
                    alive = [n for n, node in sorted(self.nodes.items()) if node.alive and not node.decommissioned]
                    next_target = alive[0] if alive else target
            if attempts + 1 > self.config.retry_limit:
                self.trace.emit(
                    self.now, "client", client=cid, result="gave_up", reason=reason,
                    attempts=attempts + 1, redirects=extra_redirects, node=target, txn=txn_id,
                )
                return
            self.post(
                self.backoff(attempts + 1), self.issue_client_txn,
                next_target, reads, writes, attempts + 1, extra_redirects, cid,
            )

        def deliver_request():
            if not self.can_reach(None, target) or target in self.isolated:
                return  # request lost; the deadline timer settles it
            node = self.nodes[target]
            early = node.user_txn_begin(txn)
            if early is not None:
                self.trace_txn(
                    txn_id, "user", target, ABORTED, early.reason,
                    params={"writes": list(writes), "reads": list(reads)},
                )
                self.post(self.net_delay(), settle, early)
                return

            def do_commit():
                if state["done"] or not self.nodes[target].alive:
                    return
                if not self.storage_ok(target):
                    node.user_txn_abort(txn_id)
                    return
                result = node.user_txn_commit(txn_id)
                if target not in self.isolated:
                    self.post(self.net_delay(), settle, result)

            self.post(self.config.exec_ticks + self.config.storage_latency, do_commit, actor=target)

        self.post(self.net_delay(), deliver_request, actor=target)
        self.post(self.config.request_timeout, lambda: settle(None), kind="timer")

    def _start_load(self, phase: dict) -> None:
        start = int(phase.get("from", self.now))
        until = int(phase["until"])
        period = int(phase.get("period", 10))
        clients = int(phase.get("clients", 1))
        write_ratio = float(phase.get("write_ratio", 0.5))
        lo, hi = phase.get("keys", list(self.space.key_space))

        def tick(client_idx, when):
            if when > until:
                return
            key = self.rng.randrange(lo, hi)
            gid = self.space.granule_of(key)
            target = self.routes.get(gid)
            if target is None or target not in self.nodes:
                target = sorted(self.nodes)[0]
            if self.rng.random() < write_ratio:
                self.client_counter += 1
                value = f"L{client_idx}.{self.client_counter}"
                self.issue_client_txn(target, [], [(key, value)])
            else:
                self.issue_client_txn(target, [key], [])
            self.post_at(when + period, tick, client_idx, when + period)

        for i in range(clients):
            self.post_at(start + (i % max(period, 1)), tick, i, start + (i % max(period, 1)))

    # -- failure detection -------------------------------------------------------------

    def _heartbeat_tick(self, nid: int) -> None:
        node = self.nodes.get(nid)
        if node is None or not node.alive or node.decommissioned:
            return
        try:
            members = sorted(node.mtable_image())
        except UnknownLog:
            return
        if nid in members and len(members) > 1:
            idx = members.index(nid)
            successors = [members[(idx + off) % len(members)] for off in range(1, self.config.heartbeat_k + 1)]
            for target in successors:
                if target == nid:
                    continue
                node.hb_misses[target] = node.hb_misses.get(target, 0) + 1
                if node.hb_misses[target] > self.config.miss_threshold:
                    node.hb_misses[target] = 0
                    self._suspect(nid, target)
                else:
                    self.rpc(
                        nid, target, "ping", {},
                        on_reply=lambda reply, n=node, t=target: n.hb_misses.__setitem__(t, 0),
                        timeout=self.config.heartbeat_period,
                        on_timeout=lambda: None,
                    )
        self.post(self.config.heartbeat_period, self._heartbeat_tick, nid, kind="timer")

    def _suspect(self, detector: int, suspect: int) -> None:
        key = (detector, suspect)
        if key in self.suspicions and not self.suspicions[key].done:
            return
        orchestrator = FailoverOrchestrator(self, detector, suspect)
        self.suspicions[key] = orchestrator
        orchestrator.start()


class FailoverOrchestrator:
    """Detector-side failover: re-probe, recover every owned granule, delete."""

    def __init__(self, cluster: Cluster, detector: int, suspect: int):
        self.cluster = cluster
        self.detector = detector
        self.suspect = suspect
        self.done = False
        self.rounds = 0
        self.token = f"failover:{detector}->{suspect}:{cluster.now}"

    def start(self):
        self.cluster.active.add(self.token)
        self.cluster.trace.emit(self.cluster.now, "suspect", detector=self.detector, suspect=self.suspect)
        self._probe()

    def _finish(self, note: str):
        if not self.done:
            self.done = True
            self.cluster.active.discard(self.token)
            self.cluster.trace.emit(
                self.cluster.now, "failover_done",
                detector=self.detector, suspect=self.suspect, note=note,
            )

    def _probe(self):
        if self.done:
            return
        detector = self.cluster.nodes.get(self.detector)
        if detector is None or not detector.alive:
            return self._finish("detector_down")
        self.cluster.rpc(
            self.detector, self.suspect, "ping", {},
            on_reply=lambda reply: self._finish("suspect_alive"),
            on_timeout=self._round,
            timeout=self.cluster.config.probe_timeout,
        )

    def _round(self):
        if self.done:
            return
        self.rounds += 1
        if self.rounds > 4 * self.cluster.config.retry_limit:
            return self._finish("gave_up")
        self.cluster.storage_step(self.detector, self._assess)

    def _assess(self, reachable: bool):
        if self.done:
            return
        if not reachable:
            self.cluster.post(self.cluster.backoff(self.rounds), self._probe, kind="timer")
            return
        cluster = self.cluster
        svc = cluster.service
        src_log = LogId.node(self.suspect)
        detector_node = cluster.nodes[self.detector]
        if self.suspect not in detector_node.mtable_image():
            return self._finish("already_removed")
        if not svc.exists(src_log):
            return self._delete()
        for txn_id, logs in cp.undecided_intents(svc, src_log):
            cp.resolve_txn(svc, txn_id, logs)
        part = cluster.pagestore.gtable_partition(self.suspect, svc.tail(src_log))
        owned = self_owned(part, self.suspect)
        if not owned:
            return self._delete()
        survivors = [
            n for n in sorted(detector_node.mtable_image())
            if n != self.suspect and cluster.nodes.get(n) is not None and cluster.nodes[n].alive
        ]
        if cluster.config.recovery_policy == "round_robin" and len(survivors) > 1:
            buckets: dict[int, list[int]] = {}
            for i, gid in enumerate(owned):
                buckets.setdefault(survivors[i % len(survivors)], []).append(gid)
        else:
            buckets = {self.detector: owned}
        remaining = {"count": len(buckets)}

        def one_done(result):
            remaining["count"] -= 1
            if remaining["count"] == 0:
                self.cluster.post(self.cluster.backoff(1), self._round, kind="timer")

        for dst, gids in sorted(buckets.items()):
            if dst == self.detector:
                cluster.launch_recovery(dst, gids, self.suspect, on_final=one_done)
            else:
                cluster.rpc(
                    self.detector, dst, "recover_request",
                    {"granules": gids, "src": self.suspect},
                    on_reply=one_done,
                    on_timeout=lambda: one_done(None),
                )

    def _delete(self):
        if self.done:
            return
        cluster = self.cluster

        def after(result):
            if result.committed or result.reason == "node_not_exists":
                self._finish("deleted")
            else:
                cluster.post(cluster.backoff(self.rounds), self._round, kind="timer")

        cluster._track(
            DeleteNodeTxn(cluster.nodes[self.detector], cluster, cluster.next_txn_id("d"),
                          target=self.suspect, on_done=after)
        )


def run_simulation(scenario: dict, config: SimConfig) -> tuple[Trace, dict, Cluster]:
    cluster = Cluster(config, scenario)
    report = cluster.run()
    return cluster.trace, report, cluster


# -- threaded soak against the log service ------------------------------------


def run_soak(threads: int = 8, appends_per_log: int = 10_000, logs: int = 2) -> dict:
    """Race real threads on conditional appends; returns per-log histories.

    Each thread loops: read the tail, attempt an append conditioned on it,
    record the outcome.  The service must serialize appends internally; the
    caller checks the resulting LSN histories for gaps and duplicate wins.
    """
    svc = LogService()
    log_ids = [LogId.node(i + 1) for i in range(logs)]
    for log in log_ids:
        svc.create_log(log)
    wins: dict[str, list[list[int]]] = {log.token(): [[] for _ in range(threads)] for log in log_ids}

    def worker(wid: int):
        for log in log_ids:
            mine = wins[log.token()][wid]
            while True:
                tail = svc.tail(log)
                if tail >= appends_per_log:
                    break
                result = svc.append(log, [LogRecord(f"soak-{wid}-{tail}", "updates")], tail)
                if result.ok:
                    mine.append(result.lsn)

    pool = [threading.Thread(target=worker, args=(i,)) for i in range(threads)]
    for t in pool:
        t.start()
    for t in pool:
        t.join()

    report = {"threads": threads, "appends_per_log": appends_per_log, "logs": {}}
    for log in log_ids:
        per_thread = wins[log.token()]
        merged = sorted(lsn for per in per_thread for lsn in per)
        tail = svc.tail(log)
        report["logs"][log.token()] = {
            "tail": tail,
            "total_wins": len(merged),
            "gap_free": merged == list(range(1, tail + 1)),
            "unique_slots": len(set(merged)) == len(merged),
        }
    return report
