"""Node-side system state: granule map, membership/ownership caches, LSN tracker.

The membership table (MTable) maps node id to address and is governed by the
shared SysLog.  The granule ownership table (GTable) is partitioned by owner
node: partition N is exactly the fold of GLog N's gtable write ops, and node N
owns granule G iff its own partition entry for G names N itself.  Keys are
integers in [0, key_space); each granule covers one half-open range and the
ranges partition the key space.

Caches here are per node and volatile.  The tracker holds the node's
last-observed tail per log; it is the fencing input for every conditional
append the node issues.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .logstore import SYSLOG, LogId


class UnmappedKey(Exception):
    """No granule covers the key: a configuration bug, never retried."""


@dataclass(frozen=True)
class GranuleSpace:
    """The static granule -> key range map.  Ownership moves, ranges do not."""

    ranges: dict[int, tuple[int, int]]

    def __post_init__(self):
        spans = sorted(self.ranges.values())
        for (alo, ahi), (blo, bhi) in zip(spans, spans[1:]):
            if ahi > blo:
                raise ValueError(f"granule ranges overlap: [{alo},{ahi}) and [{blo},{bhi})")

    @property
    def key_space(self) -> tuple[int, int]:
        spans = sorted(self.ranges.values())
        return (spans[0][0], spans[-1][1]) if spans else (0, 0)

    def granule_of(self, key: int) -> int:
        for gid, (lo, hi) in self.ranges.items():
            if lo <= key < hi:
                return gid
        raise UnmappedKey(f"no granule covers key {key}")

    def validate_partition(self) -> None:
        """Ranges must tile the key space with no gaps."""
        spans = sorted(self.ranges.values())
        for (_, ahi), (blo, _) in zip(spans, spans[1:]):
            if ahi != blo:
                raise ValueError(f"gap in key space at {ahi}..{blo}")


def owns(partition: dict[int, tuple], granule: int, node: int) -> bool:
    """The ownership definition: the node's own partition entry names itself."""
    entry = partition.get(granule)
    return entry is not None and entry[2] == node


def self_owned(partition: dict[int, tuple], node: int) -> list[int]:
    return sorted(g for g, (_, _, owner) in partition.items() if owner == node)


class LsnTracker:
    """Per-log highest observed LSN; monotone, never ahead of the actual tail."""

    def __init__(self):
        self.tracked: dict[LogId, int] = {}

    def get(self, log: LogId) -> int | None:
        return self.tracked.get(log)

    def observe(self, log: LogId, lsn: int) -> None:
        if lsn > self.tracked.get(log, -1):
            self.tracked[log] = lsn

    def forget(self, log: LogId) -> None:
        self.tracked.pop(log, None)


@dataclass
class MetaCache:
    """Cached system-table images, each stamped with the LSN it was built at.

    An invalidated entry is None; the next read refetches through the page
    store at the tracker's LSN.  User-data caches live elsewhere and are never
    touched by coordination-state invalidation.
    """

    mtable: tuple[dict[int, str], int] | None = None
    gtable: dict[int, tuple[dict[int, tuple], int]] = field(default_factory=dict)

    def clear_for_log(self, log: LogId) -> str:
        """Invalidate the entry governed by ``log``; returns a label for traces."""
        if log.is_syslog:
            self.mtable = None
            return "mtable"
        self.gtable.pop(log.node_id, None)
        return f"gtable:{log.node_id}"

    def mtable_valid_at(self, lsn: int) -> dict[int, str] | None:
        if self.mtable is not None and self.mtable[1] >= lsn:
            return self.mtable[0]
        return None

    def gtable_valid_at(self, node: int, lsn: int) -> dict[int, tuple] | None:
        entry = self.gtable.get(node)
        if entry is not None and entry[1] >= lsn:
            return entry[0]
        return None


def lookup_owner(partitions: dict[int, dict[int, tuple]], space: GranuleSpace, key: int) -> int | None:
    """Owner recorded for the granule covering ``key`` across the given
    partition images, chasing re-pointed entries to the freshest claim.

    A partition may hold an entry for a granule it no longer owns (re-pointed
    at migration time); the entry still names the node the granule went to, so
    it works as a redirect hint.  Returns None when no partition mentions the
    granule.
    """
    gid = space.granule_of(key)
    # a self-claim is authoritative
    for nid, part in partitions.items():
        entry = part.get(gid)
        if entry is not None and entry[2] == nid:
            return entry[2]
    for part in partitions.values():
        entry = part.get(gid)
        if entry is not None:
            return entry[2]
    return None
