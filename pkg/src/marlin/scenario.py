"""Scenario specs and run metrics.

A scenario is a JSON document: the initial cluster (nodes and their granule
map), a timed action list, optional client load phases, and a tick budget.
Bundled scenarios ship inside the package and can be referenced by bare name.
"""

from __future__ import annotations

import csv
import io
import json
from importlib import resources

VALID_ACTIONS = {
    "add_node", "remove_node", "migrate", "recover_migrate", "scan",
    "crash", "recover", "partition", "heal", "user", "load",
}


def load_scenario(ref: str) -> dict:
    """Load a scenario from a path, or from the bundled set by bare name."""
    text = None
    if not ref.endswith(".json"):
        bundled = resources.files("marlin").joinpath(f"scenarios/{ref}.json")
        if bundled.is_file():
            text = bundled.read_text()
    if text is None:
        with open(ref) as f:
            text = f.read()
    scenario = json.loads(text)
    validate_scenario(scenario)
    return scenario


def bundled_names() -> list[str]:
    root = resources.files("marlin").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def validate_scenario(scenario: dict) -> None:
    for field in ("granules", "nodes"):
        if field not in scenario:
            raise ValueError(f"scenario missing {field!r}")
    granules = {int(g) for g in scenario["granules"]}
    spans = sorted(tuple(span) for span in scenario["granules"].values())
    for (_, ahi), (blo, _) in zip(spans, spans[1:]):
        if ahi != blo:
            raise ValueError(f"granule ranges do not tile the key space at {ahi}..{blo}")
    declared = {int(n) for n in scenario["nodes"]}
    assigned: set[int] = set()
    for nid, gids in scenario["nodes"].items():
        for g in gids:
            if int(g) not in granules:
                raise ValueError(f"node {nid} references unknown granule {g}")
            if int(g) in assigned:
                raise ValueError(f"granule {g} assigned twice")
            assigned.add(int(g))
    if assigned != granules:
        raise ValueError(f"granules without an initial owner: {sorted(granules - assigned)}")
    for action in scenario.get("actions", []):
        if action.get("op") not in VALID_ACTIONS:
            raise ValueError(f"unknown action {action.get('op')!r}")
        if "at" not in action:
            raise ValueError(f"action without tick: {action}")
        for field in ("node", "src", "dst", "by"):
            if field in action and int(action[field]) not in declared:
                if action["op"] == "add_node" and field == "node":
                    declared.add(int(action[field]))
                    continue
                if int(action[field]) not in declared:
                    raise ValueError(f"action references undeclared node: {action}")
        if action["op"] == "add_node":
            declared.add(int(action["node"]))


class MetricsReport:
    """Per-tick committed/aborted counts by kind plus run-level aggregates,
    all reconstructed from the trace so they reconcile exactly."""

    def __init__(self, trace):
        self.per_tick: dict[tuple[int, str, str], int] = {}
        self.abort_reasons: dict[str, int] = {}
        self.redirects = 0
        self.client_committed = 0
        self.client_failures = 0
        self.migration_commits: list[int] = []
        kinds = set()
        for entry in trace.entries:
            if entry.ev == "txn":
                kind, result = entry.data["kind"], entry.data["result"]
                kinds.add(kind)
                key = (entry.tick, kind, result)
                self.per_tick[key] = self.per_tick.get(key, 0) + 1
                if result == "aborted":
                    reason = entry.data.get("reason") or "unknown"
                    self.abort_reasons[reason] = self.abort_reasons.get(reason, 0) + 1
                elif entry.data["kind"] in ("migration", "recovery_migration"):
                    self.migration_commits.append(entry.tick)
            elif entry.ev == "client":
                self.redirects += entry.data.get("redirects", 0)
                if entry.data["result"] == "committed":
                    self.client_committed += 1
                else:
                    self.client_failures += 1
        self.kinds = sorted(kinds)

    @property
    def migration_window(self) -> tuple[int, int] | None:
        if not self.migration_commits:
            return None
        return (min(self.migration_commits), max(self.migration_commits))

    def totals(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for (_, kind, result), n in self.per_tick.items():
            out[(kind, result)] = out.get((kind, result), 0) + n
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["tick", "kind", "result", "count"])
        for (tick, kind, result), n in sorted(self.per_tick.items()):
            writer.writerow([tick, kind, result, n])
        writer.writerow([])
        writer.writerow(["redirects", self.redirects])
        writer.writerow(["client_committed", self.client_committed])
        writer.writerow(["client_failures", self.client_failures])
        window = self.migration_window
        if window:
            writer.writerow(["migration_first_commit", window[0]])
            writer.writerow(["migration_last_commit", window[1]])
        for reason, n in sorted(self.abort_reasons.items()):
            writer.writerow([f"aborts_{reason}", n])
        return buf.getvalue()
