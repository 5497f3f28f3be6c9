"""Operator-facing management: properties files, the command grammar,
and network snapshots.

Everything here is text in, typed value out. The command parser is
total: any token sequence either becomes a Command or raises ParseError
with the offending token position and what was expected there. Network
files are versioned JSON; loading one validates the whole document
before touching the runtime, so a bad file never leaves a half-applied
topology behind.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Union

from .program import parse_program, render_program
from .resilience import ReplicaPlan, StageRoutes
from .runtime import TIER_TYPES, GipsyRuntime

COMMAND_TIER_TYPES = TIER_TYPES + ("GMT",)

NETWORK_FORMAT_VERSION = 1


class MgmtError(Exception):
    """Base class for management-layer errors."""


class Malformed(MgmtError):
    """A properties line that is not `key=value`, a comment, or blank."""

    def __init__(self, line: int, text: str):
        super().__init__(f"line {line}: expected key=value, got {text!r}")
        self.line = line
        self.text = text


class DuplicateKey(MgmtError):
    def __init__(self, key: str, line: int):
        super().__init__(f"line {line}: duplicate key {key!r}")
        self.key = key
        self.line = line


class BadValue(MgmtError):
    """A property exists but does not parse as the requested type."""

    def __init__(self, key: str, value: str, wanted: str):
        super().__init__(f"{key}={value!r}: expected {wanted}")
        self.key = key
        self.value = value


class ParseError(MgmtError):
    """Command rejection: token `position` (0-based) was not `expected`."""

    def __init__(self, position: int, expected: str):
        super().__init__(f"token {position}: expected {expected}")
        self.position = position
        self.expected = expected


class InvalidNetworkFile(MgmtError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class Configuration:
    """An ordered key=value properties map."""

    properties: Mapping[str, str] = field(default_factory=dict)

    def lookup(self, key: str, default: str | None = None) -> str | None:
        return self.properties.get(key, default)

    def get_int(self, key: str, default: int | None = None) -> int | None:
        raw = self.properties.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise BadValue(key, raw, "an integer") from None

    def get_float(self, key: str, default: float | None = None) -> float | None:
        raw = self.properties.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise BadValue(key, raw, "a number") from None

    def get_bool(self, key: str, default: bool | None = None) -> bool | None:
        raw = self.properties.get(key)
        if raw is None:
            return default
        lowered = raw.strip().lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        raise BadValue(key, raw, "a boolean")


def parse_properties(text: str) -> Configuration:
    """Parse `key=value` lines; `#` comments and blank lines are ignored.

    Duplicate keys are an error rather than last-one-wins, because a
    silently shadowed property is the worst kind of configuration bug.
    """
    properties: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise Malformed(lineno, raw)
        if key in properties:
            raise DuplicateKey(key, lineno)
        properties[key] = value.strip()
    return Configuration(properties)


def load_config(path: str | os.PathLike) -> Configuration:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_properties(fh.read())


# -- command grammar ----------------------------------------------------------

@dataclass(frozen=True)
class StartGmt:
    verb = "start"
    config_file: str


@dataclass(frozen=True)
class StartNode:
    verb = "start"
    node_id: str


@dataclass(frozen=True)
class StopNode:
    verb = "stop"
    node_id: str


@dataclass(frozen=True)
class Allocate:
    verb = "allocate"
    node_id: str
    tier_type: str
    count: int


@dataclass(frozen=True)
class Deallocate:
    verb = "deallocate"
    node_id: str
    tier_type: str
    tier_ids: tuple[str, ...]


@dataclass(frozen=True)
class SaveNetwork:
    verb = "save"
    file: str


@dataclass(frozen=True)
class LoadNetwork:
    verb = "load"
    file: str


@dataclass(frozen=True)
class Status:
    verb = "status"


Command = Union[
    StartGmt, StartNode, StopNode, Allocate, Deallocate, SaveNetwork, LoadNetwork, Status
]

_VERBS = ("start", "stop", "allocate", "deallocate", "save", "load", "status")


def parse_command(line: str) -> Command:
    """Parse one operator command; total over arbitrary input.

    Grammar::

        start GMT <file>
        start node <NodeID> | stop node <NodeID>
        allocate <NodeID> <TierType> <count>
        deallocate <NodeID> <TierType> <TierID>...
        save network <file> | load network <file>
        status
    """
    tokens = line.split()

    def need(i: int, expected: str) -> str:
        if i >= len(tokens):
            raise ParseError(i, expected)
        return tokens[i]

    def done(i: int) -> None:
        if len(tokens) > i:
            raise ParseError(i, "end of command")

    def tier_type(i: int) -> str:
        token = need(i, "a tier type (DGT, DST, DWT or GMT)")
        if token not in COMMAND_TIER_TYPES:
            raise ParseError(i, "a tier type (DGT, DST, DWT or GMT)")
        return token

    verb = need(0, "one of " + ", ".join(_VERBS))
    if verb == "start":
        target = need(1, "'GMT' or 'node'")
        if target == "GMT":
            file = need(2, "a configuration file")
            done(3)
            return StartGmt(file)
        if target == "node":
            node = need(2, "a node id")
            done(3)
            return StartNode(node)
        raise ParseError(1, "'GMT' or 'node'")
    if verb == "stop":
        if need(1, "'node'") != "node":
            raise ParseError(1, "'node'")
        node = need(2, "a node id")
        done(3)
        return StopNode(node)
    if verb == "allocate":
        node = need(1, "a node id")
        ttype = tier_type(2)
        raw = need(3, "a positive tier count")
        # the printer must reproduce the exact token, so only canonical
        # decimal forms are accepted (no 03, +3, or 1_0)
        try:
            count = int(raw)
        except ValueError:
            raise ParseError(3, "a positive tier count") from None
        if count < 1 or str(count) != raw:
            raise ParseError(3, "a positive tier count")
        done(4)
        return Allocate(node, ttype, count)
    if verb == "deallocate":
        node = need(1, "a node id")
        ttype = tier_type(2)
        ids = tuple(tokens[3:])
        if not ids:
            raise ParseError(3, "at least one tier id")
        return Deallocate(node, ttype, ids)
    if verb in ("save", "load"):
        if need(1, "'network'") != "network":
            raise ParseError(1, "'network'")
        file = need(2, "a network file")
        done(3)
        return SaveNetwork(file) if verb == "save" else LoadNetwork(file)
    if verb == "status":
        done(1)
        return Status()
    raise ParseError(0, "one of " + ", ".join(_VERBS))


def render_command(command: Command) -> str:
    """Print a command back to its token sequence (parse's inverse)."""
    if isinstance(command, StartGmt):
        return f"start GMT {command.config_file}"
    if isinstance(command, StartNode):
        return f"start node {command.node_id}"
    if isinstance(command, StopNode):
        return f"stop node {command.node_id}"
    if isinstance(command, Allocate):
        return f"allocate {command.node_id} {command.tier_type} {command.count}"
    if isinstance(command, Deallocate):
        return f"deallocate {command.node_id} {command.tier_type} " + " ".join(command.tier_ids)
    if isinstance(command, SaveNetwork):
        return f"save network {command.file}"
    if isinstance(command, LoadNetwork):
        return f"load network {command.file}"
    if isinstance(command, Status):
        return "status"
    raise TypeError(f"not a command: {command!r}")


# -- network snapshots ----------------------------------------------------------

def network_snapshot(runtime: GipsyRuntime, plan: ReplicaPlan | None = None) -> dict:
    """The saveable view of an instance: topology, programs, replica plan."""
    topology = runtime.gmt.topology()
    nodes = []
    tiers = []
    for node in topology["nodes"]:
        record = runtime.gmt.find_node(node["node_id"])
        descriptor = {k: v for k, v in record.descriptor.items() if k != "node_id" and v is not None}
        nodes.append({"node_id": node["node_id"], "descriptor": descriptor})
        for tier in node["tiers"]:
            tiers.append(
                {
                    "tier_id": tier["tier_id"],
                    "node_id": node["node_id"],
                    "tier_type": tier["tier_type"],
                }
            )
    snapshot = {
        "version": NETWORK_FORMAT_VERSION,
        "nodes": nodes,
        "tiers": tiers,
        "programs": [render_program(p) for _, p in sorted(runtime.programs().items())],
    }
    if plan is not None:
        snapshot["plan"] = {
            stage: {
                "active": sorted(routes.active),
                "standbys": list(routes.standbys),
                "min_routes": routes.min_routes,
            }
            for stage, routes in sorted(plan.stages.items())
        }
    return snapshot


def save_network(runtime: GipsyRuntime, path: str | os.PathLike,
                 plan: ReplicaPlan | None = None) -> dict:
    snapshot = network_snapshot(runtime, plan)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2)
        fh.write("\n")
    return snapshot


def _check_network(data: object) -> tuple[dict, ReplicaPlan | None]:
    """Validate a parsed network document; returns it with a built plan.

    Raises InvalidNetworkFile whose `path` names the first violation in
    JSON-pointer style, e.g. `tiers[2].tier_type`.
    """

    def bad(path: str, message: str) -> InvalidNetworkFile:
        return InvalidNetworkFile(path, message)

    if not isinstance(data, dict):
        raise bad("$", "network file must hold a JSON object")
    if data.get("version") != NETWORK_FORMAT_VERSION:
        raise bad("version", f"expected {NETWORK_FORMAT_VERSION}, got {data.get('version')!r}")

    nodes = data.get("nodes")
    if not isinstance(nodes, list):
        raise bad("nodes", "expected a list")
    node_ids: set[str] = set()
    for i, node in enumerate(nodes):
        if not isinstance(node, dict) or not isinstance(node.get("node_id"), str) or not node["node_id"]:
            raise bad(f"nodes[{i}].node_id", "expected a non-empty string")
        if node["node_id"] in node_ids:
            raise bad(f"nodes[{i}].node_id", f"duplicate node {node['node_id']!r}")
        node_ids.add(node["node_id"])
        descriptor = node.get("descriptor", {})
        if not isinstance(descriptor, dict):
            raise bad(f"nodes[{i}].descriptor", "expected an object")

    tiers = data.get("tiers")
    if not isinstance(tiers, list):
        raise bad("tiers", "expected a list")
    tier_ids: set[str] = set()
    for i, tier in enumerate(tiers):
        if not isinstance(tier, dict) or not isinstance(tier.get("tier_id"), str) or not tier["tier_id"]:
            raise bad(f"tiers[{i}].tier_id", "expected a non-empty string")
        if tier["tier_id"] in tier_ids:
            raise bad(f"tiers[{i}].tier_id", f"duplicate tier {tier['tier_id']!r}")
        tier_ids.add(tier["tier_id"])
        if tier.get("node_id") not in node_ids:
            raise bad(f"tiers[{i}].node_id", f"unknown node {tier.get('node_id')!r}")
        if tier.get("tier_type") not in TIER_TYPES:
            raise bad(f"tiers[{i}].tier_type", f"expected one of {', '.join(TIER_TYPES)}")

    programs = data.get("programs", [])
    if not isinstance(programs, list):
        raise bad("programs", "expected a list")
    for i, text in enumerate(programs):
        if not isinstance(text, str):
            raise bad(f"programs[{i}]", "expected program text")
        try:
            parse_program(text).validate()
        except Exception as exc:
            raise bad(f"programs[{i}]", str(exc)) from None

    plan_data = data.get("plan")
    plan: ReplicaPlan | None = None
    if plan_data is not None:
        if not isinstance(plan_data, dict):
            raise bad("plan", "expected an object")
        stages: dict[str, StageRoutes] = {}
        for stage, routes in plan_data.items():
            if not isinstance(routes, dict):
                raise bad(f"plan.{stage}", "expected an object")
            active = routes.get("active")
            standbys = routes.get("standbys", [])
            min_routes = routes.get("min_routes", 1)
            if not isinstance(active, list) or not active:
                raise bad(f"plan.{stage}.active", "expected a non-empty list")
            if not isinstance(standbys, list):
                raise bad(f"plan.{stage}.standbys", "expected a list")
            if not isinstance(min_routes, int) or min_routes < 1:
                raise bad(f"plan.{stage}.min_routes", "expected a positive integer")
            for j, tid in enumerate(active):
                if tid not in tier_ids:
                    raise bad(f"plan.{stage}.active[{j}]", f"unknown tier {tid!r}")
            for j, tid in enumerate(standbys):
                if tid not in tier_ids:
                    raise bad(f"plan.{stage}.standbys[{j}]", f"unknown tier {tid!r}")
            stages[stage] = StageRoutes(set(active), list(standbys), min_routes)
        plan = ReplicaPlan(stages)
    return data, plan


def load_network(runtime: GipsyRuntime, path: str | os.PathLike) -> ReplicaPlan | None:
    """Replace an instance's topology with a saved one.

    The result is a stopped topology: nodes registered, tiers allocated,
    programs on file, nothing running. Mutations made since the save are
    gone. Returns the replica plan stored in the file, if any.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InvalidNetworkFile("$", f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidNetworkFile("$", f"not JSON: {exc}") from None
    data, plan = _check_network(data)

    # validation is done; from here on the document is applied in full
    if runtime.started:
        runtime.stop()
    topology = runtime.gmt.topology()
    for node in topology["nodes"]:
        by_type: dict[str, list[str]] = {}
        for tier in node["tiers"]:
            by_type.setdefault(tier["tier_type"], []).append(tier["tier_id"])
        for tier_type, ids in by_type.items():
            runtime.deallocate(node["node_id"], tier_type, ids, force=True)
        runtime.gmt.remove_node(node["node_id"])
    for program_id in list(runtime.programs()):
        runtime.forget_program(program_id)

    for node in data["nodes"]:
        runtime.add_node(node["node_id"], **node.get("descriptor", {}))
    for tier in data["tiers"]:
        runtime.allocate(tier["node_id"], tier["tier_type"], tier_id=tier["tier_id"])
    for text in data.get("programs", []):
        runtime.register_program(text, replace=True)
    return plan
