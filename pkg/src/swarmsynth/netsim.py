"""Deterministic simulated network with multi-hop relaying.

Topologies are immutable snapshots of directed links with per-link capacity
(bytes/second) and latency (seconds) plus an obstruction set of node pairs
that can never be linked. Routing is minimum-hop with lexicographic
tie-breaking; a delivered message is charged its full payload on every
traversed link and arrives after the sum of per-hop latency plus
serialization delay. There is no queueing or contention model: links always
run at rated capacity.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum


class PayloadKind(Enum):
    REQUEST = "REQUEST"
    SEMANTIC = "SEMANTIC"
    LATENT = "LATENT"
    RAW = "RAW"
    DETECTIONS = "DETECTIONS"
    GUIDANCE = "GUIDANCE"
    FL_PARAMS = "FL_PARAMS"
    SUMMARY = "SUMMARY"


@dataclass(frozen=True)
class Link:
    capacity: float  # bytes per second
    latency: float  # seconds

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise ValueError("link capacity must be positive")
        if self.latency < 0:
            raise ValueError("link latency must be non-negative")


@dataclass(frozen=True)
class Topology:
    nodes: tuple[int, ...]
    links: dict[tuple[int, int], Link]
    obstructions: frozenset[frozenset[int]] = frozenset()

    def __post_init__(self) -> None:
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise ValueError("duplicate node ids")
        for (u, v), _link in self.links.items():
            if u not in node_set or v not in node_set:
                raise ValueError(f"link ({u}, {v}) references unknown node")
            if u == v:
                raise ValueError("self links are not allowed")
            if frozenset((u, v)) in self.obstructions:
                raise ValueError(f"link ({u}, {v}) crosses an obstruction")

    def successors(self, u: int) -> list[int]:
        return sorted(v for (a, v) in self.links if a == u)

    def predecessors(self, v: int) -> list[int]:
        return sorted(u for (u, b) in self.links if b == v)


def fully_connected(
    node_ids: list[int],
    capacity: float,
    latency: float,
    obstructions: frozenset[frozenset[int]] = frozenset(),
) -> Topology:
    """Bidirectional clique minus obstructed pairs."""
    links = {}
    for u in node_ids:
        for v in node_ids:
            if u != v and frozenset((u, v)) not in obstructions:
                links[(u, v)] = Link(capacity, latency)
    return Topology(tuple(node_ids), links, obstructions)


@dataclass(frozen=True)
class NetMessage:
    src: int
    dst: int
    kind: PayloadKind
    payload_bytes: int
    seq: int = 0

    def __post_init__(self) -> None:
        if self.payload_bytes < 1:
            raise ValueError("payload_bytes must be >= 1")


@dataclass(frozen=True)
class DeliveryReport:
    message: NetMessage
    path: tuple[int, ...]
    arrival_time: float
    per_link_bytes: tuple[int, ...]
    delivered: bool


def route(topo: Topology, src: int, dst: int) -> list[int] | None:
    """Minimum-hop path; ties resolved to the lexicographically smallest
    node-id sequence. None when disconnected."""
    if src not in topo.nodes or dst not in topo.nodes:
        raise ValueError("unknown node id")
    if src == dst:
        return [src]
    # distance to dst over forward links = BFS from dst over reversed links
    dist = {dst: 0}
    q = deque([dst])
    while q:
        v = q.popleft()
        for u in topo.predecessors(v):
            if u not in dist:
                dist[u] = dist[v] + 1
                q.append(u)
    if src not in dist:
        return None
    # greedy walk: smallest successor that stays on a shortest path
    path = [src]
    cur = src
    while cur != dst:
        nxt = None
        for v in topo.successors(cur):  # ascending node id
            if dist.get(v, math.inf) == dist[cur] - 1:
                nxt = v
                break
        path.append(nxt)
        cur = nxt
    return path


def transmit(topo: Topology, msg: NetMessage, now: float) -> DeliveryReport:
    """Deliver along the routed path, charging every traversed link.

    Undeliverable messages report delivered=False with an empty path and no
    bytes charged; arrival_time is +inf in that case.
    """
    path = route(topo, msg.src, msg.dst)
    if path is None:
        return DeliveryReport(msg, (), math.inf, (), False)
    delay = 0.0
    charged = []
    for u, v in zip(path, path[1:]):
        link = topo.links[(u, v)]
        delay += link.latency + msg.payload_bytes / link.capacity
        charged.append(msg.payload_bytes)
    return DeliveryReport(msg, tuple(path), now + delay, tuple(charged), True)


def update_topology(topo: Topology, events: list[tuple]) -> Topology:
    """Apply link up/down events in order; returns a new snapshot.

    Events: ("up", u, v, capacity, latency) or ("down", u, v). Events that
    reference unknown nodes or try to link across an obstruction are
    malformed and raise.
    """
    links = dict(topo.links)
    node_set = set(topo.nodes)
    for ev in events:
        if not ev or ev[0] not in ("up", "down"):
            raise ValueError(f"malformed event {ev!r}")
        kind = ev[0]
        if kind == "up":
            if len(ev) != 5:
                raise ValueError(f"malformed up event {ev!r}")
            _, u, v, cap, lat = ev
            if u not in node_set or v not in node_set:
                raise ValueError(f"event references unknown node: {ev!r}")
            if frozenset((u, v)) in topo.obstructions:
                raise ValueError(f"cannot link obstructed pair ({u}, {v})")
            links[(u, v)] = Link(cap, lat)
        else:
            if len(ev) != 3:
                raise ValueError(f"malformed down event {ev!r}")
            _, u, v = ev
            if u not in node_set or v not in node_set:
                raise ValueError(f"event references unknown node: {ev!r}")
            links.pop((u, v), None)
    return Topology(topo.nodes, links, topo.obstructions)


def bandwidth_ledger(reports: list[DeliveryReport]) -> dict[PayloadKind, int]:
    """Total bytes charged per payload kind (every traversed link counts)."""
    totals = {kind: 0 for kind in PayloadKind}
    for rep in reports:
        totals[rep.message.kind] += sum(rep.per_link_bytes)
    return totals
