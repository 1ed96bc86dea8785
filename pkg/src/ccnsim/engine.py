"""Deterministic discrete-event simulation engine.

Time is an integer count of microseconds. Events are ordered by
``(time, sequence)`` so equal-time events run in scheduling order, and all
randomness comes from named substreams of one scenario seed.
"""
from __future__ import annotations

import enum
import hashlib
import heapq
import itertools
import json
import random
from dataclasses import dataclass
from typing import Callable, Optional

import networkx as nx

from .crypto import KeyRegistry


def ms(value: float) -> int:
    """Milliseconds to integer microseconds."""
    return int(round(value * 1000))


def to_ms(us: int) -> float:
    return us / 1000.0


class EventKind(enum.Enum):
    INTEREST_ARRIVAL = "interest_arrival"
    DATA_ARRIVAL = "data_arrival"
    TIMER_FIRE = "timer_fire"
    WORKLOAD_TICK = "workload_tick"
    ATTACK_TICK = "attack_tick"


@dataclass
class Event:
    time: int
    kind: EventKind
    action: Callable
    args: tuple = ()
    node: Optional[str] = None
    sequence: int = -1


class SchedulingError(RuntimeError):
    pass


class RngStreams:
    """Independent generators per named purpose, all derived from one seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict = {}

    def stream(self, purpose: str) -> random.Random:
        rng = self._streams.get(purpose)
        if rng is None:
            digest = hashlib.sha256(f"{self.seed}:{purpose}".encode()).digest()
            rng = self._streams[purpose] = random.Random(int.from_bytes(digest[:8], "big"))
        return rng


@dataclass
class Link:
    a: str
    face_a: int
    b: str
    face_b: int
    delay_us: int
    loss: float = 0.0

    def other(self, node_id: str):
        if node_id == self.a:
            return self.b, self.face_b
        return self.a, self.face_a


@dataclass
class TraceRecord:
    time: int
    node: str
    kind: str
    name: Optional[str]
    face: Optional[str]
    outcome: str

    def to_json(self) -> str:
        return json.dumps([self.time, self.node, self.kind, self.name, self.face, self.outcome],
                          separators=(",", ":"))

    def fields(self):
        return (self.time, self.node, self.kind, self.name, self.face, self.outcome)


TRACE_FIELDS = ("time", "node", "kind", "name", "face", "outcome")


class Sleep:
    def __init__(self, us: int):
        self.us = max(0, int(us))

    def start(self, proc: "Process"):
        proc.engine.call_at(proc.engine.now + self.us, proc.resume, None, kind=proc.kind, node=proc.node)


class WaitUntil(Sleep):
    def __init__(self, t: int):
        self.t = int(t)

    def start(self, proc):
        t = max(self.t, proc.engine.now)
        proc.engine.call_at(t, proc.resume, None, kind=proc.kind, node=proc.node)


class Process:
    """Generator-driven behavior. The generator yields commands with a
    ``start(proc)`` method and receives each command's result back."""

    def __init__(self, engine: "Engine", gen, kind=EventKind.WORKLOAD_TICK, node=None, name=None):
        self.engine = engine
        self.gen = gen
        self.kind = kind
        self.node = node
        self.name = name
        self.done = False
        self.result = None

    def resume(self, value=None):
        try:
            cmd = self.gen.send(value)
        except StopIteration as stop:
            self.done = True
            self.result = stop.value
            return
        cmd.start(self)


class Engine:
    def __init__(self, seed: int = 0, trace: bool = False, scenario_id: str = "adhoc"):
        self.seed = seed
        self.scenario_id = scenario_id
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()
        self.nodes: dict = {}
        self.links: list = []
        self.registry = KeyRegistry()
        self.rng = RngStreams(seed)
        self.tracing = trace
        self.trace: list = []
        self.request_log: list = []
        self.attack_results: list = []
        self.extra_metrics: list = []
        self.processes: list = []
        self.events_processed = 0
        self.auditor: Optional[Callable] = None

    # scheduling

    def schedule(self, event: Event) -> Event:
        if event.time < self.now:
            raise SchedulingError(f"event at {event.time} is before now={self.now}")
        event.sequence = next(self._seq)
        heapq.heappush(self._queue, (event.time, event.sequence, event))
        return event

    def call_at(self, time: int, fn: Callable, *args, kind=EventKind.TIMER_FIRE, node=None) -> Event:
        return self.schedule(Event(int(time), kind, fn, args, node))

    def spawn(self, gen, kind=EventKind.WORKLOAD_TICK, node=None, name=None, at=None) -> Process:
        proc = Process(self, gen, kind, node, name)
        self.processes.append(proc)
        self.call_at(self.now if at is None else at, proc.resume, None, kind=kind, node=node)
        return proc

    def run_until(self, t_end: int):
        from .metrics import collect_metrics

        queue = self._queue
        while queue and queue[0][0] <= t_end:
            time, _, event = heapq.heappop(queue)
            self.now = time
            event.action(*event.args)
            self.events_processed += 1
            if self.auditor is not None:
                self.auditor(self, event)
        self.now = max(self.now, t_end)
        return collect_metrics(self)

    def collect(self):
        from .metrics import collect_metrics

        return collect_metrics(self)

    def pending_events(self) -> int:
        return len(self._queue)

    # topology

    def add_node(self, node):
        if node.id in self.nodes:
            raise ValueError(f"duplicate node id {node.id!r}")
        node.engine = self
        self.nodes[node.id] = node
        node.attach(self)
        return node

    def connect(self, a: str, b: str, delay_ms: float = 10.0, loss: float = 0.0) -> Link:
        if delay_ms < 0:
            raise ValueError("link delay must be >= 0")
        na, nb = self.nodes[a], self.nodes[b]
        link = Link(a, na.next_face(), b, nb.next_face(), ms(delay_ms), loss)
        na.faces[link.face_a] = link
        nb.faces[link.face_b] = link
        self.links.append(link)
        return link

    def face_towards(self, node_id: str, neighbor: str) -> int:
        for face, link in self.nodes[node_id].faces.items():
            if link.other(node_id)[0] == neighbor:
                return face
        raise KeyError(f"{node_id} has no link to {neighbor}")

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        for link in self.links:
            g.add_edge(link.a, link.b, weight=link.delay_us)
        return g

    def path_delays(self, origin: str) -> dict:
        return nx.single_source_dijkstra_path_length(self.graph(), origin, weight="weight")

    def router_ids(self) -> list:
        return [nid for nid, n in self.nodes.items() if getattr(n, "is_router", False)]

    def add_route(self, router_id: str, prefix, via: str):
        from .names import name as to_name

        node = self.nodes[router_id]
        node.router.fib.add(to_name(prefix), self.face_towards(router_id, via))

    def install_routes(self):
        """Point every router at every announced prefix along least-delay paths."""
        g = self.graph()
        announcements = []
        for nid, node in self.nodes.items():
            for prefix in getattr(node, "announced_prefixes", lambda: ())():
                announcements.append((prefix, nid))
        routers = self.router_ids()
        for prefix, origin in announcements:
            # paths may only transit routers, never other hosts
            sub = g.subgraph(routers + [origin])
            if origin not in sub:
                continue
            paths = nx.single_source_dijkstra_path(sub, origin, weight="weight")
            for rid in routers:
                path = paths.get(rid)
                if path is None or len(path) < 2:
                    continue
                self.nodes[rid].router.fib.add(prefix, self.face_towards(rid, path[-2]))

    # messaging

    def send(self, node_id: str, face: int, msg, extra_delay: int = 0):
        link = self.nodes[node_id].faces.get(face)
        if link is None:
            return
        self.deliver(link, msg, node_id, extra_delay)

    def deliver(self, link: Link, msg, sender: str, extra_delay: int = 0):
        dest, face = link.other(sender)
        if link.loss and self.rng.stream(f"link/{link.a}-{link.b}").random() < link.loss:
            return
        from .router import Interest

        kind = EventKind.INTEREST_ARRIVAL if isinstance(msg, Interest) else EventKind.DATA_ARRIVAL
        node = self.nodes[dest]
        self.call_at(self.now + extra_delay + link.delay_us, node.receive, msg, face, kind=kind, node=dest)

    # trace

    def record(self, node: str, kind: str, name, face, outcome: str):
        if self.tracing:
            self.trace.append(TraceRecord(self.now, node, kind,
                                          None if name is None else str(name),
                                          None if face is None else f"{node}#{face}", outcome))

    def trace_lines(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.trace)

    def trace_digest(self) -> str:
        return hashlib.sha256(self.trace_lines().encode()).hexdigest()


def schedule(engine: Engine, event: Event) -> Event:
    return engine.schedule(event)


def run_until(engine: Engine, t_end: int):
    return engine.run_until(t_end)


def deliver(engine: Engine, link: Link, message, sender: str):
    engine.deliver(link, message, sender)
