"""
Deterministic discrete-event simulation of a content centric network.

Endpoints are nodes and routers joined by fixed-latency links. Interests follow FIB
longest-prefix matches and leave PIT breadcrumbs; Data retraces them. Nodes crash by
stopping and stay halted until restarted.
"""
import json
import heapq
import logging
import itertools
from enum import Enum
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Set, Tuple

import simpy
import networkx as nx

from ccncheck import names
from ccncheck.names import StructuredName
from ccncheck.trace import Trace, Record


logger = logging.getLogger(__name__)

DEFAULT_INTEREST_LIFETIME = 100
LOCAL_FACE = "app"

class FabricError(Exception):
    pass

class TopologyError(FabricError):
    pass

class NodeDownError(FabricError):
    pass

class NodeStateError(FabricError):
    pass

class PrefixConflictError(FabricError):
    pass

class ProtocolViolationError(FabricError):
    pass

@dataclass(frozen=True)
class Interest:
    name: StructuredName
    nonce: int
    issue_time: int
    lifetime: int = DEFAULT_INTEREST_LIFETIME

@dataclass(frozen=True)
class Data:
    name: StructuredName
    payload: bytes
    origin: str

@dataclass(frozen=True)
class FibEntry:
    prefix: str
    next_hop: str

class HandleState(Enum):
    pending = "pending"
    satisfied = "satisfied"
    expired = "expired"

class PendingHandle:
    def __init__(self, handle_id: int, node: str, interest: Interest):
        self.id = handle_id
        self.node = node
        self.interest = interest
        self.state = HandleState.pending

    @property
    def name(self) -> StructuredName:
        return self.interest.name

    def __repr__(self) -> str:
        return f"<PendingHandle {self.id} {self.node} {self.interest.name} {self.state.name}>"

@dataclass(eq=False)
class PitEntry:
    name: StructuredName
    in_face: str
    nonce: int
    created: int
    handle: Optional[PendingHandle] = None

@dataclass(frozen=True)
class Topology:
    nodes: Tuple[str, ...]
    routers: Tuple[str, ...]
    links: Tuple[Tuple[str, str, int], ...]
    seed: int = 0

    def __post_init__(self):
        endpoints = list(self.nodes) + list(self.routers)
        for ident in endpoints:
            try:
                names.check_identifier("endpoint", ident)
            except names.MalformedNameError as e:
                raise TopologyError(str(e))
        if len(set(endpoints)) != len(endpoints):
            raise TopologyError("Endpoint identifiers must be unique across nodes and routers")
        for a, b, latency in self.links:
            if a not in endpoints or b not in endpoints:
                raise TopologyError(f"Link ({a}, {b}) names an unknown endpoint")
            if not isinstance(latency, int) or latency < 1:
                raise TopologyError(f"Link ({a}, {b}) latency must be an integer >= 1, got {latency}")
        if endpoints and not nx.is_connected(self.graph()):
            raise TopologyError("Topology is not connected")

    @property
    def endpoints(self) -> List[str]:
        return list(self.nodes) + list(self.routers)

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.endpoints)
        for a, b, latency in self.links:
            g.add_edge(a, b, latency=latency)
        return g

    def to_dict(self) -> Dict[str, Any]:
        return dict(nodes=list(self.nodes),
                    routers=list(self.routers),
                    links=[list(link) for link in self.links],
                    seed=self.seed)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "Topology":
        try:
            return cls(nodes=tuple(doc['nodes']),
                       routers=tuple(doc.get('routers', ())),
                       links=tuple((a, b, latency) for a, b, latency in doc['links']),
                       seed=int(doc.get('seed', 0)))
        except (KeyError, TypeError, ValueError) as e:
            raise TopologyError(f"Malformed topology document: {e}")

    @classmethod
    def load(cls, path: str) -> "Topology":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def star(cls, nodes: Iterable[str], router: str="r0", latency: int=1, seed: int=0) -> "Topology":
        nodes = tuple(nodes)
        return cls(nodes=nodes, routers=(router,), links=tuple((n, router, latency) for n in nodes), seed=seed)

class NodeHandler:
    """
    Node logic plugged into the fabric. Handlers see only their own packets.
    """
    def on_interest(self, interest: Interest):
        pass

    def on_data(self, data: Data, handle: PendingHandle):
        pass

    def on_expired(self, handle: PendingHandle):
        pass

class _Endpoint:
    def __init__(self, ident: str, is_router: bool):
        self.ident = ident
        self.is_router = is_router
        self.alive = True
        self.incarnation = 0
        self.handler: Optional[NodeHandler] = None
        self.reset()

    def reset(self):
        self.fib: Dict[str, str] = dict()
        self.pit: Dict[str, List[PitEntry]] = dict()
        self.received: Dict[str, List[PitEntry]] = dict()
        self.seen: Dict[int, int] = dict()
        self._seen_until: List[Tuple[int, int]] = list()

    def remember(self, nonce: int, until: int):
        self.seen[nonce] = until
        heapq.heappush(self._seen_until, (until, nonce))

    def forget_seen(self, now: int):
        while self._seen_until and self._seen_until[0][0] <= now:
            until, nonce = heapq.heappop(self._seen_until)
            if self.seen.get(nonce) == until:
                del self.seen[nonce]

    def lookup(self, name: StructuredName) -> Optional[str]:
        components = names.name_components(name)
        for length in range(len(components), 0, -1):
            hop = self.fib.get("/" + "/".join(components[:length]))
            if hop is not None:
                return hop
        return None

class Port:
    """
    A node's only handle on the network: its own clock reading, its own packets and timers.
    """
    def __init__(self, fabric: "Fabric", node: str, incarnation: int):
        self._fabric = fabric
        self.node = node
        self._incarnation = incarnation

    @property
    def now(self) -> int:
        return self._fabric.now

    @property
    def alive(self) -> bool:
        ep = self._fabric._endpoints[self.node]
        return ep.alive and ep.incarnation == self._incarnation

    @property
    def interest_lifetime(self) -> int:
        return self._fabric.interest_lifetime

    def _check(self):
        if not self.alive:
            raise NodeDownError(f"{self.node} is down")

    def express(self, name: StructuredName, lifetime: Optional[int]=None) -> PendingHandle:
        self._check()
        interest = Interest(name, self._fabric._new_nonce(), self.now, lifetime or self._fabric.interest_lifetime)
        return self._fabric.express_interest(self.node, interest)

    def satisfy(self, name: StructuredName, payload: bytes):
        self._check()
        self._fabric.satisfy_interest(self.node, name, payload)

    def holds(self, name: StructuredName) -> bool:
        return self.alive and bool(self._fabric._endpoints[self.node].received.get(str(name)))

    def register_prefix(self, pfx: str):
        self._check()
        self._fabric.register_prefix(self.node, pfx)

    def set_timer(self, delay: int, callback: Callable, *args):
        self._check()
        self._fabric._timer(self.node, self._incarnation, delay, callback, args)

    def record(self, ev: str, **fields) -> Record:
        self._check()
        return self._fabric.record(ev, node=self.node, **fields)

class Fabric:
    def __init__(self,
                 topology: Topology,
                 trace: Optional[Trace]=None,
                 interest_lifetime: int=DEFAULT_INTEREST_LIFETIME):
        self.topology = topology
        self.trace = trace if trace is not None else Trace()
        self.interest_lifetime = interest_lifetime
        self.env = simpy.Environment()
        self.dropped = 0
        self._graph = topology.graph()
        self._order = topology.endpoints
        self._endpoints = {ident: _Endpoint(ident, ident in topology.routers) for ident in self._order}
        self._registry: Dict[str, str] = dict()
        self._paths: Dict[str, Dict[str, List[str]]] = dict()
        self._nonces = itertools.count(1)
        self._handle_ids = itertools.count(1)
        self._live_nonces: Set[int] = set()

    @property
    def now(self) -> int:
        return int(self.env.now)

    def record(self, ev: str, **fields) -> Record:
        return self.trace.record(self.now, ev, **fields)

    def _endpoint(self, ident: str) -> _Endpoint:
        try:
            return self._endpoints[ident]
        except KeyError:
            raise TopologyError(f"Unknown endpoint '{ident}'")

    def _new_nonce(self) -> int:
        return next(self._nonces)

    def attach(self, node: str, handler: NodeHandler) -> Port:
        ep = self._endpoint(node)
        if not ep.alive:
            raise NodeDownError(f"Cannot attach to crashed node {node}")
        ep.handler = handler
        return Port(self, node, ep.incarnation)

    def is_alive(self, node: str) -> bool:
        return self._endpoint(node).alive

    def prefix_owner(self, pfx: str) -> Optional[str]:
        return self._registry.get(pfx)

    def fib(self, node: str) -> List[FibEntry]:
        return [FibEntry(p, hop) for p, hop in sorted(self._endpoint(node).fib.items())]

    def pit(self, node: str) -> List[PitEntry]:
        return [e for key in sorted(self._endpoint(node).pit) for e in self._endpoint(node).pit[key]]

    def received(self, node: str) -> List[PitEntry]:
        return [e for key in sorted(self._endpoint(node).received) for e in self._endpoint(node).received[key]]

    def schedule(self, at: int, callback: Callable, *args):
        """
        Run a driver action at absolute tick `at`. Driver actions are not node logic.
        """
        if at < self.now:
            raise ValueError(f"Cannot schedule at {at}, simulation is at {self.now}")
        self._after(at - self.now, callback, *args)

    def _after(self, delay: int, callback: Callable, *args):
        event = self.env.timeout(delay)
        event.callbacks.append(lambda _: callback(*args))

    def _timer(self, node: str, incarnation: int, delay: int, callback: Callable, args: tuple):
        def fire():
            ep = self._endpoints[node]
            if ep.alive and ep.incarnation == incarnation:
                callback(*args)
        self._after(delay, fire)

    def register_prefix(self, node: str, pfx: str):
        ep = self._endpoint(node)
        names.prefix_components(pfx)
        if not ep.alive:
            raise NodeDownError(f"{node} is down, cannot register {pfx}")
        owner = self._registry.get(pfx)
        if owner == node:
            return
        elif owner is not None:
            raise PrefixConflictError(f"{pfx} is already registered by {owner}")
        self._registry[pfx] = node
        self._install(pfx, node, self._order)

    def _install(self, pfx: str, owner: str, targets: Iterable[str]):
        if owner not in self._paths:
            self._paths[owner] = nx.single_source_dijkstra_path(self._graph, owner, weight="latency")
        paths = self._paths[owner]
        for ident in targets:
            ep = self._endpoints[ident]
            if not ep.alive or ident not in paths:
                continue
            hop = LOCAL_FACE if ident == owner else paths[ident][-2]
            ep.fib[pfx] = hop
            self.record("fib_add", node=ident, prefix=pfx, next_hop=hop)

    def express_interest(self, node: str, interest: Interest) -> PendingHandle:
        ep = self._endpoint(node)
        if not ep.alive:
            raise NodeDownError(f"{node} is down")
        if interest.nonce in self._live_nonces:
            raise ProtocolViolationError(f"Nonce {interest.nonce} is already pending")
        self._live_nonces.add(interest.nonce)
        handle = PendingHandle(next(self._handle_ids), node, interest)
        self.record("interest_sent", node=node, name=str(interest.name), nonce=interest.nonce)
        self._forward(ep, interest, LOCAL_FACE, handle)
        return handle

    def _forward(self, ep: _Endpoint, interest: Interest, face: str, handle: Optional[PendingHandle]=None):
        key = str(interest.name)
        ep.forget_seen(self.now)
        if interest.nonce in ep.seen:
            self.record("interest_dropped", node=ep.ident, name=key, nonce=interest.nonce, reason="loop")
            return
        ep.remember(interest.nonce, self.now + interest.lifetime)
        hop = ep.lookup(interest.name)
        entry = PitEntry(interest.name, face, interest.nonce, self.now, handle)
        if LOCAL_FACE == hop and LOCAL_FACE != face:
            self._add_entry(ep, "received", entry, interest.lifetime)
            self.record("interest_recv", node=ep.ident, name=key, nonce=interest.nonce, face=face)
            if ep.handler is not None:
                ep.handler.on_interest(interest)
            return
        self._add_entry(ep, "pit", entry, interest.lifetime)
        if LOCAL_FACE != face:
            self.record("pit_add", node=ep.ident, name=key, nonce=interest.nonce, face=face)
        if hop is None or LOCAL_FACE == hop:
            reason = "no_route" if hop is None else "self"
            self.record("interest_dropped", node=ep.ident, name=key, nonce=interest.nonce, reason=reason)
            logger.debug(f"{ep.ident} dropped {key}: {reason}")
            return
        self._transmit(ep.ident, hop, self._forward_arrival, interest)

    def _add_entry(self, ep: _Endpoint, which: str, entry: PitEntry, lifetime: int):
        getattr(ep, which).setdefault(str(entry.name), list()).append(entry)
        self._timer(ep.ident, ep.incarnation, lifetime, self._expire, (ep, which, entry))

    def _expire(self, ep: _Endpoint, which: str, entry: PitEntry):
        table = getattr(ep, which)
        key = str(entry.name)
        entries = table.get(key, [])
        if entry not in entries:
            return
        entries.remove(entry)
        if not entries:
            del table[key]
        if "pit" != which:
            return
        if entry.handle is not None:
            entry.handle.state = HandleState.expired
            self._live_nonces.discard(entry.nonce)
            self.record("interest_expired", node=ep.ident, name=key, nonce=entry.nonce)
            if ep.handler is not None:
                ep.handler.on_expired(entry.handle)
        else:
            self.record("pit_expire", node=ep.ident, name=key, nonce=entry.nonce)

    def _transmit(self, src: str, dst: str, arrival: Callable, packet: Any):
        latency = self._graph[src][dst]["latency"]
        incarnation = self._endpoints[dst].incarnation
        self._after(latency, self._arrive, src, dst, incarnation, arrival, packet)

    def _arrive(self, src: str, dst: str, incarnation: int, arrival: Callable, packet: Any):
        ep = self._endpoints[dst]
        if not ep.alive or ep.incarnation != incarnation:
            if isinstance(packet, Data):
                self.dropped += 1
                self.record("data_dropped", at=dst, name=str(packet.name), reason="down")
            else:
                self.record("interest_dropped", at=dst, name=str(packet.name), nonce=packet.nonce, reason="down")
            return
        arrival(ep, packet, src)

    def _forward_arrival(self, ep: _Endpoint, interest: Interest, src: str):
        self._forward(ep, interest, src)

    def _data_arrival(self, ep: _Endpoint, data: Data, src: str):
        key = str(data.name)
        entries = ep.pit.get(key)
        if not entries:
            self.dropped += 1
            self.record("data_dropped", node=ep.ident, name=key, reason="no_pit")
            logger.debug(f"{ep.ident} dropped Data {key}: no PIT entry")
            return
        entry = entries.pop(0)
        if not entries:
            del ep.pit[key]
        if LOCAL_FACE == entry.in_face:
            assert entry.handle is not None
            entry.handle.state = HandleState.satisfied
            self._live_nonces.discard(entry.nonce)
            self.record("data_recv", node=ep.ident, name=key, origin=data.origin, size=len(data.payload))
            if ep.handler is not None:
                ep.handler.on_data(data, entry.handle)
        else:
            self.record("pit_consume", node=ep.ident, name=key, face=entry.in_face)
            self._transmit(ep.ident, entry.in_face, self._data_arrival, data)

    def satisfy_interest(self, node: str, name: StructuredName, payload: bytes):
        ep = self._endpoint(node)
        if not ep.alive:
            raise NodeDownError(f"{node} is down")
        key = str(name)
        entries = ep.received.get(key)
        if not entries:
            raise ProtocolViolationError(f"{node} holds no unsatisfied interest {key}")
        entry = entries.pop(0)
        if not entries:
            del ep.received[key]
        data = Data(name, bytes(payload), node)
        self.record("data_sent", node=node, name=key, size=len(data.payload))
        self._transmit(node, entry.in_face, self._data_arrival, data)

    def crash_node(self, node: str):
        ep = self._endpoint(node)
        if not ep.alive:
            logger.info(f"{node} already crashed")
            return
        ep.alive = False
        ep.incarnation += 1
        ep.handler = None
        for entries in ep.pit.values():
            self._live_nonces.difference_update(e.nonce for e in entries if e.handle is not None)
        ep.reset()
        self.record("crash", node=node)
        logger.info(f"Crashed {node} at tick {self.now}")
        for pfx, owner in sorted(self._registry.items()):
            if owner == node:
                del self._registry[pfx]
                for ident in self._order:
                    other = self._endpoints[ident]
                    if other.alive and pfx in other.fib:
                        del other.fib[pfx]
                        self.record("fib_remove", node=ident, prefix=pfx)

    def restart_node(self, node: str):
        ep = self._endpoint(node)
        if ep.alive:
            raise NodeStateError(f"{node} is not crashed")
        ep.alive = True
        ep.reset()
        self.record("restart", node=node)
        logger.info(f"Restarted {node} at tick {self.now}")
        for pfx, owner in sorted(self._registry.items()):
            self._install(pfx, owner, [node])

    def run_until(self, t: int) -> List[Record]:
        """
        Process every event scheduled before tick `t`, leaving the clock at `t`.
        """
        start = len(self.trace)
        if t > self.env.now:
            self.env.run(until=t)
        return self.trace.since(start)

    def run_until_quiescent(self, limit: Optional[int]=None) -> List[Record]:
        start = len(self.trace)
        while True:
            next_time = self.env.peek()
            if next_time == simpy.core.Infinity:
                break
            if limit is not None and next_time >= limit:
                logger.warning(f"Stopped at tick limit {limit} with events pending")
                break
            self.env.step()
        return self.trace.since(start)
