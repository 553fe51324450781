"""
Deterministic applications run by process nodes.

Application state is an immutable value, so a snapshot is its serialization and a step is
a pure function of (state, inbound message).
"""
import json
from dataclasses import dataclass, asdict, replace
from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union


class AppStep(NamedTuple):
    state: "AppState"
    sends: List[Tuple[str, bytes]]
    outputs: List[Tuple[int, str]]

@dataclass(frozen=True)
class CounterApp:
    """
    Increments on a timer every `tick_interval` ticks until `steps` increments have happened.
    """
    value: int = 0
    tick_interval: int = 1
    steps: int = 10
    kind: str = "counter"

    @property
    def finished(self) -> bool:
        return self.value >= self.steps

    def step(self) -> AppStep:
        nxt = replace(self, value=self.value + 1)
        return AppStep(nxt, [], [(nxt.value, str(nxt.value))])

@dataclass(frozen=True)
class FibonacciApp:
    """
    One member of a ring that passes (prev, curr, index) around, each member computing the next term.
    """
    ring: Tuple[str, ...]
    node: str
    prev: int = 0
    curr: int = 0
    index: int = 0
    steps: int = 20
    kind: str = "fibonacci"

    @property
    def next_node(self) -> str:
        return self.ring[(self.ring.index(self.node) + 1) % len(self.ring)]

    @property
    def is_origin(self) -> bool:
        return self.ring[0] == self.node

    def bootstrap(self) -> AppStep:
        if not self.is_origin or self.index:
            return AppStep(self, [], [])
        nxt = replace(self, prev=0, curr=1, index=1)
        return AppStep(nxt, nxt._sends(), [(1, "1")])

    def receive(self, payload: bytes) -> AppStep:
        prev, curr, index = json.loads(payload.decode("utf-8"))
        nxt = replace(self, prev=curr, curr=prev + curr, index=index + 1)
        outputs = [(nxt.index, str(nxt.curr))] if nxt.index <= self.steps else []
        return AppStep(nxt, nxt._sends(), outputs)

    def _sends(self) -> List[Tuple[str, bytes]]:
        if self.index >= self.steps:
            return []
        body = json.dumps([self.prev, self.curr, self.index]).encode("utf-8")
        return [(self.next_node, body)]

AppState = Union[CounterApp, FibonacciApp]

def app_step(app: AppState, inbound: Optional[bytes]=None) -> AppStep:
    if isinstance(app, CounterApp):
        if inbound is not None:
            raise ValueError("Counter apps take no inbound messages")
        return app.step()
    elif inbound is None:
        return app.bootstrap()
    else:
        return app.receive(inbound)

def to_dict(app: AppState) -> Dict[str, Any]:
    doc = asdict(app)
    if "ring" in doc:
        doc['ring'] = list(doc['ring'])
    return doc

def from_dict(doc: Dict[str, Any]) -> AppState:
    doc = dict(doc)
    kind = doc.get('kind')
    if "counter" == kind:
        return CounterApp(**doc)
    elif "fibonacci" == kind:
        doc['ring'] = tuple(doc['ring'])
        return FibonacciApp(**doc)
    raise ValueError(f"Unknown application kind '{kind}'")

def serialize(app: AppState) -> bytes:
    return json.dumps(to_dict(app), sort_keys=True).encode("utf-8")

def deserialize(blob: bytes) -> AppState:
    return from_dict(json.loads(blob.decode("utf-8")))

def fibonacci(n: int) -> int:
    a, b = 0, 1
    for _ in range(n):
        a, b = b, a + b
    return a
