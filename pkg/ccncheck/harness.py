"""
Scenario runner, fault injection and trace oracles.
"""
import os
import json
import random
import logging
import tempfile
from enum import Enum
from dataclasses import dataclass, field, fields, replace, asdict
from typing import Any, Dict, List, Optional, Tuple

from ccncheck import apps, concurrency
from ccncheck.apps import AppState, CounterApp, FibonacciApp
from ccncheck.fabric import DEFAULT_INTEREST_LIFETIME, Fabric, Topology, TopologyError
from ccncheck.trace import Trace
from ccncheck.store import LocalSnapshot, SnapshotStore
from ccncheck.process import ProcessNode
from ccncheck.checkpoint import (DEFAULT_CHECKPOINT_WINDOW, DEFAULT_MAX_RETRIES, DEFAULT_RETRY_DELAY, Coordinator,
                                 CheckpointInProgressError, in_flight_at, verify_consistency)
from ccncheck.recovery import (DEFAULT_DISCOVERY_MAX_WAITS, DEFAULT_DISCOVERY_RETRY_INTERVAL,
                               DEFAULT_DISCOVERY_TIMEOUT, NoCheckpointError, cold_plan, plan_restart, restart_all)


logger = logging.getLogger(__name__)

DEFAULT_MAX_TICKS = 100000
DEFAULT_RING = ("nodeA", "nodeB", "nodeC")
COORDINATOR = "coord"
APP_NAMESPACES = dict(fibonacci="fib", counter="counter")
ALL = "all"

class ScenarioError(Exception):
    pass

class Action(Enum):
    checkpoint = "checkpoint"
    crash = "crash"
    restart_all = "restart_all"
    restart = "restart"

@dataclass(frozen=True)
class ScenarioEvent:
    at: int
    action: Action
    node: Optional[str] = None
    delays: Tuple[Tuple[str, int], ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = dict(at=self.at, action=self.action.value)
        if self.node is not None:
            doc['node'] = self.node
        if self.delays:
            doc['delays'] = dict(self.delays)
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ScenarioEvent":
        try:
            return cls(at=int(doc['at']),
                       action=Action(doc['action']),
                       node=doc.get('node'),
                       delays=tuple(sorted(doc.get('delays', dict()).items())))
        except (KeyError, ValueError) as e:
            raise ScenarioError(f"Malformed event {doc}: {e}")

@dataclass(frozen=True)
class Settings:
    interest_lifetime: int = DEFAULT_INTEREST_LIFETIME
    checkpoint_window: int = DEFAULT_CHECKPOINT_WINDOW
    max_retries: int = DEFAULT_MAX_RETRIES
    retry_delay: int = DEFAULT_RETRY_DELAY
    discovery_timeout: int = DEFAULT_DISCOVERY_TIMEOUT
    discovery_retry_interval: int = DEFAULT_DISCOVERY_RETRY_INTERVAL
    discovery_max_waits: int = DEFAULT_DISCOVERY_MAX_WAITS
    max_ticks: int = DEFAULT_MAX_TICKS
    tick_interval: int = 5
    stagger: int = 10

    def recovery_options(self) -> Dict[str, int]:
        return dict(timeout=self.discovery_timeout,
                    retry_interval=self.discovery_retry_interval,
                    max_waits=self.discovery_max_waits)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "Settings":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ScenarioError(f"Unknown settings {unknown}")
        return cls(**{k: int(v) for k, v in doc.items()})

@dataclass(frozen=True)
class Scenario:
    app: str
    steps: int = 20
    nodes: Tuple[str, ...] = DEFAULT_RING
    topology: Optional[Topology] = None
    events: Tuple[ScenarioEvent, ...] = ()
    seed: int = 0
    settings: Settings = field(default_factory=Settings)
    name: str = "scenario"

    def __post_init__(self):
        if self.app not in APP_NAMESPACES:
            raise ScenarioError(f"Unknown app '{self.app}', expected one of {sorted(APP_NAMESPACES)}")
        if self.steps < 1:
            raise ScenarioError("steps must be positive")
        if not self.nodes or COORDINATOR in self.nodes:
            raise ScenarioError(f"Processes must be non-empty and may not be named '{COORDINATOR}'")
        endpoints = self.build_topology().endpoints
        for node in self.nodes + (COORDINATOR,):
            if node not in endpoints:
                raise ScenarioError(f"'{node}' is missing from the topology")
        previous = 0
        for ev in self.events:
            if ev.at <= previous:
                raise ScenarioError(f"Event times must be positive and strictly increasing, got {ev.at} after {previous}")
            previous = ev.at
            if Action.crash == ev.action and ev.node != ALL and ev.node not in endpoints:
                raise ScenarioError(f"Cannot crash unknown node '{ev.node}'")
            if Action.restart == ev.action and ev.node != COORDINATOR:
                raise ScenarioError(f"Only the coordinator restarts alone, got '{ev.node}'")

    @property
    def namespace(self) -> str:
        return APP_NAMESPACES[self.app]

    @property
    def has_faults(self) -> bool:
        return any(Action.checkpoint != ev.action for ev in self.events)

    def build_topology(self) -> Topology:
        if self.topology is not None:
            return self.topology
        return Topology.star(self.nodes + (COORDINATOR,), seed=self.seed)

    def initial_app(self, node: str) -> AppState:
        if "fibonacci" == self.app:
            return FibonacciApp(ring=self.nodes, node=node, steps=self.steps)
        return CounterApp(value=0, tick_interval=self.settings.tick_interval, steps=self.steps)

    def start_delays(self) -> Dict[str, int]:
        if "counter" != self.app:
            return {node: 0 for node in self.nodes}
        rng = random.Random(self.seed)
        return {node: rng.randint(0, self.settings.stagger) for node in self.nodes}

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = dict(name=self.name,
                                   app=self.app,
                                   steps=self.steps,
                                   nodes=list(self.nodes),
                                   events=[ev.to_dict() for ev in self.events],
                                   seed=self.seed,
                                   settings=asdict(self.settings))
        if self.topology is not None:
            doc['topology'] = self.topology.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any], basedir: str=".") -> "Scenario":
        topology = doc.get('topology')
        try:
            if isinstance(topology, str):
                topology = Topology.load(os.path.join(basedir, topology))
            elif isinstance(topology, dict):
                topology = Topology.from_dict(topology)
            return cls(app=doc['app'],
                       steps=int(doc.get('steps', 20)),
                       nodes=tuple(doc.get('nodes', DEFAULT_RING)),
                       topology=topology,
                       events=tuple(ScenarioEvent.from_dict(ev) for ev in doc.get('events', [])),
                       seed=int(doc.get('seed', 0)),
                       settings=Settings.from_dict(doc.get('settings', dict())),
                       name=doc.get('name', "scenario"))
        except (KeyError, TopologyError, OSError) as e:
            raise ScenarioError(f"Malformed scenario: {e}")

    @classmethod
    def load(cls, path: str) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), basedir=os.path.dirname(os.path.abspath(path)))

    def without_faults(self) -> "Scenario":
        return replace(self, events=tuple(ev for ev in self.events if Action.checkpoint == ev.action))

class ScenarioRunner:
    """
    Drives one scenario on a fresh fabric. Events are driver actions scheduled on the fabric's clock.
    """
    def __init__(self, scenario: Scenario, out_dir: str):
        self.scenario = scenario
        self.out_dir = out_dir
        store_root = os.path.join(out_dir, "store")
        if os.path.isdir(store_root) and os.listdir(store_root):
            raise ScenarioError(f"{store_root} is not empty")
        self.store = SnapshotStore(store_root)
        self.trace = Trace()
        self.fabric = Fabric(scenario.build_topology(), self.trace, scenario.settings.interest_lifetime)
        self.nodes: Dict[str, ProcessNode] = dict()
        self.coordinator: Optional[Coordinator] = None
        self._delays = scenario.start_delays()

    def run(self) -> Trace:
        s = self.scenario
        self.fabric.record("scenario_start", name=s.name, app=s.app, steps=s.steps, seed=s.seed)
        self._start_coordinator()
        for node in s.nodes:
            self._spawn(node, None)
            self.coordinator.register_process(node)  # type: ignore
        for node in s.nodes:
            self.nodes[node].launch()
        for ev in s.events:
            self.fabric.schedule(ev.at, self._apply, ev)
        self.fabric.run_until_quiescent(limit=s.settings.max_ticks)
        self.fabric.record("scenario_end")
        os.makedirs(self.out_dir, exist_ok=True)
        self.trace.write(os.path.join(self.out_dir, "trace.jsonl"))
        logger.info(f"Scenario {s.name} finished at tick {self.fabric.now} with {len(self.trace)} records")
        return self.trace

    def _start_coordinator(self):
        if not self.fabric.is_alive(COORDINATOR):
            self.fabric.restart_node(COORDINATOR)
        settings = self.scenario.settings
        self.coordinator = Coordinator(self.fabric,
                                       COORDINATOR,
                                       self.scenario.namespace,
                                       self.store,
                                       window=settings.checkpoint_window,
                                       max_retries=settings.max_retries,
                                       retry_delay=settings.retry_delay).start()

    def _spawn(self, node: str, snapshot: Optional[LocalSnapshot]) -> ProcessNode:
        s = self.scenario
        process = ProcessNode(self.fabric,
                              node,
                              s.namespace,
                              s.initial_app(node),
                              COORDINATOR,
                              self.store,
                              peers=list(s.nodes) if "fibonacci" == s.app else [],
                              start_delay=self._delays[node],
                              recovery_options=s.settings.recovery_options())
        process.start()
        if snapshot is not None:
            process.restore(snapshot)
        self.nodes[node] = process
        return process

    def _apply(self, ev: ScenarioEvent):
        logger.info(f"Tick {self.fabric.now}: {ev.action.value} {ev.node or ''}")
        if Action.checkpoint == ev.action:
            if not self.fabric.is_alive(COORDINATOR):
                logger.warning("Checkpoint requested while the coordinator is down")
                return
            try:
                self.coordinator.initiate_checkpoint()  # type: ignore
            except CheckpointInProgressError:
                pass
        elif Action.crash == ev.action:
            if ALL == ev.node:
                for endpoint in self.fabric.topology.endpoints:
                    self.fabric.crash_node(endpoint)
            else:
                self.fabric.crash_node(ev.node)  # type: ignore
        elif Action.restart == ev.action:
            if self.fabric.is_alive(COORDINATOR):
                logger.warning("Coordinator restart requested while it is running")
                return
            self._start_coordinator()
        elif Action.restart_all == ev.action:
            self._restart_all(dict(ev.delays))

    def _restart_all(self, delays: Dict[str, int]):
        for node in self.scenario.nodes:
            if self.fabric.is_alive(node):
                self.fabric.crash_node(node)
        for router in self.fabric.topology.routers:
            if not self.fabric.is_alive(router):
                self.fabric.restart_node(router)
        if not self.fabric.is_alive(COORDINATOR):
            self._start_coordinator()
        try:
            plan = plan_restart(self.store)
        except NoCheckpointError:
            logger.warning("No committed checkpoint, restarting from initial state")
            plan = cold_plan(list(self.scenario.nodes))
        restart_all(self.fabric, plan, self._spawn, delays)

def run_scenario(s: Scenario, out_dir: Optional[str]=None) -> Trace:
    return ScenarioRunner(s, out_dir or tempfile.mkdtemp(prefix="ccncheck-")).run()

def oracle_failure_free(s: Scenario) -> Trace:
    """Run `s` with its crash and restart events stripped. Checkpoints are kept."""
    return run_scenario(s.without_faults())

Outputs = Dict[str, Dict[int, str]]

def project_outputs(trace: Trace) -> Tuple[Outputs, List[str]]:
    """
    Per-node application outputs keyed by step index. Replays of a step after restart collapse onto the first
    occurrence; a replay with a different value is reported as a conflict.
    """
    outputs: Outputs = dict()
    conflicts = list()
    for rec in trace.select("app_output"):
        seen = outputs.setdefault(rec['node'], dict())
        step, value = rec['step'], rec['value']
        if step in seen and seen[step] != value:
            conflicts.append(f"{rec['node']} step {step} produced {seen[step]} then {value}")
        seen.setdefault(step, value)
    return outputs, conflicts

@dataclass
class EquivalenceReport:
    equal: bool
    divergence: Optional[Tuple[str, Optional[int], Optional[str], Optional[str]]] = None
    conflicts: List[str] = field(default_factory=list)

    def __str__(self) -> str:
        if self.equal:
            return "equal"
        if self.divergence is None:
            return f"unequal: {self.conflicts}"
        node, step, expected, actual = self.divergence
        return f"unequal at {node} step {step}: expected {expected}, got {actual}"

def check_output_equivalence(t_ref: Trace, t_faulty: Trace) -> EquivalenceReport:
    ref, _ = project_outputs(t_ref)
    faulty, conflicts = project_outputs(t_faulty)
    for node in sorted(set(ref) | set(faulty)):
        expected = sorted(ref.get(node, dict()).items())
        actual = sorted(faulty.get(node, dict()).items())
        for i in range(max(len(expected), len(actual))):
            e = expected[i] if i < len(expected) else (None, None)
            a = actual[i] if i < len(actual) else (None, None)
            if e != a:
                return EquivalenceReport(False, (node, a[0] if e[0] is None else e[0], e[1], a[1]), conflicts)
    return EquivalenceReport(not conflicts, None, conflicts)

def eras(trace: Trace) -> List[List[dict]]:
    """Split a trace at each `restart_all`; transfer ids are unique within an era."""
    split: List[List[dict]] = [[]]
    for rec in trace:
        if "restart_all" == rec['ev']:
            split.append([])
        split[-1].append(rec)
    return split

def check_handshakes(trace: Trace) -> List[str]:
    violations = list()
    for era in eras(trace):
        rts: Dict[Tuple[str, int], List[int]] = dict()
        sent: Dict[Tuple[str, int], List[int]] = dict()
        cts: Dict[Tuple[str, str], List[int]] = dict()
        last_seq: Dict[Tuple[str, str], int] = dict()
        for rec in era:
            if rec.get('ctl'):
                continue
            ev = rec['ev']
            if "rts_issued" == ev:
                rts.setdefault((rec['node'], rec['transfer']), list()).append(rec['seq'])
            elif "cts_issued" == ev:
                cts.setdefault((rec['node'], rec['peer']), list()).append(rec['seq'])
            elif "payload_sent" == ev:
                sent.setdefault((rec['node'], rec['transfer']), list()).append(rec['seq'])
            elif "payload_delivered" == ev:
                key = (rec['peer'], rec['transfer'])
                r, s = rts.get(key, []), sent.get(key, [])
                if 1 != len(r) or 1 != len(s):
                    violations.append(f"transfer {rec['transfer']} has {len(r)} RTS and {len(s)} payloads")
                    continue
                if not r[0] < s[0] < rec['seq']:
                    violations.append(f"transfer {rec['transfer']} is out of RTS, payload, delivery order")
                if not any(r[0] < c < s[0] for c in cts.get((rec['node'], rec['peer']), [])):
                    violations.append(f"transfer {rec['transfer']} has no CTS between RTS and payload")
                channel = (rec['peer'], rec['node'])
                if channel in last_seq and rec['channel_seq'] != last_seq[channel] + 1:
                    violations.append(f"channel {channel} delivered {rec['channel_seq']} after {last_seq[channel]}")
                last_seq[channel] = rec['channel_seq']
    return violations

def check_blocking(trace: Trace) -> List[str]:
    violations = list()
    suspended: Dict[str, int] = dict()
    for rec in trace:
        ev, node = rec['ev'], rec.get('node')
        if "suspend" == ev:
            suspended[node] = rec['epoch']
        elif ev in ("resume", "crash"):
            suspended.pop(node, None)
        elif "rts_issued" == ev and not rec.get('ctl') and node in suspended:
            violations.append(f"{node} issued RTS {rec['name']} while suspended for epoch {suspended[node]}")
    return violations

def check_drain(trace: Trace) -> List[str]:
    violations = list()
    for rec in trace.select("snapshot"):
        count = in_flight_at(trace, rec['seq'], rec['node'])
        if count:
            violations.append(f"{rec['node']} snapshot of epoch {rec['epoch']} with {count} transfers in flight")
    return violations

def check_fail_stop(trace: Trace) -> List[str]:
    violations = list()
    down = set()
    for rec in trace:
        ev, node = rec['ev'], rec.get('node')
        if "crash" == ev:
            down.add(node)
        elif "restart" == ev:
            down.discard(node)
        elif node in down:
            violations.append(f"crashed {node} recorded {ev} at tick {rec['t']}")
    return violations

def check_fibonacci(trace: Trace, steps: int) -> List[str]:
    outputs, conflicts = project_outputs(trace)
    merged: Dict[int, str] = dict()
    for node in sorted(outputs):
        merged.update(outputs[node])
    expected = {k: str(apps.fibonacci(k)) for k in range(1, steps + 1)}
    if merged != expected:
        wrong = sorted(k for k in set(merged) | set(expected) if merged.get(k) != expected.get(k))
        return conflicts + [f"fibonacci outputs differ at steps {wrong[:5]}"]
    return conflicts

def check_counter(trace: Trace, store: SnapshotStore) -> List[str]:
    outputs, violations = project_outputs(trace)
    for node, seen in sorted(outputs.items()):
        if sorted(seen) != list(range(1, len(seen) + 1)):
            violations.append(f"{node} counted with gaps: {sorted(seen)}")
        if any(str(step) != value for step, value in seen.items()):
            violations.append(f"{node} output a value different from its step")
    for restart in trace.select("restart_all"):
        for node in restart['processes']:
            if restart.get('epoch') is None:
                value = 0
            else:
                app = apps.deserialize(store.get_snapshot(restart['epoch'], node).app_state)
                value = app.value  # type: ignore
            after = [r for r in trace.since(restart['seq']) if "app_output" == r['ev'] and node == r['node']]
            if after and after[0]['step'] != value + 1:
                violations.append(f"{node} resumed at {after[0]['step']}, expected {value + 1}")
    return violations

@dataclass
class Evaluation:
    scenario: Scenario
    out_dir: str
    trace: Trace
    committed: List[int]
    violations: List[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def digest(self) -> str:
        return self.trace.digest()

    def summary(self) -> str:
        lines = [f"scenario:  {self.scenario.name} (app={self.scenario.app}, seed={self.scenario.seed})",
                 f"trace:     {os.path.join(self.out_dir, 'trace.jsonl')} ({len(self.trace)} records)",
                 f"digest:    {self.digest}",
                 f"committed: {self.committed}",
                 f"status:    {'ok' if self.ok else 'FAILED'}"]
        lines.extend(f"  {v}" for v in self.violations)
        return os.linesep.join(lines)

def evaluate(s: Scenario, out_dir: Optional[str]=None, reference: Optional[Trace]=None) -> Evaluation:
    out_dir = out_dir or tempfile.mkdtemp(prefix="ccncheck-")
    runner = ScenarioRunner(s, out_dir)
    trace = runner.run()
    violations = check_handshakes(trace) + check_blocking(trace) + check_drain(trace) + check_fail_stop(trace)
    committed = runner.store.committed_epochs()
    for epoch in committed:
        report = verify_consistency(runner.store.load_global(epoch), trace)
        if not report.consistent:
            violations.append(f"epoch {epoch} is inconsistent: {report}")
    if "fibonacci" == s.app:
        violations += check_fibonacci(trace, s.steps)
    else:
        violations += check_counter(trace, runner.store)
    if s.has_faults:
        equivalence = check_output_equivalence(reference or oracle_failure_free(s), trace)
        if not equivalence.equal:
            violations.append(f"outputs {equivalence}")
    return Evaluation(s, out_dir, trace, committed, violations)

def output_horizon(trace: Trace) -> int:
    """Tick of the last application output."""
    ticks = [rec['t'] for rec in trace.select("app_output")]
    return max(ticks) if ticks else 1

def seeded_variant(s: Scenario, seed: int, horizon: int, faults: bool=True) -> Scenario:
    """
    A copy of `s` with a checkpoint at a seed-chosen tick and, with `faults`, a later crash of every endpoint
    followed by a restart from the latest committed epoch.
    """
    rng = random.Random(seed)
    checkpoint_at = rng.randint(1, max(1, horizon - 1))
    events = [ScenarioEvent(checkpoint_at, Action.checkpoint)]
    if faults:
        crash_at = rng.randint(checkpoint_at + 1, checkpoint_at + horizon)
        events.append(ScenarioEvent(crash_at, Action.crash, ALL))
        events.append(ScenarioEvent(crash_at + rng.randint(1, 10), Action.restart_all))
    return replace(s, seed=seed, events=tuple(events), name=f"{s.name}-{seed}")

def sweep(s: Scenario,
          seeds: int,
          workers: Optional[int]=None,
          faults: bool=True,
          out_root: Optional[str]=None) -> List[Evaluation]:
    horizon = output_horizon(run_scenario(replace(s, events=())))

    def job(seed: int) -> Evaluation:
        out_dir = os.path.join(out_root, f"seed-{seed}") if out_root else None
        return evaluate(seeded_variant(s, seed, horizon, faults), out_dir)

    evaluations: List[Evaluation] = list()
    jobs = concurrency.async_set(concurrency.resolve_workers(workers))
    for seed in range(seeds):
        jobs.put(job, seed)
        evaluations.extend(jobs.consume_finished())
    evaluations.extend(jobs.consume())
    return sorted(evaluations, key=lambda e: e.scenario.seed)
