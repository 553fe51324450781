"""
Blocking coordinated checkpointing.

A named, stateless coordinator drives each epoch through three one-way CHECK signals:

    check@E     processes suspend application sends and flush their outbound channels
    snapshot@E  once every process reported drained, each persists a LocalSnapshot
    resume@E    once every process reported done, the epoch is committed and processes resume

Processes report back to the coordinator with control transfers over RTS/CTS.
"""
import json
import logging
from enum import Enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from ccncheck.names import Signal, StructuredName, flusher_of, marker, prefix
from ccncheck.fabric import Fabric, Interest, Data, NodeHandler, PendingHandle, Port
from ccncheck.messaging import Direction, Messenger
from ccncheck.store import GlobalCheckpoint, LocalSnapshot, SnapshotStore
from ccncheck.trace import Trace


logger = logging.getLogger(__name__)

DEFAULT_CHECKPOINT_WINDOW = 1000
DEFAULT_MAX_RETRIES = 2
DEFAULT_RETRY_DELAY = 50

class CheckpointError(Exception):
    pass

class CheckpointInProgressError(CheckpointError):
    pass

class UnknownProcessError(CheckpointError):
    pass

class Phase(Enum):
    check = "check"
    snapshot = "snapshot"
    resume = "resume"

class Report(Enum):
    drained = "drained"
    done = "done"
    abort = "abort"

def encode_report(epoch: int, report: Report, process: str) -> bytes:
    return json.dumps(dict(epoch=epoch, report=report.value, process=process), sort_keys=True).encode("utf-8")

def decode_report(body: bytes) -> Tuple[int, Report, str]:
    doc = json.loads(body.decode("utf-8"))
    return doc['epoch'], Report(doc['report']), doc['process']

@dataclass
class CoordinatorConfig:
    name: str
    registered: Set[str] = field(default_factory=set)
    epoch: int = 0

@dataclass
class FlushState:
    peer: str
    flush_sent: StructuredName
    acked: bool = False

class Coordinator(NodeHandler):
    """
    Everything that must survive a coordinator crash lives in the snapshot store: the registry and the epoch
    counter. In-memory state covers only the epoch currently in progress.
    """
    def __init__(self,
                 fabric: Fabric,
                 name: str,
                 app: str,
                 store: SnapshotStore,
                 window: int=DEFAULT_CHECKPOINT_WINDOW,
                 max_retries: int=DEFAULT_MAX_RETRIES,
                 retry_delay: int=DEFAULT_RETRY_DELAY):
        self.fabric = fabric
        self.name = name
        self.app = app
        self.store = store
        self.window = window
        self.max_retries = max_retries
        self.retry_delay = retry_delay
        self.port: Optional[Port] = None
        self.messenger: Optional[Messenger] = None
        self._clear()
        self._attempts = 0

    def _clear(self):
        self.in_progress: Optional[int] = None
        self.phase: Optional[Phase] = None
        self._participants: List[str] = list()
        self._reports: Dict[Report, Set[str]] = defaultdict(set)

    @property
    def config(self) -> CoordinatorConfig:
        return CoordinatorConfig(self.name, set(self.store.load_registry()), self.store.latest_epoch())

    def start(self) -> "Coordinator":
        self.port = self.fabric.attach(self.name, self)
        self.messenger = Messenger(self.port, self.app, control_only=True, on_delivered=self._on_report)
        self.port.register_prefix(prefix(self.app, self.name))
        epoch = self.store.latest_epoch()
        manifest = self.store.manifest(epoch)
        if manifest is not None and not manifest['committed'] and not manifest.get('aborted'):
            # an epoch was left in progress by a previous incarnation
            self._participants = list(manifest['processes'])
            self.store.write_manifest(epoch, self._participants, committed=False, aborted=True)
            self.port.record("checkpoint_abort", epoch=epoch, reason="coordinator_restart")
            logger.warning(f"Coordinator {self.name} aborted epoch {epoch} left in progress")
            self._signal(Phase.resume, epoch)
            self._clear()
        return self

    def register_process(self, process: str):
        assert self.port is not None
        if self.fabric.prefix_owner(prefix(self.app, process)) != process:
            raise UnknownProcessError(f"{process} has not registered {prefix(self.app, process)}")
        registered = set(self.store.load_registry())
        if process in registered:
            return
        registered.add(process)
        self.store.save_registry(self.name, sorted(registered))
        self.port.record("register", process=process)

    def initiate_checkpoint(self) -> int:
        assert self.port is not None
        if self.in_progress is not None:
            self.port.record("checkpoint_rejected", epoch=self.in_progress)
            logger.warning(f"Checkpoint requested while epoch {self.in_progress} is in progress")
            raise CheckpointInProgressError(f"Epoch {self.in_progress} is still in progress")
        epoch = self.store.latest_epoch() + 1
        self.in_progress = epoch
        self.phase = Phase.check
        self._participants = sorted(self.store.load_registry())
        self.port.record("checkpoint_start", epoch=epoch, processes=self._participants)
        if not self._participants:
            self._reports[Report.done] = set()
            self.commit_global(epoch)
            return epoch
        self.store.write_manifest(epoch, self._participants, committed=False)
        self._signal(Phase.check, epoch)
        self.port.set_timer(self.window, self._window_expired, epoch)
        return epoch

    def _signal(self, phase: Phase, epoch: int):
        assert self.port is not None
        for process in self._participants:
            name = StructuredName(self.app, process, Signal.CHECK, marker=marker(phase.value, epoch))
            self.port.express(name)

    def _on_report(self, peer: str):
        assert self.messenger is not None
        for _, body in self.messenger.deliver_queue():
            epoch, report, process = decode_report(body)
            if epoch != self.in_progress:
                logger.debug(f"Ignoring {report.value} from {process} for epoch {epoch}")
                continue
            self._reports[report].add(process)
            if Report.abort == report:
                self._abort(epoch, f"abort from {process}")
            elif Report.drained == report and Phase.check == self.phase:
                if set(self._participants) <= self._reports[Report.drained]:
                    self.phase = Phase.snapshot
                    self._signal(Phase.snapshot, epoch)
            elif Report.done == report and Phase.snapshot == self.phase:
                if set(self._participants) <= self._reports[Report.done]:
                    self.commit_global(epoch)

    def commit_global(self, epoch: int) -> GlobalCheckpoint:
        assert self.port is not None
        if epoch != self.in_progress:
            raise CheckpointError(f"Epoch {epoch} is not in progress")
        missing = sorted(set(self._participants) - self._reports[Report.done])
        if missing:
            raise CheckpointError(f"Epoch {epoch} is missing snapshots from {missing}")
        self.store.write_manifest(epoch, self._participants, committed=True)
        g = self.store.load_global(epoch)
        self.port.record("checkpoint_commit", epoch=epoch, processes=self._participants)
        logger.info(f"Committed epoch {epoch} with {len(self._participants)} processes")
        self._signal(Phase.resume, epoch)
        self._clear()
        self._attempts = 0
        return g

    def _window_expired(self, epoch: int):
        if epoch == self.in_progress:
            self._abort(epoch, "window")

    def _abort(self, epoch: int, reason: str):
        assert self.port is not None
        self.store.write_manifest(epoch, self._participants, committed=False, aborted=True)
        self.port.record("checkpoint_abort", epoch=epoch, reason=reason)
        logger.warning(f"Aborted epoch {epoch}: {reason}")
        self._signal(Phase.resume, epoch)
        self._clear()
        if self._attempts < self.max_retries:
            self._attempts += 1
            self.port.set_timer(self.retry_delay, self._retry)
        else:
            self._attempts = 0

    def _retry(self):
        if self.in_progress is None:
            self.initiate_checkpoint()

    def on_interest(self, interest: Interest):
        assert self.messenger is not None
        if Signal.RTS == interest.name.signal:
            self.messenger.on_rts(interest)
        elif Signal.CTS == interest.name.signal:
            self.messenger.on_cts(interest)
        else:
            logger.debug(f"Coordinator {self.name} ignored {interest.name}")

    def on_data(self, data: Data, handle: PendingHandle):
        assert self.messenger is not None
        self.messenger.on_data(data, handle)

    def on_expired(self, handle: PendingHandle):
        assert self.messenger is not None
        self.messenger.on_expired(handle)

class CheckpointAgent:
    """
    Process side of the protocol. `capture` builds the process's LocalSnapshot for an epoch; `on_resume`
    hands control back to the application.
    """
    def __init__(self,
                 port: Port,
                 app: str,
                 messenger: Messenger,
                 coordinator: str,
                 store: SnapshotStore,
                 capture: Callable[[int], LocalSnapshot],
                 on_resume: Callable[[], None]):
        self.port = port
        self.app = app
        self.node = port.node
        self.messenger = messenger
        self.coordinator = coordinator
        self.store = store
        self.capture = capture
        self.on_resume = on_resume
        self.epoch: Optional[int] = None
        self.flushes: Dict[str, FlushState] = dict()
        self.drained = False
        self._flush_handles: Dict[int, str] = dict()
        self._held_flushes: List[Tuple[StructuredName, str]] = list()

    @property
    def suspended(self) -> bool:
        return self.epoch is not None

    def handle_check(self, name: StructuredName):
        if name.marker is None:
            logger.warning(f"{self.node} ignored {name} without a phase marker")
            return
        epoch: int = name.epoch  # type: ignore
        phase = Phase(name.phase)
        if Phase.check == phase:
            self._begin(epoch)
        elif Phase.snapshot == phase:
            if epoch == self.epoch and self.drained:
                self.snapshot()
            else:
                logger.warning(f"{self.node} got snapshot@{epoch} while not drained for it")
        elif Phase.resume == phase:
            self.resume(epoch)

    def _begin(self, epoch: int):
        if epoch == self.epoch:
            return
        if self.epoch is not None:
            logger.warning(f"{self.node} moving from unfinished epoch {self.epoch} to {epoch}")
        self.epoch = epoch
        self.drained = False
        self.messenger.suspend()
        self.port.record("suspend", epoch=epoch)
        self.flush_channels()
        self._check_drained()

    def flush_channels(self):
        if not self.messenger.suspended:
            raise CheckpointError(f"{self.node} must be suspended to flush")
        self.flushes = dict()
        self._flush_handles = dict()
        for log in self.messenger.channel_logs():
            if Direction.outbound != log.direction or not log.traffic_since_mark:
                continue
            name = StructuredName(self.app, log.peer, Signal.FLUSH, sender=self.node,
                                  appended=str(log.last_interest_sent))
            self.flushes[log.peer] = FlushState(log.peer, name)
            self.port.record("flush_sent", peer=log.peer, epoch=self.epoch, name=str(name))
            handle = self.port.express(name)
            self._flush_handles[handle.id] = log.peer

    def _check_drained(self):
        if self.epoch is None or self.drained:
            return
        if all(f.acked for f in self.flushes.values()) and 0 == self.messenger.pending_inbound():
            self.drained = True
            self.port.record("drained", epoch=self.epoch)
            self._report(Report.drained)

    def snapshot(self) -> LocalSnapshot:
        if self.epoch is None or not self.drained:
            raise CheckpointError(f"{self.node} cannot snapshot before its channels are drained")
        snap = self.capture(self.epoch)
        self.store.put_snapshot(snap)
        self.port.record("snapshot", epoch=self.epoch)
        for log in self.messenger.channel_logs():
            log.set_mark()
        self._report(Report.done)
        return snap

    def resume(self, epoch: int):
        if epoch != self.epoch:
            logger.debug(f"{self.node} ignored resume@{epoch}")
            return
        self.epoch = None
        self.flushes = dict()
        self._flush_handles = dict()
        self.port.record("resume", epoch=epoch)
        self.messenger.resume()
        self.on_resume()

    def _report(self, report: Report):
        assert self.epoch is not None
        self.messenger.send(self.coordinator, encode_report(self.epoch, report, self.node), control=True)

    def on_flush(self, interest: Interest):
        name = interest.name
        flusher = flusher_of(name)
        if 0 == self.messenger.pending_inbound(flusher):
            self._ack_flush(name, flusher)
        else:
            self._held_flushes.append((name, flusher))

    def _ack_flush(self, name: StructuredName, flusher: str):
        if self.port.holds(name):
            self.port.satisfy(name, b"")
            self.port.record("flush_ack", peer=flusher, name=str(name))

    def on_settled(self, peer: str):
        if 0 == self.messenger.pending_inbound(peer):
            held, self._held_flushes = self._held_flushes, list()
            for name, flusher in held:
                if flusher == peer:
                    self._ack_flush(name, flusher)
                else:
                    self._held_flushes.append((name, flusher))
        self._check_drained()

    def on_data(self, data: Data, handle: PendingHandle) -> bool:
        peer = self._flush_handles.pop(handle.id, None)
        if peer is None:
            return False
        self.flushes[peer].acked = True
        self._check_drained()
        return True

    def on_expired(self, handle: PendingHandle) -> bool:
        peer = self._flush_handles.pop(handle.id, None)
        if peer is None:
            return False
        logger.warning(f"{self.node} flush to {peer} timed out in epoch {self.epoch}")
        if self.epoch is not None:
            self._report(Report.abort)
        return True

@dataclass
class ConsistencyReport:
    epoch: int
    orphan_messages: List[Tuple[str, str, int]] = field(default_factory=list)
    orphan_interests: List[Tuple[str, str]] = field(default_factory=list)
    in_flight: List[Tuple[str, int]] = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return not (self.orphan_messages or self.orphan_interests or self.in_flight)

def era_start(trace: Trace, position: int) -> int:
    """Position of the last `restart_all` record before `position`; transfer ids are unique within an era."""
    start = 0
    for rec in trace.select("restart_all"):
        if rec['seq'] < position:
            start = rec['seq']
    return start

def in_flight_at(trace: Trace, position: int, node: str) -> int:
    """
    Application transfers on `node`'s channels that were issued but neither delivered nor failed
    before trace position `position`.
    """
    active: Dict[Tuple[str, int], bool] = dict()
    for rec in trace[era_start(trace, position):position]:
        if rec.get('ctl'):
            continue
        ev = rec['ev']
        if "rts_issued" == ev and node in (rec['node'], rec['peer']):
            active[(rec['node'], rec['transfer'])] = True
        elif "payload_delivered" == ev:
            active.pop((rec['peer'], rec['transfer']), None)
        elif "transfer_failed" == ev:
            active.pop((rec['node'], rec['transfer']), None)
    return len(active)

def verify_consistency(g: GlobalCheckpoint, trace: Optional[Trace]=None) -> ConsistencyReport:
    """
    Check that `g` is a consistent cut. Every message recorded as received in a snapshot must be recorded as
    sent in its sender's snapshot, and no snapshot may hold a CTS for a transfer its sender no longer has.
    With a trace, receipts before each snapshot event are checked against sends before the sender's snapshot
    event, and in-flight transfers are counted at each snapshot event.
    """
    report = ConsistencyReport(g.epoch)
    for process, snap in sorted(g.snapshots.items()):
        for log in snap.channel_logs:
            if Direction.inbound != log.direction:
                continue
            sender = g.snapshots.get(log.peer)
            outbound = sender.log(process, Direction.outbound) if sender else None
            sent = set(outbound.transfer_ids()) if outbound else set()
            for tid in log.transfer_ids():
                if tid not in sent:
                    report.orphan_messages.append((log.peer, process, tid))
        for name in snap.unanswered_interests:
            if Signal.CTS != name.signal:
                continue
            sender = g.snapshots.get(name.receiver)
            outstanding = [t for t in (sender.messenger.get('transfers', []) if sender else [])
                           if t['receiver'] == process]
            if not outstanding:
                report.orphan_interests.append((process, str(name)))
    if trace is not None:
        _verify_trace(g, trace, report)
    return report

def _verify_trace(g: GlobalCheckpoint, trace: Trace, report: ConsistencyReport):
    snapshots = {rec['node']: rec['seq'] for rec in trace.select("snapshot", epoch=g.epoch)}
    if not snapshots:
        return
    start = era_start(trace, min(snapshots.values()))
    sent: Dict[int, int] = dict()
    for rec in trace[start:]:
        if "payload_sent" == rec['ev'] and not rec.get('ctl'):
            sent.setdefault(rec['transfer'], rec['seq'])
    known = {o[2] for o in report.orphan_messages}
    for rec in trace[start:]:
        if "payload_delivered" != rec['ev'] or rec.get('ctl'):
            continue
        receiver, sender, tid = rec['node'], rec['peer'], rec['transfer']
        if receiver not in snapshots or rec['seq'] > snapshots[receiver]:
            continue
        sent_at = sent.get(tid)
        if tid not in known and (sent_at is None or sender not in snapshots or sent_at > snapshots[sender]):
            report.orphan_messages.append((sender, receiver, tid))
    for process, position in sorted(snapshots.items()):
        count = in_flight_at(trace, position, process)
        if count:
            report.in_flight.append((process, count))
