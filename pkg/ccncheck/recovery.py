"""
Restart from a committed global checkpoint.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Set

from ccncheck.names import Signal, StructuredName
from ccncheck.fabric import Data, Fabric, PendingHandle, Port
from ccncheck.messaging import Messenger
from ccncheck.store import LocalSnapshot, SnapshotStore


logger = logging.getLogger(__name__)

DISCOVERY_ATTEMPTS = 3
DEFAULT_DISCOVERY_TIMEOUT = 20
DEFAULT_DISCOVERY_RETRY_INTERVAL = 100
DEFAULT_DISCOVERY_MAX_WAITS = 5

class RecoveryError(Exception):
    pass

class NoCheckpointError(RecoveryError):
    pass

@dataclass
class RestartPlan:
    epoch: Optional[int]
    processes: List[str]
    pending_to_reissue: Dict[str, List[StructuredName]] = field(default_factory=dict)
    snapshots: Dict[str, LocalSnapshot] = field(default_factory=dict, repr=False)

    @property
    def cold(self) -> bool:
        return self.epoch is None

def plan_restart(store: SnapshotStore, epoch: Optional[int]=None) -> RestartPlan:
    if epoch is None:
        epoch = store.latest_committed()
        if epoch is None:
            raise NoCheckpointError(f"No committed epoch in {store.root}")
    manifest = store.manifest(epoch)
    if manifest is None or not manifest['committed']:
        raise RecoveryError(f"Epoch {epoch} is not committed")
    g = store.load_global(epoch)
    return RestartPlan(epoch=epoch,
                       processes=g.processes,
                       pending_to_reissue={p: list(s.unanswered_interests) for p, s in g.snapshots.items()},
                       snapshots=dict(g.snapshots))

def cold_plan(processes: List[str]) -> RestartPlan:
    """Relaunch every process from its initial application state."""
    return RestartPlan(epoch=None, processes=sorted(processes), pending_to_reissue={p: [] for p in processes})

Spawn = Callable[[str, Optional[LocalSnapshot]], Any]

def restart_all(fabric: Fabric, plan: RestartPlan, spawn: Spawn, delays: Optional[Dict[str, int]]=None):
    """
    Restart every process of `plan`. `spawn` attaches a process to the fabric, registers its prefix and restores
    its snapshot; the process then runs discovery and re-issues its pending interests before resuming.
    """
    for process in plan.processes:
        if fabric.is_alive(process):
            raise RecoveryError(f"{process} must be halted before restart")
    for router in fabric.topology.routers:
        if not fabric.is_alive(router):
            fabric.restart_node(router)
    fabric.record("restart_all", epoch=plan.epoch, processes=plan.processes)
    logger.info(f"Restarting {plan.processes} from " + ("initial state" if plan.cold else f"epoch {plan.epoch}"))
    delays = delays or dict()
    for process in plan.processes:
        delay = delays.get(process, 0)
        if delay:
            fabric.schedule(fabric.now + delay, _restart_one, fabric, plan, spawn, process)
        else:
            _restart_one(fabric, plan, spawn, process)

def _restart_one(fabric: Fabric, plan: RestartPlan, spawn: Spawn, process: str):
    fabric.restart_node(process)
    node = spawn(process, plan.snapshots.get(process))
    node.recover(plan.pending_to_reissue.get(process, []))

class RecoveryAgent:
    """
    Discovery sends one DISCOVER per missing peer per round. The first rounds double the interest lifetime;
    afterwards rounds repeat on a timer, and after `max_waits` of them recovery proceeds with the peers found.
    """
    def __init__(self,
                 port: Port,
                 app: str,
                 peers: List[str],
                 pending: List[StructuredName],
                 messenger: Messenger,
                 on_complete: Callable[[], None],
                 timeout: int=DEFAULT_DISCOVERY_TIMEOUT,
                 retry_interval: int=DEFAULT_DISCOVERY_RETRY_INTERVAL,
                 max_waits: int=DEFAULT_DISCOVERY_MAX_WAITS,
                 attempts: int=DISCOVERY_ATTEMPTS):
        self.port = port
        self.app = app
        self.peers = sorted(peers)
        self.pending = list(pending)
        self.messenger = messenger
        self.on_complete = on_complete
        self.timeout = timeout
        self.retry_interval = retry_interval
        self.max_waits = max_waits
        self.attempts = attempts
        self.discovered: Set[str] = set()
        self.complete = False
        self._attempt = 0
        self._waits = 0
        self._handles: Dict[int, str] = dict()

    def begin(self):
        self.port.record("recovery_start", peers=self.peers, pending=len(self.pending))
        self.discover_peers()

    def discover_peers(self) -> Set[str]:
        missing = [p for p in self.peers if p not in self.discovered]
        if not missing:
            self._finish()
            return self.discovered
        self._attempt += 1
        lifetime = self.timeout * 2 ** (min(self._attempt, self.attempts) - 1)
        for peer in missing:
            self.port.record("discover_sent", peer=peer, attempt=self._attempt)
            handle = self.port.express(StructuredName(self.app, peer, Signal.DISCOVER), lifetime=lifetime)
            self._handles[handle.id] = peer
        return self.discovered

    def on_data(self, data: Data, handle: PendingHandle) -> bool:
        peer = self._handles.pop(handle.id, None)
        if peer is None:
            return False
        self.discovered.add(peer)
        self.port.record("discover_ok", peer=peer)
        self._round_settled()
        return True

    def on_expired(self, handle: PendingHandle) -> bool:
        peer = self._handles.pop(handle.id, None)
        if peer is None:
            return False
        self._round_settled()
        return True

    def _round_settled(self):
        if self._handles or self.complete:
            return
        if self.discovered >= set(self.peers):
            self._finish()
        elif self._attempt < self.attempts:
            self.discover_peers()
        elif self._waits < self.max_waits:
            self._waits += 1
            logger.warning(f"{self.port.node} still missing {sorted(set(self.peers) - self.discovered)}, "
                           f"retrying in {self.retry_interval} ticks")
            self.port.set_timer(self.retry_interval, self.discover_peers)
        else:
            logger.warning(f"{self.port.node} giving up on {sorted(set(self.peers) - self.discovered)}")
            self._finish()

    def resolve_pending(self):
        for name in self.pending:
            if self.messenger.reissue(name):
                self.port.record("pending_reissued", name=str(name))

    def _finish(self):
        if self.complete:
            return
        self.complete = True
        self.resolve_pending()
        self.port.record("recovery_complete", discovered=sorted(self.discovered))
        logger.info(f"{self.port.node} recovered, discovered {sorted(self.discovered)}")
        self.on_complete()
