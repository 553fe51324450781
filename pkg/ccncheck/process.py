"""
Process runtime: one application instance on one node, layered as

    application  (apps)
    checkpoint   (CheckpointAgent, RecoveryAgent)
    communication (Messenger)
"""
import logging
from typing import Any, Dict, List, Optional

from ccncheck import apps
from ccncheck.apps import AppState, AppStep, CounterApp, FibonacciApp
from ccncheck.names import Signal, StructuredName, prefix
from ccncheck.fabric import Data, Fabric, Interest, NodeHandler, PendingHandle, Port
from ccncheck.messaging import ChannelLog, Messenger
from ccncheck.checkpoint import CheckpointAgent
from ccncheck.recovery import RecoveryAgent
from ccncheck.store import LocalSnapshot, SnapshotStore


logger = logging.getLogger(__name__)

ALIVE = b"alive"

class ProcessNode(NodeHandler):
    def __init__(self,
                 fabric: Fabric,
                 node: str,
                 app_name: str,
                 app: AppState,
                 coordinator: str,
                 store: SnapshotStore,
                 peers: List[str],
                 start_delay: int=0,
                 recovery_options: Optional[Dict[str, Any]]=None):
        self.fabric = fabric
        self.node = node
        self.app_name = app_name
        self.app = app
        self.coordinator = coordinator
        self.store = store
        self.peers = sorted(p for p in peers if p != node)
        self.start_delay = start_delay
        self.recovery_options = recovery_options or dict()
        self.running = False
        self.port: Optional[Port] = None
        self.messenger: Optional[Messenger] = None
        self.agent: Optional[CheckpointAgent] = None
        self.recovery: Optional[RecoveryAgent] = None

    def start(self) -> "ProcessNode":
        self.port = self.fabric.attach(self.node, self)
        self.messenger = Messenger(self.port,
                                   self.app_name,
                                   control_peers=[self.coordinator],
                                   on_delivered=self._on_delivered,
                                   on_settled=self._on_settled)
        self.agent = CheckpointAgent(self.port,
                                     self.app_name,
                                     self.messenger,
                                     self.coordinator,
                                     self.store,
                                     capture=self.capture,
                                     on_resume=self._consume)
        self.port.register_prefix(prefix(self.app_name, self.node))
        return self

    def restore(self, snapshot: LocalSnapshot):
        assert self.messenger is not None
        self.app = apps.deserialize(snapshot.app_state)
        self.peers = list(snapshot.peers)
        logs = [ChannelLog.from_dict(log.to_dict()) for log in snapshot.channel_logs]
        self.messenger.restore(snapshot.messenger, logs, snapshot.delivered_not_consumed)
        logger.info(f"{self.node} restored from epoch {snapshot.epoch}")

    def recover(self, pending: List[StructuredName]):
        """
        Rediscover peers and re-issue interests lost with the PIT, then launch the application.
        """
        assert self.port is not None and self.messenger is not None
        self.messenger.suspend()
        self.recovery = RecoveryAgent(self.port,
                                      self.app_name,
                                      self.peers,
                                      pending,
                                      self.messenger,
                                      on_complete=self._recovered,
                                      **self.recovery_options)
        self.recovery.begin()

    def _recovered(self):
        assert self.messenger is not None
        self.messenger.arm_timers()
        self.launch(delay=0)

    def launch(self, delay: Optional[int]=None):
        assert self.port is not None and self.messenger is not None
        self.running = True
        self.messenger.resume()
        delay = self.start_delay if delay is None else delay
        if isinstance(self.app, CounterApp):
            self.port.set_timer(delay + self.app.tick_interval, self._tick)
        elif delay:
            self.port.set_timer(delay, self._bootstrap)
        else:
            self._bootstrap()

    @property
    def suspended(self) -> bool:
        return self.agent is not None and self.agent.suspended

    def _tick(self):
        assert self.port is not None
        app = self.app
        assert isinstance(app, CounterApp)
        if app.finished:
            return
        if self.running and not self.suspended:
            self._apply(apps.app_step(app))
        if not self.app.finished:  # type: ignore
            self.port.set_timer(app.tick_interval, self._tick)

    def _bootstrap(self):
        self._apply(apps.app_step(self.app))
        self._consume()

    def _consume(self):
        assert self.messenger is not None
        if not self.running or self.suspended or isinstance(self.app, CounterApp):
            return
        for _, body in self.messenger.deliver_queue():
            self._apply(apps.app_step(self.app, body))

    def _apply(self, step: AppStep):
        assert self.port is not None and self.messenger is not None
        self.app = step.state
        for index, value in step.outputs:
            self.port.record("app_output", step=index, value=value)
        for receiver, payload in step.sends:
            self.messenger.send(receiver, payload)

    def _on_delivered(self, peer: str):
        self._consume()

    def _on_settled(self, peer: str):
        assert self.agent is not None
        self.agent.on_settled(peer)

    def capture(self, epoch: int) -> LocalSnapshot:
        assert self.port is not None and self.messenger is not None
        return LocalSnapshot(process=self.node,
                             epoch=epoch,
                             tick=self.port.now,
                             app_state=apps.serialize(self.app),
                             channel_logs=[ChannelLog.from_dict(log.to_dict())
                                           for log in self.messenger.channel_logs()],
                             unanswered_interests=self.messenger.unanswered_interests(),
                             delivered_not_consumed=self.messenger.undelivered(),
                             messenger=self.messenger.export_state(),
                             peers=list(self.peers))

    def on_interest(self, interest: Interest):
        assert self.port is not None and self.messenger is not None and self.agent is not None
        signal = interest.name.signal
        if Signal.RTS == signal:
            self.messenger.on_rts(interest)
        elif Signal.CTS == signal:
            self.messenger.on_cts(interest)
        elif Signal.FLUSH == signal:
            self.agent.on_flush(interest)
        elif Signal.CHECK == signal:
            self.agent.handle_check(interest.name)
        elif Signal.DISCOVER == signal:
            self.port.satisfy(interest.name, ALIVE)
        else:
            logger.warning(f"{self.node} ignored {interest.name}")

    def on_data(self, data: Data, handle: PendingHandle):
        assert self.messenger is not None and self.agent is not None
        if self.messenger.on_data(data, handle) or self.agent.on_data(data, handle):
            return
        if self.recovery is not None:
            self.recovery.on_data(data, handle)

    def on_expired(self, handle: PendingHandle):
        assert self.messenger is not None and self.agent is not None
        if self.messenger.on_expired(handle) or self.agent.on_expired(handle):
            return
        if self.recovery is not None:
            self.recovery.on_expired(handle)
