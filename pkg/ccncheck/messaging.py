"""
Sender-driven transfers over the pull-based fabric.

A sender expresses RTS to the receiver, the receiver answers with a CTS interest, and the
sender satisfies the CTS with the payload. Each ordered (sender, receiver) channel is FIFO,
enforced with sequence numbers carried in the payload framing.
"""
import base64
import struct
import logging
from enum import Enum
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Set, Tuple

from ccncheck import checksum
from ccncheck.names import Signal, StructuredName, parse_name
from ccncheck.fabric import Data, Interest, PendingHandle, Port, ProtocolViolationError


logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<QQQ")
CONTROL_SEQ = 0
"""Sequence number of control transfers, which bypass suspension, channel logs and FIFO ordering."""

class FramingError(ProtocolViolationError):
    pass

def frame(transfer_id: int, seq: int, body: bytes) -> bytes:
    return _HEADER.pack(transfer_id, seq, len(body)) + body

def unframe(payload: bytes) -> Tuple[int, int, bytes]:
    if len(payload) < _HEADER.size:
        raise FramingError(f"Payload of {len(payload)} bytes is shorter than the {_HEADER.size} byte header")
    transfer_id, seq, length = _HEADER.unpack_from(payload)
    body = payload[_HEADER.size:]
    if len(body) != length:
        raise FramingError(f"Framed length {length} does not match body length {len(body)}")
    return transfer_id, seq, body

class TransferState(Enum):
    RtsSent = "RtsSent"
    CtsReceived = "CtsReceived"
    DataSent = "DataSent"
    Delivered = "Delivered"
    Failed = "Failed"

_PROGRESSION = [TransferState.RtsSent, TransferState.CtsReceived, TransferState.DataSent, TransferState.Delivered]

@dataclass
class Transfer:
    id: int
    sender: str
    receiver: str
    payload: bytes
    rts_name: StructuredName
    cts_name: StructuredName
    seq: int
    control: bool = False
    state: TransferState = TransferState.RtsSent

    def __post_init__(self):
        assert self.cts_name.sender == self.receiver and self.cts_name.receiver == self.sender

    def advance(self, state: TransferState):
        if TransferState.Failed == self.state:
            raise ProtocolViolationError(f"Transfer {self.id} already failed")
        if TransferState.Failed != state and _PROGRESSION.index(state) <= _PROGRESSION.index(self.state):
            raise ProtocolViolationError(f"Transfer {self.id} cannot go from {self.state.value} to {state.value}")
        self.state = state

    def to_dict(self) -> Dict[str, Any]:
        return dict(id=self.id,
                    sender=self.sender,
                    receiver=self.receiver,
                    payload=base64.b64encode(self.payload).decode("ascii"),
                    rts_name=str(self.rts_name),
                    cts_name=str(self.cts_name),
                    seq=self.seq,
                    state=self.state.value)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "Transfer":
        return cls(id=doc['id'],
                   sender=doc['sender'],
                   receiver=doc['receiver'],
                   payload=base64.b64decode(doc['payload']),
                   rts_name=parse_name(doc['rts_name']),
                   cts_name=parse_name(doc['cts_name']),
                   seq=doc['seq'],
                   state=TransferState(doc['state']))

class Direction(Enum):
    outbound = "outbound"
    inbound = "inbound"

LogEntry = namedtuple("LogEntry", "transfer_id name tick")

@dataclass
class ChannelLog:
    peer: str
    direction: Direction
    entries: List[LogEntry] = field(default_factory=list)
    last_interest_sent: Optional[StructuredName] = None
    mark: int = 0

    def append(self, transfer_id: int, name: StructuredName, tick: int):
        if self.entries and tick < self.entries[-1].tick:
            raise ProtocolViolationError(f"Channel log for {self.peer} would go back in time")
        self.entries.append(LogEntry(transfer_id, name, tick))
        if Direction.outbound == self.direction:
            self.last_interest_sent = name

    @property
    def traffic_since_mark(self) -> bool:
        return len(self.entries) > self.mark

    def set_mark(self):
        self.mark = len(self.entries)

    def transfer_ids(self) -> List[int]:
        return [e.transfer_id for e in self.entries]

    def to_dict(self) -> Dict[str, Any]:
        return dict(peer=self.peer,
                    direction=self.direction.value,
                    entries=[[e.transfer_id, str(e.name), e.tick] for e in self.entries],
                    last_interest_sent=str(self.last_interest_sent) if self.last_interest_sent else None,
                    mark=self.mark)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ChannelLog":
        last = doc.get('last_interest_sent')
        return cls(peer=doc['peer'],
                   direction=Direction(doc['direction']),
                   entries=[LogEntry(tid, parse_name(name), tick) for tid, name, tick in doc['entries']],
                   last_interest_sent=parse_name(last) if last else None,
                   mark=doc.get('mark', 0))

class Messenger:
    """
    Per-node transfer state machines. Invoked only from the fabric's event loop.
    """
    def __init__(self,
                 port: Port,
                 app: str,
                 control_peers: Iterable[str]=(),
                 control_only: bool=False,
                 on_delivered: Optional[Callable[[str], None]]=None,
                 on_settled: Optional[Callable[[str], None]]=None):
        self.port = port
        self.app = app
        self.node = port.node
        self.control_peers = set(control_peers)
        self.control_only = control_only
        self.on_delivered = on_delivered
        self.on_settled = on_settled
        self.suspended = False
        self.transfers: Dict[int, Transfer] = dict()
        self.outbound_seq: Dict[str, int] = dict()
        self.delivered_seq: Dict[str, int] = dict()
        self.pending_cts: Dict[str, int] = dict()
        self.consumed: Set[int] = set()
        self.logs: Dict[Tuple[str, Direction], ChannelLog] = dict()
        self._counter = 0
        self._awaiting_cts: Dict[str, List[int]] = dict()
        self._rts_handles: Dict[int, int] = dict()
        self._cts_handles: Dict[int, str] = dict()
        self._unanswered: Dict[int, StructuredName] = dict()
        self._queued: List[Tuple[int, str, bytes]] = list()
        self._reorder: Dict[str, Dict[int, Tuple[int, bytes, StructuredName]]] = dict()
        self._deliveries: List[Tuple[str, bytes]] = list()

    def _is_control(self, peer: str) -> bool:
        return self.control_only or peer in self.control_peers

    def log(self, peer: str, direction: Direction) -> ChannelLog:
        key = (peer, direction)
        if key not in self.logs:
            self.logs[key] = ChannelLog(peer, direction)
        return self.logs[key]

    def channel_logs(self) -> List[ChannelLog]:
        return [self.logs[key] for key in sorted(self.logs, key=lambda k: (k[0], k[1].value))]

    def send(self, receiver: str, payload: bytes, control: bool=False) -> int:
        if receiver == self.node:
            raise ProtocolViolationError(f"{self.node} cannot send to itself")
        self._counter += 1
        tid = checksum.transfer_id(self.node, self._counter)
        control = control or self._is_control(receiver)
        if self.suspended and not control:
            self._queued.append((tid, receiver, bytes(payload)))
            self.port.record("send_queued", peer=receiver, transfer=tid)
            return tid
        self._start(tid, receiver, bytes(payload), control)
        return tid

    def _start(self, tid: int, receiver: str, payload: bytes, control: bool):
        if control:
            seq = CONTROL_SEQ
        else:
            seq = self.outbound_seq.get(receiver, 0) + 1
            self.outbound_seq[receiver] = seq
        rts = StructuredName(self.app, receiver, Signal.RTS, sender=self.node)
        cts = StructuredName(self.app, self.node, Signal.CTS, sender=receiver)
        transfer = Transfer(tid, self.node, receiver, payload, rts, cts, seq, control=control)
        self.transfers[tid] = transfer
        self._awaiting_cts.setdefault(receiver, list()).append(tid)
        if not control:
            self.log(receiver, Direction.outbound).append(tid, rts, self.port.now)
        self.port.record("rts_issued", peer=receiver, transfer=tid, channel_seq=seq, name=str(rts), ctl=control)
        self._express_rts(transfer)

    def _express_rts(self, transfer: Transfer):
        handle = self.port.express(transfer.rts_name)
        self._rts_handles[handle.id] = transfer.id
        if not transfer.control:
            self._unanswered[handle.id] = transfer.rts_name

    def on_rts(self, interest: Interest):
        name = interest.name
        if Signal.RTS != name.signal:
            raise ProtocolViolationError(f"Expected RTS, got {name}")
        peer: str = name.sender  # type: ignore
        self.port.satisfy(name, b"")
        cts = StructuredName(self.app, peer, Signal.CTS, sender=self.node)
        control = self._is_control(peer)
        self.port.record("cts_issued", peer=peer, name=str(cts), ctl=control)
        handle = self.port.express(cts)
        self._cts_handles[handle.id] = peer
        self.pending_cts[peer] = self.pending_cts.get(peer, 0) + 1
        if not control:
            self._unanswered[handle.id] = cts
            self.log(peer, Direction.inbound).last_interest_sent = cts

    def on_cts(self, interest: Interest):
        name = interest.name
        if Signal.CTS != name.signal:
            raise ProtocolViolationError(f"Expected CTS, got {name}")
        peer: str = name.sender  # type: ignore
        queue = self._awaiting_cts.get(peer)
        if not queue:
            logger.warning(f"{self.node} got CTS from {peer} with no outstanding transfer")
            self.port.record("orphan_cts", peer=peer, name=str(name))
            self.port.satisfy(name, b"")
            return
        transfer = self.transfers[queue.pop(0)]
        transfer.advance(TransferState.CtsReceived)
        self.port.satisfy(name, frame(transfer.id, transfer.seq, transfer.payload))
        transfer.advance(TransferState.DataSent)
        del self.transfers[transfer.id]
        self.port.record("payload_sent",
                         peer=peer,
                         transfer=transfer.id,
                         channel_seq=transfer.seq,
                         ctl=transfer.control)

    def on_data(self, data: Data, handle: PendingHandle) -> bool:
        if handle.id in self._rts_handles:
            tid = self._rts_handles.pop(handle.id)
            self._unanswered.pop(handle.id, None)
            transfer = self.transfers.get(tid)
            if transfer is not None and TransferState.RtsSent == transfer.state:
                self.port.set_timer(self.port.interest_lifetime, self._cts_timeout, tid)
            return True
        elif handle.id in self._cts_handles:
            peer = self._cts_handles.pop(handle.id)
            self._unanswered.pop(handle.id, None)
            self._release_cts(peer)
            if data.payload:
                self._accept(peer, data)
            else:
                self.port.record("stale_data", peer=peer, name=str(data.name))
            self._settled(peer)
            return True
        return False

    def on_expired(self, handle: PendingHandle) -> bool:
        if handle.id in self._rts_handles:
            tid = self._rts_handles.pop(handle.id)
            self._unanswered.pop(handle.id, None)
            transfer = self.transfers.get(tid)
            if transfer is not None and TransferState.RtsSent == transfer.state:
                self._fail(transfer, "rts_expired")
            return True
        elif handle.id in self._cts_handles:
            peer = self._cts_handles.pop(handle.id)
            self._unanswered.pop(handle.id, None)
            self._release_cts(peer)
            self.port.record("cts_expired", peer=peer)
            self._settled(peer)
            return True
        return False

    def _cts_timeout(self, tid: int):
        transfer = self.transfers.get(tid)
        if transfer is not None and TransferState.RtsSent == transfer.state and tid not in self._rts_handles.values():
            self._fail(transfer, "no_cts")

    def _fail(self, transfer: Transfer, reason: str):
        transfer.advance(TransferState.Failed)
        del self.transfers[transfer.id]
        queue = self._awaiting_cts.get(transfer.receiver, [])
        if transfer.id in queue:
            queue.remove(transfer.id)
        logger.warning(f"Transfer {transfer.id} {self.node}->{transfer.receiver} failed: {reason}")
        self.port.record("transfer_failed",
                         peer=transfer.receiver,
                         transfer=transfer.id,
                         reason=reason,
                         ctl=transfer.control)

    def _accept(self, peer: str, data: Data):
        tid, seq, body = unframe(data.payload)
        if CONTROL_SEQ == seq:
            if tid in self.consumed:
                self.port.record("duplicate_suppressed", peer=peer, transfer=tid)
            else:
                self._deliver(peer, tid, seq, body, data.name, control=True)
            return
        if seq <= self.delivered_seq.get(peer, 0) or tid in self.consumed:
            self.port.record("duplicate_suppressed", peer=peer, transfer=tid, channel_seq=seq)
            return
        buffer = self._reorder.setdefault(peer, dict())
        buffer[seq] = (tid, body, data.name)
        while self.delivered_seq.get(peer, 0) + 1 in buffer:
            next_seq = self.delivered_seq.get(peer, 0) + 1
            tid, body, name = buffer.pop(next_seq)
            self.delivered_seq[peer] = next_seq
            self._deliver(peer, tid, next_seq, body, name, control=False)

    def _deliver(self, peer: str, tid: int, seq: int, body: bytes, cts_name: StructuredName, control: bool):
        self.consumed.add(tid)
        if not control:
            self.log(peer, Direction.inbound).append(tid, cts_name, self.port.now)
        self._deliveries.append((peer, body))
        self.port.record("payload_delivered", peer=peer, transfer=tid, channel_seq=seq, ctl=control)
        if self.on_delivered is not None:
            self.on_delivered(peer)

    def _release_cts(self, peer: str):
        self.pending_cts[peer] -= 1
        if not self.pending_cts[peer]:
            del self.pending_cts[peer]

    def _settled(self, peer: str):
        if self.on_settled is not None:
            self.on_settled(peer)

    def pending_inbound(self, peer: Optional[str]=None) -> int:
        if peer is not None:
            return self.pending_cts.get(peer, 0)
        return sum(count for p, count in self.pending_cts.items() if not self._is_control(p))

    def deliver_queue(self) -> List[Tuple[str, bytes]]:
        deliveries, self._deliveries = self._deliveries, list()
        return deliveries

    def undelivered(self) -> List[Tuple[str, bytes]]:
        """Payloads Delivered by the network but not yet drained by the application."""
        return list(self._deliveries)

    def suspend(self):
        self.suspended = True

    def resume(self):
        self.suspended = False
        queued, self._queued = self._queued, list()
        for tid, receiver, payload in queued:
            self._start(tid, receiver, payload, False)

    def unanswered_interests(self) -> List[StructuredName]:
        return [self._unanswered[h] for h in sorted(self._unanswered)]

    def unsettled_transfers(self) -> List[Transfer]:
        return [t for tid, t in sorted(self.transfers.items())
                if not t.control and t.state in (TransferState.RtsSent, TransferState.CtsReceived)]

    def export_state(self) -> Dict[str, Any]:
        return dict(counter=self._counter,
                    outbound_seq=dict(sorted(self.outbound_seq.items())),
                    delivered_seq=dict(sorted(self.delivered_seq.items())),
                    consumed=sorted(self.consumed),
                    queued=[[tid, receiver, base64.b64encode(p).decode("ascii")]
                            for tid, receiver, p in self._queued],
                    transfers=[t.to_dict() for t in self.unsettled_transfers()])

    def restore(self,
                state: Dict[str, Any],
                logs: Iterable[ChannelLog],
                deliveries: Iterable[Tuple[str, bytes]]=()):
        self._counter = state['counter']
        self.outbound_seq = dict(state['outbound_seq'])
        self.delivered_seq = dict(state['delivered_seq'])
        self.consumed = set(state['consumed'])
        self._queued = [(tid, receiver, base64.b64decode(p)) for tid, receiver, p in state['queued']]
        self._deliveries = list(deliveries)
        for doc in state['transfers']:
            transfer = Transfer.from_dict(doc)
            self.transfers[transfer.id] = transfer
        for transfer in sorted(self.transfers.values(), key=lambda t: (t.receiver, t.seq)):
            if TransferState.RtsSent == transfer.state:
                self._awaiting_cts.setdefault(transfer.receiver, list()).append(transfer.id)
        for log in logs:
            log.set_mark()
            self.logs[(log.peer, log.direction)] = log

    def reissue(self, name: StructuredName) -> bool:
        """
        Re-express an interest whose PIT path was lost, with a fresh nonce.
        """
        if Signal.RTS == name.signal:
            peer: str = name.receiver
            outstanding = set(self._rts_handles.values())
            candidates = [tid for tid in self._awaiting_cts.get(peer, []) if tid not in outstanding]
            if not candidates:
                logger.warning(f"{self.node} has no transfer awaiting {name}, not re-issuing")
                return False
            self._express_rts(self.transfers[candidates[0]])
        elif Signal.CTS == name.signal:
            peer = name.receiver
            handle = self.port.express(name)
            self._cts_handles[handle.id] = peer
            self.pending_cts[peer] = self.pending_cts.get(peer, 0) + 1
            self._unanswered[handle.id] = name
        else:
            raise ProtocolViolationError(f"Only RTS and CTS interests are re-issued, got {name}")
        return True

    def arm_timers(self):
        outstanding = set(self._rts_handles.values())
        for queue in self._awaiting_cts.values():
            for tid in queue:
                if tid not in outstanding:
                    self.port.set_timer(self.port.interest_lifetime, self._cts_timeout, tid)
