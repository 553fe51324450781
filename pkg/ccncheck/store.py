"""
Snapshot store: one JSON document per (epoch, process), a manifest per epoch and the coordinator registry.

    <root>/<epoch>/<process>.snap.json
    <root>/<epoch>/MANIFEST.json     {"epoch": N, "processes": [...], "committed": true}, "aborted" when abandoned
    <root>/REGISTRY.json             {"coordinator": name, "processes": [...]}
"""
import json
import base64
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from ccncheck import checksum
from ccncheck.utils import retry
from ccncheck.names import StructuredName, parse_name
from ccncheck.messaging import ChannelLog, Direction
from ccncheck.blobstore import BlobStoreError, BlobNotFoundError
from ccncheck.blobstore.local import LocalBlobStore


logger = logging.getLogger(__name__)

MANIFEST = "MANIFEST.json"
REGISTRY = "REGISTRY.json"
SNAPSHOT_SUFFIX = ".snap.json"

class SnapshotNotFoundError(BlobNotFoundError):
    pass

class SnapshotCorruptError(BlobStoreError):
    pass

@dataclass
class LocalSnapshot:
    process: str
    epoch: int
    app_state: bytes
    channel_logs: List[ChannelLog] = field(default_factory=list)
    unanswered_interests: List[StructuredName] = field(default_factory=list)
    delivered_not_consumed: List[Tuple[str, bytes]] = field(default_factory=list)
    messenger: Dict[str, Any] = field(default_factory=dict)
    peers: List[str] = field(default_factory=list)
    tick: int = 0

    def log(self, peer: str, direction: Direction) -> Optional[ChannelLog]:
        for log in self.channel_logs:
            if log.peer == peer and log.direction == direction:
                return log
        return None

    def to_dict(self) -> Dict[str, Any]:
        return dict(process=self.process,
                    epoch=self.epoch,
                    tick=self.tick,
                    app_state=base64.b64encode(self.app_state).decode("ascii"),
                    app_crc32c=checksum.crc32c(self.app_state).hexdigest(),
                    channel_logs=[log.to_dict() for log in self.channel_logs],
                    unanswered_interests=[str(n) for n in self.unanswered_interests],
                    delivered_not_consumed=[[peer, base64.b64encode(body).decode("ascii")]
                                            for peer, body in self.delivered_not_consumed],
                    messenger=self.messenger,
                    peers=list(self.peers))

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "LocalSnapshot":
        try:
            app_state = base64.b64decode(doc['app_state'])
            if checksum.crc32c(app_state).hexdigest() != doc['app_crc32c']:
                raise SnapshotCorruptError(f"Application state checksum mismatch for {doc['process']}@{doc['epoch']}")
            return cls(process=doc['process'],
                       epoch=doc['epoch'],
                       tick=doc.get('tick', 0),
                       app_state=app_state,
                       channel_logs=[ChannelLog.from_dict(d) for d in doc['channel_logs']],
                       unanswered_interests=[parse_name(n) for n in doc['unanswered_interests']],
                       delivered_not_consumed=[(peer, base64.b64decode(body))
                                               for peer, body in doc['delivered_not_consumed']],
                       messenger=doc['messenger'],
                       peers=list(doc['peers']))
        except (KeyError, TypeError, ValueError) as e:
            raise SnapshotCorruptError(f"Malformed snapshot document: {e}") from e

@dataclass
class GlobalCheckpoint:
    epoch: int
    snapshots: Dict[str, LocalSnapshot] = field(default_factory=dict)
    committed: bool = False

    @property
    def processes(self) -> List[str]:
        return sorted(self.snapshots)

class SnapshotStore:
    """
    Access to the store is serialized; the simulation loop and the CLI may share an instance.
    """
    def __init__(self, root: str):
        self.root = root
        self.blobstore = LocalBlobStore(root)
        self._lock = threading.Lock()

    @staticmethod
    def snapshot_key(epoch: int, process: str) -> str:
        return f"{epoch}/{process}{SNAPSHOT_SUFFIX}"

    @retry(OSError, number_of_attempts=3, initial_wait=0.05)
    def _put(self, key: str, doc: Dict[str, Any]):
        with self._lock:
            self.blobstore.blob(key).put(json.dumps(doc, sort_keys=True, indent=2).encode("utf-8"))

    def _get(self, key: str) -> Dict[str, Any]:
        with self._lock:
            try:
                data = self.blobstore.blob(key).get()
            except BlobNotFoundError:
                raise SnapshotNotFoundError(f"No {key} in {self.root}")
        try:
            return json.loads(data.decode("utf-8"))
        except ValueError as e:
            raise SnapshotCorruptError(f"{key} is not valid JSON: {e}")

    def put_snapshot(self, snapshot: LocalSnapshot):
        self._put(self.snapshot_key(snapshot.epoch, snapshot.process), snapshot.to_dict())

    def get_snapshot(self, epoch: int, process: str) -> LocalSnapshot:
        return LocalSnapshot.from_dict(self._get(self.snapshot_key(epoch, process)))

    def write_manifest(self, epoch: int, processes: List[str], committed: bool, aborted: bool=False):
        doc = dict(epoch=epoch, processes=sorted(processes), committed=committed)
        if aborted:
            doc['aborted'] = True
        self._put(f"{epoch}/{MANIFEST}", doc)

    def has_manifest(self, epoch: int) -> bool:
        with self._lock:
            return self.blobstore.blob(f"{epoch}/{MANIFEST}").exists()

    def manifest(self, epoch: int) -> Optional[Dict[str, Any]]:
        if not self.has_manifest(epoch):
            return None
        return self._get(f"{epoch}/{MANIFEST}")

    def epochs(self) -> List[int]:
        found = set()
        with self._lock:
            for blob in self.blobstore.list():
                head = blob.key.split("/", 1)[0]
                if head.isdigit():
                    found.add(int(head))
        return sorted(found)

    def latest_epoch(self) -> int:
        epochs = self.epochs()
        return epochs[-1] if epochs else 0

    def committed_epochs(self) -> List[int]:
        return [e for e in self.epochs() if (self.manifest(e) or {}).get('committed')]

    def latest_committed(self) -> Optional[int]:
        committed = self.committed_epochs()
        return committed[-1] if committed else None

    def load_global(self, epoch: int) -> GlobalCheckpoint:
        manifest = self.manifest(epoch)
        if manifest is None:
            raise SnapshotNotFoundError(f"No manifest for epoch {epoch} in {self.root}")
        g = GlobalCheckpoint(epoch, committed=bool(manifest['committed']))
        for process in manifest['processes']:
            try:
                g.snapshots[process] = self.get_snapshot(epoch, process)
            except SnapshotNotFoundError:
                if g.committed:
                    raise SnapshotCorruptError(f"Committed epoch {epoch} is missing the snapshot of {process}")
        return g

    def save_registry(self, coordinator: str, processes: List[str]):
        self._put(REGISTRY, dict(coordinator=coordinator, processes=sorted(processes)))

    def load_registry(self) -> List[str]:
        try:
            return list(self._get(REGISTRY)['processes'])
        except SnapshotNotFoundError:
            return []
