import shutil
import tempfile
from typing import List, Optional

from ccncheck.fabric import Data, Fabric, Interest, NodeHandler, PendingHandle


class TempDirMixin:
    def setUp(self):
        self.tempdir = tempfile.mkdtemp(prefix="ccncheck-test-")

    def tearDown(self):
        shutil.rmtree(self.tempdir, ignore_errors=True)

class Recorder(NodeHandler):
    """
    Collects whatever the fabric hands to a node, optionally answering interests after `delay` ticks.
    """
    def __init__(self, fabric: Fabric, node: str, reply: Optional[bytes]=None, delay: int=0):
        self.port = fabric.attach(node, self)
        self.reply = reply
        self.delay = delay
        self.interests: List[Interest] = list()
        self.data: List[Data] = list()
        self.expired: List[PendingHandle] = list()

    def on_interest(self, interest: Interest):
        self.interests.append(interest)
        if self.reply is None:
            return
        if self.delay:
            self.port.set_timer(self.delay, self.port.satisfy, interest.name, self.reply)
        else:
            self.port.satisfy(interest.name, self.reply)

    def on_data(self, data: Data, handle: PendingHandle):
        self.data.append(data)

    def on_expired(self, handle: PendingHandle):
        self.expired.append(handle)
