import base64
from hashlib import md5
from typing import Iterable, Optional

import google_crc32c


class crc32c:
    def __init__(self, data: Optional[bytes]=None):
        if data is not None:
            self._checksum = google_crc32c.Checksum(data)
        else:
            self._checksum = google_crc32c.Checksum(b"")

    def update(self, data: bytes):
        self._checksum.update(data)

    def hexdigest(self) -> str:
        return self._checksum.digest().hex()

    def b64digest(self) -> str:
        return base64.b64encode(self._checksum.digest()).decode("utf-8")

    def value(self) -> int:
        return int.from_bytes(self._checksum.digest(), "big")

def node_tag(node: str) -> int:
    """32 bit tag used as the high half of transfer ids issued by `node`."""
    return crc32c(node.encode("utf-8")).value()

def transfer_id(node: str, counter: int) -> int:
    assert 0 <= counter < 2 ** 32
    return (node_tag(node) << 32) | counter

def digest_lines(lines: Iterable[str]) -> str:
    hasher = md5()
    for line in lines:
        hasher.update(line.encode("utf-8"))
        hasher.update(b"\n")
    return hasher.hexdigest()
