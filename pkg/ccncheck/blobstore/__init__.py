from typing import Generator


class BlobStore:
    def list(self, prefix: str="") -> Generator["Blob", None, None]:
        raise NotImplementedError()

    def blob(self, key: str) -> "Blob":
        raise NotImplementedError()

class Blob:
    key: str

    @property
    def url(self) -> str:
        raise NotImplementedError()

    def get(self) -> bytes:
        raise NotImplementedError()

    def put(self, data: bytes):
        raise NotImplementedError()

    def exists(self) -> bool:
        raise NotImplementedError()

class BlobStoreError(Exception):
    pass

class BlobNotFoundError(BlobStoreError):
    pass
