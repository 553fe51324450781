"""
Append-only event log of a simulation run, totally ordered by (t, seq).
"""
import json
from typing import Any, Dict, Generator, Iterable, List, Optional

from ccncheck import checksum


Record = Dict[str, Any]
RESERVED = frozenset(("t", "seq", "ev"))

class Trace:
    def __init__(self, records: Optional[Iterable[Record]]=None):
        self._records: List[Record] = list()
        for r in records or ():
            self._records.append(dict(r))

    def record(self, t: int, ev: str, **fields) -> Record:
        assert not RESERVED & set(fields), f"fields may not be named {sorted(RESERVED)}"
        rec: Record = dict(t=t, seq=len(self._records), ev=ev)
        for key, val in fields.items():
            if val is not None:
                rec[key] = val
        if self._records:
            last = self._records[-1]
            assert last['t'] <= t, f"trace time went backwards: {last['t']} > {t}"
        self._records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, index):
        return self._records[index]

    def since(self, position: int) -> List[Record]:
        return self._records[position:]

    def select(self, *evs: str, **match) -> Generator[Record, None, None]:
        for rec in self._records:
            if evs and rec['ev'] not in evs:
                continue
            if all(rec.get(k) == v for k, v in match.items()):
                yield rec

    def lines(self) -> Generator[str, None, None]:
        for rec in self._records:
            yield json.dumps(rec, sort_keys=True, separators=(",", ":"))

    def dumps(self) -> str:
        return "".join(f"{line}\n" for line in self.lines())

    def digest(self) -> str:
        return checksum.digest_lines(self.lines())

    def write(self, path: str):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path: str) -> "Trace":
        with open(path) as fh:
            return cls(json.loads(line) for line in fh if line.strip())
