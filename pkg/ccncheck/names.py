"""
Interest naming scheme for RTS, CTS, check, flush and discover signals.

    ccnx://<app>/<receiver>/<signal>[/<sender>][/<appended-escaped>]
"""
import re
import enum
from urllib.parse import quote, unquote
from dataclasses import dataclass
from typing import List, Optional


SCHEME = "ccnx://"

_IDENTIFIER = re.compile(r"^[A-Za-z0-9_-]+$")
_MARKER = re.compile(r"^(check|snapshot|resume)@([0-9]+)$")

class Signal(enum.Enum):
    RTS = "RTS"
    CTS = "CTS"
    CHECK = "check"
    FLUSH = "flush"
    DATA = "data"
    DISCOVER = "discover"

    @classmethod
    def from_token(cls, token: str) -> "Signal":
        for signal in cls:
            if signal.value == token:
                return signal
        raise MalformedNameError("signal", f"Unknown signal token '{token}'")

_SENDER_SIGNALS = (Signal.RTS, Signal.CTS, Signal.DATA)

class MalformedNameError(ValueError):
    def __init__(self, component: str, message: str):
        super().__init__(f"{component}: {message}")
        self.component = component

@dataclass(frozen=True)
class StructuredName:
    app: str
    receiver: str
    signal: Signal
    sender: Optional[str] = None
    appended: Optional[str] = None
    marker: Optional[str] = None

    def __post_init__(self):
        validate(self)

    def __str__(self) -> str:
        return format_name(self)

    @property
    def phase(self) -> Optional[str]:
        if self.marker is None:
            return None
        return _MARKER.match(self.marker).group(1)  # type: ignore

    @property
    def epoch(self) -> Optional[int]:
        if self.marker is None:
            return None
        return int(_MARKER.match(self.marker).group(2))  # type: ignore

def check_identifier(component: str, value: Optional[str]):
    if not value or not _IDENTIFIER.match(value):
        raise MalformedNameError(component, f"'{value}' is not a non-empty identifier of [A-Za-z0-9_-]")

def marker(phase: str, epoch: int) -> str:
    return f"{phase}@{epoch}"

def validate(n: StructuredName):
    check_identifier("app", n.app)
    check_identifier("receiver", n.receiver)
    if not isinstance(n.signal, Signal):
        raise MalformedNameError("signal", f"'{n.signal}' is not a Signal")
    if n.signal in _SENDER_SIGNALS:
        check_identifier("sender", n.sender)
        if n.appended is not None:
            raise MalformedNameError("appended", f"{n.signal.value} names carry no appended name")
    elif n.signal == Signal.FLUSH:
        if n.sender is not None:
            check_identifier("sender", n.sender)
        if n.appended is None:
            raise MalformedNameError("appended", "flush names must carry the last interest sent")
        parse_name(n.appended)
    else:
        if n.sender is not None:
            raise MalformedNameError("sender", f"{n.signal.value} carries no sender")
        if n.appended is not None:
            raise MalformedNameError("appended", f"{n.signal.value} carries no appended name")
    if n.marker is not None:
        if n.signal != Signal.CHECK:
            raise MalformedNameError("marker", f"{n.signal.value} carries no marker")
        if not _MARKER.match(n.marker):
            raise MalformedNameError("marker", f"'{n.marker}' is not <check|snapshot|resume>@<epoch>")

def name_components(n: StructuredName) -> List[str]:
    components = [n.app, n.receiver, n.signal.value]
    if n.sender is not None:
        components.append(n.sender)
    if n.appended is not None:
        components.append(quote(n.appended, safe=""))
    if n.marker is not None:
        components.append(n.marker)
    return components

def format_name(n: StructuredName) -> str:
    validate(n)
    return SCHEME + "/".join(name_components(n))

def parse_name(s: str) -> StructuredName:
    if not isinstance(s, str) or not s.startswith(SCHEME):
        raise MalformedNameError("scheme", f"'{s}' does not start with {SCHEME}")
    components = s[len(SCHEME):].split("/")
    if len(components) < 3:
        raise MalformedNameError("length", f"'{s}' has {len(components)} components, expected at least 3")
    for label, value in zip(("app", "receiver", "signal"), components):
        if not value:
            raise MalformedNameError(label, "empty component")
    app, receiver, token, *rest = components
    signal = Signal.from_token(token)
    sender = appended = mark = None
    if signal in _SENDER_SIGNALS:
        if 1 != len(rest):
            raise MalformedNameError("sender", f"{token} names take exactly one sender component")
        sender = rest[0]
    elif signal == Signal.FLUSH:
        if len(rest) not in (1, 2):
            raise MalformedNameError("appended", "flush names take [sender/]appended")
        if 2 == len(rest):
            sender = rest[0]
        escaped = rest[-1]
        if not escaped:
            raise MalformedNameError("appended", "empty component")
        appended = unquote(escaped)
        if quote(appended, safe="") != escaped:
            raise MalformedNameError("appended", f"'{escaped}' is not canonically escaped")
    elif signal == Signal.CHECK:
        if 1 < len(rest):
            raise MalformedNameError("marker", "check names take at most one marker component")
        if rest:
            if not _MARKER.match(rest[0]):
                raise MalformedNameError("sender", f"check carries no sender, got '{rest[0]}'")
            mark = rest[0]
    elif rest:
        raise MalformedNameError("sender", f"{token} carries no sender, got '{rest[0]}'")
    return StructuredName(app, receiver, signal, sender=sender, appended=appended, marker=mark)

def prefix(app: str, node: str) -> str:
    check_identifier("app", app)
    check_identifier("receiver", node)
    return f"/{app}/{node}"

def prefix_components(pfx: str) -> List[str]:
    if not pfx.startswith("/"):
        raise MalformedNameError("prefix", f"'{pfx}' must start with '/'")
    components = pfx[1:].split("/")
    for c in components:
        check_identifier("prefix", c)
    return components

def flusher_of(flush: StructuredName) -> str:
    """
    The process that sent `flush`: the endpoint of its appended name other than the flush receiver.
    """
    last = parse_name(flush.appended)  # type: ignore
    if flush.sender is not None:
        return flush.sender
    return last.sender if last.receiver == flush.receiver else last.receiver  # type: ignore
