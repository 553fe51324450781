from ccncheck.names import Signal, StructuredName
from ccncheck.fabric import Fabric, Topology


APP = "fib"

def rts(receiver: str, sender: str) -> StructuredName:
    return StructuredName(APP, receiver, Signal.RTS, sender=sender)

def cts(receiver: str, sender: str) -> StructuredName:
    return StructuredName(APP, receiver, Signal.CTS, sender=sender)

def star_fabric(*nodes: str, **kwargs) -> Fabric:
    return Fabric(Topology.star(nodes), **kwargs)
