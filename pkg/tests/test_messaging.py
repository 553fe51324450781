#!/usr/bin/env python
import os
import sys
import unittest

pkg_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))  # noqa
sys.path.insert(0, pkg_root)  # noqa

from ccncheck.names import Signal, StructuredName, prefix
from ccncheck.fabric import Data, NodeHandler, ProtocolViolationError
from ccncheck.messaging import (CONTROL_SEQ, ChannelLog, Direction, FramingError, Messenger, Transfer,
                                TransferState, frame, unframe)
from tests import APP, cts, infra, rts, star_fabric


class Endpoint(NodeHandler):
    def __init__(self, fabric, node, **kwargs):
        self.port = fabric.attach(node, self)
        self.messenger = Messenger(self.port, APP, on_delivered=self._drain, **kwargs)
        self.delivered = list()
        self.port.register_prefix(prefix(APP, node))

    def _drain(self, peer):
        self.delivered.extend(self.messenger.deliver_queue())

    def on_interest(self, interest):
        if Signal.RTS == interest.name.signal:
            self.messenger.on_rts(interest)
        elif Signal.CTS == interest.name.signal:
            self.messenger.on_cts(interest)

    def on_data(self, data, handle):
        self.messenger.on_data(data, handle)

    def on_expired(self, handle):
        self.messenger.on_expired(handle)

class TestFraming(unittest.TestCase):
    def test_frame(self):
        payload = frame(12, 3, b"body")
        self.assertEqual(24 + 4, len(payload))
        self.assertEqual((12, 3, b"body"), unframe(payload))

    def test_malformed(self):
        with self.assertRaises(FramingError):
            unframe(b"short")
        with self.assertRaises(FramingError):
            unframe(frame(1, 1, b"body")[:-1])
        self.assertTrue(issubclass(FramingError, ProtocolViolationError))

class TestTransfer(unittest.TestCase):
    def test_advance(self):
        t = Transfer(1, "nodeA", "nodeB", b"x", rts("nodeB", "nodeA"), cts("nodeA", "nodeB"), 1)
        t.advance(TransferState.CtsReceived)
        with self.assertRaises(ProtocolViolationError):
            t.advance(TransferState.RtsSent)
        t.advance(TransferState.Failed)
        with self.assertRaises(ProtocolViolationError):
            t.advance(TransferState.Delivered)
        self.assertEqual(t.to_dict(), Transfer.from_dict(t.to_dict()).to_dict())

    def test_cts_reverses_direction(self):
        with self.assertRaises(AssertionError):
            Transfer(1, "nodeA", "nodeB", b"x", rts("nodeB", "nodeA"), cts("nodeB", "nodeA"), 1)

class TestChannelLog(unittest.TestCase):
    def test_mark(self):
        log = ChannelLog("nodeB", Direction.outbound)
        self.assertFalse(log.traffic_since_mark)
        log.append(1, rts("nodeB", "nodeA"), 5)
        self.assertTrue(log.traffic_since_mark)
        self.assertEqual(rts("nodeB", "nodeA"), log.last_interest_sent)
        log.set_mark()
        self.assertFalse(log.traffic_since_mark)
        with self.assertRaises(ProtocolViolationError):
            log.append(2, rts("nodeB", "nodeA"), 4)
        self.assertEqual(log, ChannelLog.from_dict(log.to_dict()))

class TestMessenger(unittest.TestCase):
    def test_handshake_is_fifo(self):
        fabric = star_fabric("nodeA", "nodeB")
        a = Endpoint(fabric, "nodeA")
        b = Endpoint(fabric, "nodeB")
        tids = [a.messenger.send("nodeB", str(i).encode()) for i in range(1, 4)]
        fabric.run_until_quiescent()
        self.assertEqual([("nodeA", b"1"), ("nodeA", b"2"), ("nodeA", b"3")], b.delivered)
        delivered = list(fabric.trace.select("payload_delivered", node="nodeB"))
        self.assertEqual([1, 2, 3], [r['channel_seq'] for r in delivered])
        self.assertEqual(tids, [r['transfer'] for r in delivered])
        self.assertEqual([6, 6, 6], [r['t'] for r in delivered])
        self.assertEqual(tids, b.messenger.log("nodeA", Direction.inbound).transfer_ids())
        self.assertEqual(tids, a.messenger.log("nodeB", Direction.outbound).transfer_ids())
        self.assertEqual([], a.messenger.unsettled_transfers())
        self.assertEqual({}, a.messenger.transfers)
        self.assertEqual([], a.messenger.unanswered_interests())
        self.assertEqual(0, b.messenger.pending_inbound("nodeA"))

    def test_out_of_order_payloads_are_buffered(self):
        fabric = star_fabric("nodeA", "nodeB")
        b = Endpoint(fabric, "nodeB")
        name = cts("nodeA", "nodeB")
        b.messenger._accept("nodeA", Data(name, frame(22, 2, b"second"), "nodeA"))
        self.assertEqual([], b.delivered)
        b.messenger._accept("nodeA", Data(name, frame(21, 1, b"first"), "nodeA"))
        self.assertEqual([("nodeA", b"first"), ("nodeA", b"second")], b.delivered)
        b.messenger._accept("nodeA", Data(name, frame(21, 1, b"first"), "nodeA"))
        self.assertEqual(2, len(b.delivered))
        self.assertEqual(1, len(list(fabric.trace.select("duplicate_suppressed"))))

    def test_control_transfers_bypass_suspension(self):
        fabric = star_fabric("nodeA", "coord")
        a = Endpoint(fabric, "nodeA", control_peers=["coord"])
        coord = Endpoint(fabric, "coord", control_only=True)
        a.messenger.suspend()
        a.messenger.send("coord", b"report")
        fabric.run_until_quiescent()
        self.assertEqual([("nodeA", b"report")], coord.delivered)
        delivered = next(fabric.trace.select("payload_delivered"))
        self.assertEqual(CONTROL_SEQ, delivered['channel_seq'])
        self.assertTrue(delivered['ctl'])
        self.assertEqual([], a.messenger.channel_logs())
        self.assertEqual([], coord.messenger.channel_logs())

    def test_suspended_sends_are_queued(self):
        fabric = star_fabric("nodeA", "nodeB")
        a = Endpoint(fabric, "nodeA")
        b = Endpoint(fabric, "nodeB")
        a.messenger.suspend()
        tid = a.messenger.send("nodeB", b"later")
        fabric.run_until_quiescent()
        self.assertEqual([], b.delivered)
        self.assertEqual(tid, next(fabric.trace.select("send_queued"))['transfer'])
        self.assertEqual(1, len(a.messenger.export_state()['queued']))
        a.messenger.resume()
        fabric.run_until_quiescent()
        self.assertEqual([("nodeA", b"later")], b.delivered)

    def test_rts_without_route_fails(self):
        fabric = star_fabric("nodeA", "nodeB")
        a = Endpoint(fabric, "nodeA")
        tid = a.messenger.send("nodeB", b"nobody home")
        fabric.run_until_quiescent()
        self.assertNotIn(tid, a.messenger.transfers)
        failed = next(fabric.trace.select("transfer_failed"))
        self.assertEqual("rts_expired", failed['reason'])
        self.assertEqual(100, failed['t'])
        self.assertEqual([], a.messenger.unsettled_transfers())

    def test_orphan_cts(self):
        fabric = star_fabric("nodeA", "nodeB")
        a = Endpoint(fabric, "nodeA")
        b = Endpoint(fabric, "nodeB")
        self.assertTrue(b.messenger.reissue(cts("nodeA", "nodeB")))
        fabric.run_until_quiescent()
        self.assertEqual(1, len(list(fabric.trace.select("orphan_cts", node="nodeA"))))
        self.assertEqual(1, len(list(fabric.trace.select("stale_data", node="nodeB"))))
        self.assertEqual([], b.delivered)
        self.assertEqual(0, b.messenger.pending_inbound())

    def test_send_to_self(self):
        fabric = star_fabric("nodeA")
        a = Endpoint(fabric, "nodeA")
        with self.assertRaises(ProtocolViolationError):
            a.messenger.send("nodeA", b"x")

    def test_restore_and_reissue(self):
        fabric = star_fabric("nodeA", "nodeB")
        a = Endpoint(fabric, "nodeA")
        silent = infra.Recorder(fabric, "nodeB")
        silent.port.register_prefix(prefix(APP, "nodeB"))
        tid = a.messenger.send("nodeB", b"hello")
        fabric.run_until(10)
        state = a.messenger.export_state()
        logs = [ChannelLog.from_dict(log.to_dict()) for log in a.messenger.channel_logs()]
        pending = a.messenger.unanswered_interests()
        self.assertEqual([rts("nodeB", "nodeA")], pending)
        self.assertEqual([tid], [t['id'] for t in state['transfers']])

        fabric = star_fabric("nodeA", "nodeB")
        a = Endpoint(fabric, "nodeA")
        b = Endpoint(fabric, "nodeB")
        a.messenger.restore(state, logs)
        self.assertFalse(a.messenger.log("nodeB", Direction.outbound).traffic_since_mark)
        self.assertTrue(a.messenger.reissue(pending[0]))
        self.assertFalse(a.messenger.reissue(pending[0]))
        fabric.run_until_quiescent()
        self.assertEqual([("nodeA", b"hello")], b.delivered)
        self.assertEqual([tid], [r['transfer'] for r in fabric.trace.select("payload_delivered", node="nodeB")])
        self.assertNotEqual(tid, a.messenger.send("nodeB", b"next"))

    def test_restored_cts_is_reissued(self):
        fabric = star_fabric("nodeA", "nodeB")
        a = Endpoint(fabric, "nodeA")
        b = Endpoint(fabric, "nodeB")
        tid = a.messenger.send("nodeB", b"hello")
        fabric.run_until(3)
        states = {e.port.node: (e.messenger.export_state(),
                                [ChannelLog.from_dict(log.to_dict()) for log in e.messenger.channel_logs()])
                  for e in (a, b)}
        pending = b.messenger.unanswered_interests()
        self.assertEqual([cts("nodeA", "nodeB")], pending)
        self.assertEqual(1, b.messenger.pending_inbound("nodeA"))

        fabric = star_fabric("nodeA", "nodeB")
        a = Endpoint(fabric, "nodeA")
        b = Endpoint(fabric, "nodeB")
        for e in (a, b):
            e.messenger.restore(*states[e.port.node])
        self.assertTrue(b.messenger.reissue(pending[0]))
        self.assertEqual({"nodeA": 1}, b.messenger.pending_cts)
        self.assertEqual(1, b.messenger.pending_inbound("nodeA"))
        fabric.run_until_quiescent()
        self.assertEqual([("nodeA", b"hello")], b.delivered)
        delivered = list(fabric.trace.select("payload_delivered", node="nodeB"))
        self.assertEqual([(tid, "nodeA")], [(r['transfer'], r['peer']) for r in delivered])
        self.assertEqual(0, b.messenger.pending_inbound("nodeA"))
        self.assertEqual({}, b.messenger.pending_cts)
        self.assertEqual([], b.messenger.unanswered_interests())
        self.assertEqual({}, a.messenger.transfers)

    def test_reissue_rejects_other_signals(self):
        fabric = star_fabric("nodeA")
        a = Endpoint(fabric, "nodeA")
        with self.assertRaises(ProtocolViolationError):
            a.messenger.reissue(StructuredName(APP, "nodeB", Signal.DISCOVER))

if __name__ == '__main__':
    unittest.main()
