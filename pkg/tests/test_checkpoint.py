#!/usr/bin/env python
import os
import sys
import unittest
from dataclasses import replace

pkg_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))  # noqa
sys.path.insert(0, pkg_root)  # noqa

from ccncheck import apps, harness
from ccncheck.harness import Scenario, ScenarioRunner, Settings
from ccncheck.deployment import Preset
from ccncheck.messaging import ChannelLog, Direction
from ccncheck.store import GlobalCheckpoint, LocalSnapshot
from ccncheck.checkpoint import (CheckpointError, CheckpointInProgressError, Report, UnknownProcessError,
                                 decode_report, encode_report, verify_consistency)
from tests import cts, infra, rts


def prepared_runner(out_dir: str, scenario: Scenario=None) -> ScenarioRunner:
    """Coordinator and registered processes, none of them launched."""
    runner = ScenarioRunner(scenario or Scenario(app="fibonacci"), out_dir)
    runner._start_coordinator()
    for node in runner.scenario.nodes:
        runner._spawn(node, None)
        runner.coordinator.register_process(node)
    return runner

class TestReports(unittest.TestCase):
    def test_encode(self):
        body = encode_report(3, Report.drained, "nodeA")
        self.assertEqual((3, Report.drained, "nodeA"), decode_report(body))

class TestCoordinator(infra.TempDirMixin, unittest.TestCase):
    def test_checkpoint_commits(self):
        runner = prepared_runner(self.tempdir)
        self.assertEqual({"nodeA", "nodeB", "nodeC"}, runner.coordinator.config.registered)
        self.assertEqual(1, runner.coordinator.initiate_checkpoint())
        self.assertFalse(runner.store.manifest(1)['committed'])
        runner.fabric.run_until_quiescent()
        self.assertEqual([1], runner.store.committed_epochs())
        g = runner.store.load_global(1)
        self.assertEqual(["nodeA", "nodeB", "nodeC"], g.processes)
        self.assertEqual(apps.FibonacciApp(ring=harness.DEFAULT_RING, node="nodeB"),
                         apps.deserialize(g.snapshots["nodeB"].app_state))
        for node in g.processes:
            with self.subTest(node=node):
                evs = [r['ev'] for r in runner.trace.select("suspend", "drained", "snapshot", "resume", node=node)]
                self.assertEqual(["suspend", "drained", "snapshot", "resume"], evs)
                self.assertFalse(runner.nodes[node].suspended)
        self.assertTrue(verify_consistency(g, runner.trace).consistent)

    def test_checkpoint_in_progress(self):
        runner = prepared_runner(self.tempdir)
        runner.coordinator.initiate_checkpoint()
        with self.assertRaises(CheckpointInProgressError):
            runner.coordinator.initiate_checkpoint()
        self.assertEqual(1, len(list(runner.trace.select("checkpoint_rejected"))))
        runner.fabric.run_until_quiescent()
        self.assertEqual(2, runner.coordinator.initiate_checkpoint())

    def test_no_processes(self):
        runner = ScenarioRunner(Scenario(app="fibonacci"), self.tempdir)
        runner._start_coordinator()
        self.assertEqual(1, runner.coordinator.initiate_checkpoint())
        self.assertEqual([1], runner.store.committed_epochs())
        self.assertIsNone(runner.coordinator.in_progress)

    def test_register_unknown_process(self):
        runner = ScenarioRunner(Scenario(app="fibonacci"), self.tempdir)
        runner._start_coordinator()
        with self.assertRaises(UnknownProcessError):
            runner.coordinator.register_process("nodeA")
        self.assertEqual([], runner.store.load_registry())

    def test_commit_requires_every_snapshot(self):
        runner = prepared_runner(self.tempdir)
        epoch = runner.coordinator.initiate_checkpoint()
        with self.assertRaises(CheckpointError):
            runner.coordinator.commit_global(epoch)
        with self.assertRaises(CheckpointError):
            runner.coordinator.commit_global(epoch + 1)

    def test_window_expiry_aborts_and_retries(self):
        s = Scenario(app="fibonacci",
                     events=(harness.ScenarioEvent(30, harness.Action.checkpoint),),
                     settings=Settings(checkpoint_window=1, max_retries=2, retry_delay=20))
        runner = ScenarioRunner(s, self.tempdir)
        trace = runner.run()
        aborts = list(trace.select("checkpoint_abort"))
        self.assertEqual([1, 2, 3], [r['epoch'] for r in aborts])
        self.assertEqual({"window"}, {r['reason'] for r in aborts})
        self.assertEqual([], runner.store.committed_epochs())
        self.assertTrue(all(runner.store.manifest(e)['aborted'] for e in (1, 2, 3)))
        self.assertEqual([], harness.check_blocking(trace))
        self.assertEqual([], harness.check_fibonacci(trace, s.steps))

    def test_peer_crash_during_flush_aborts(self):
        # check@1 reaches every process at tick 32 and each flushes to its successor in the ring
        tests = [
            ("nodeB", "nodeA"),
            ("nodeC", "nodeB"),
            ("nodeA", "nodeC"),
        ]
        for crashed, flusher in tests:
            with self.subTest(crashed=crashed):
                s = Scenario(app="fibonacci",
                             events=(harness.ScenarioEvent(30, harness.Action.checkpoint),
                                     harness.ScenarioEvent(33, harness.Action.crash, crashed)))
                runner = ScenarioRunner(s, os.path.join(self.tempdir, crashed))
                trace = runner.run()
                flush = next(trace.select("flush_sent", node=flusher, peer=crashed))
                crash = next(trace.select("crash", node=crashed))
                self.assertLess(flush['t'], crash['t'])
                aborts = list(trace.select("checkpoint_abort"))
                self.assertEqual([1, 2, 3], [r['epoch'] for r in aborts])
                self.assertEqual({f"abort from {flusher}"}, {r['reason'] for r in aborts})
                self.assertGreaterEqual(aborts[0]['t'], flush['t'] + s.settings.interest_lifetime)
                self.assertEqual([], runner.store.committed_epochs())
                self.assertTrue(all(runner.store.manifest(e)['aborted'] for e in (1, 2, 3)))
                for node in set(s.nodes) - {crashed}:
                    self.assertFalse(runner.nodes[node].suspended)

    def test_restarted_coordinator_aborts_epoch_in_progress(self):
        runner = ScenarioRunner(Scenario(app="fibonacci"), self.tempdir)
        runner.store.write_manifest(1, ["nodeA", "nodeB"], committed=False)
        runner._start_coordinator()
        self.assertTrue(runner.store.manifest(1)['aborted'])
        abort = next(runner.trace.select("checkpoint_abort"))
        self.assertEqual("coordinator_restart", abort['reason'])
        self.assertIsNone(runner.coordinator.in_progress)
        self.assertEqual(1, runner.coordinator.config.epoch)

class TestCheckpointAgent(infra.TempDirMixin, unittest.TestCase):
    def test_flush_requires_suspension(self):
        runner = prepared_runner(self.tempdir)
        agent = runner.nodes["nodeA"].agent
        with self.assertRaises(CheckpointError):
            agent.flush_channels()
        with self.assertRaises(CheckpointError):
            agent.snapshot()

    def test_flush_waits_for_inflight_payload(self):
        runner = prepared_runner(self.tempdir, replace(Preset.fibonacci.scenario, events=()))
        for node in runner.scenario.nodes:
            runner.nodes[node].launch()
        # nodeA's first RTS reaches nodeB at tick 2, the payload lands at tick 6
        runner.fabric.run_until(1)
        runner.coordinator.initiate_checkpoint()
        runner.fabric.run_until_quiescent()
        flush_ack = next(runner.trace.select("flush_ack", node="nodeB"))
        delivered = next(runner.trace.select("payload_delivered", node="nodeB"))
        self.assertLess(delivered['seq'], flush_ack['seq'])
        snap = runner.store.get_snapshot(1, "nodeB")
        self.assertEqual(1, len(snap.delivered_not_consumed))
        self.assertEqual([], harness.check_drain(runner.trace))
        self.assertEqual([], harness.check_fibonacci(runner.trace, runner.scenario.steps))

class TestConsistency(unittest.TestCase):
    def _snapshot(self, process, logs=(), unanswered=(), transfers=()):
        return LocalSnapshot(process=process,
                             epoch=1,
                             app_state=b"{}",
                             channel_logs=list(logs),
                             unanswered_interests=list(unanswered),
                             messenger=dict(transfers=list(transfers)))

    def test_consistent(self):
        out = ChannelLog("nodeB", Direction.outbound)
        out.append(5, rts("nodeB", "nodeA"), 1)
        inbound = ChannelLog("nodeA", Direction.inbound)
        inbound.append(5, cts("nodeA", "nodeB"), 6)
        g = GlobalCheckpoint(1, dict(nodeA=self._snapshot("nodeA", [out]), nodeB=self._snapshot("nodeB", [inbound])))
        self.assertTrue(verify_consistency(g).consistent)

    def test_orphan_message(self):
        inbound = ChannelLog("nodeA", Direction.inbound)
        inbound.append(5, cts("nodeA", "nodeB"), 6)
        g = GlobalCheckpoint(1, dict(nodeA=self._snapshot("nodeA"), nodeB=self._snapshot("nodeB", [inbound])))
        report = verify_consistency(g)
        self.assertFalse(report.consistent)
        self.assertEqual([("nodeA", "nodeB", 5)], report.orphan_messages)

    def test_orphan_interest(self):
        pending = cts("nodeA", "nodeB")
        g = GlobalCheckpoint(1, dict(nodeA=self._snapshot("nodeA"), nodeB=self._snapshot("nodeB", unanswered=[pending])))
        self.assertEqual([("nodeB", str(pending))], verify_consistency(g).orphan_interests)
        transfer = dict(id=9, receiver="nodeB")
        g.snapshots["nodeA"] = self._snapshot("nodeA", transfers=[transfer])
        self.assertTrue(verify_consistency(g).consistent)

if __name__ == '__main__':
    unittest.main()
