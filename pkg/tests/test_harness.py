#!/usr/bin/env python
import os
import sys
import json
import unittest
from dataclasses import replace

pkg_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))  # noqa
sys.path.insert(0, pkg_root)  # noqa

from ccncheck import apps, harness
from ccncheck.harness import COORDINATOR, Action, Scenario, ScenarioError, ScenarioEvent, ScenarioRunner, Settings
from ccncheck.deployment import Preset
from ccncheck.trace import Trace
from ccncheck.store import SnapshotStore
from tests import infra


def outputs(*records) -> Trace:
    trace = Trace()
    for t, node, step, value in records:
        trace.record(t, "app_output", node=node, step=step, value=value)
    return trace

class TestScenario(infra.TempDirMixin, unittest.TestCase):
    def test_invalid(self):
        tests = [
            ("unknown app", dict(app="matrix")),
            ("no steps", dict(app="fibonacci", steps=0)),
            ("coordinator as process", dict(app="fibonacci", nodes=("nodeA", "coord"))),
            ("events out of order", dict(app="fibonacci", events=(ScenarioEvent(20, Action.checkpoint),
                                                                  ScenarioEvent(10, Action.checkpoint)))),
            ("crash unknown node", dict(app="fibonacci", events=(ScenarioEvent(20, Action.crash, "nodeZ"),))),
            ("restart a process", dict(app="fibonacci", events=(ScenarioEvent(20, Action.restart, "nodeA"),))),
        ]
        for label, kwargs in tests:
            with self.subTest(label):
                with self.assertRaises(ScenarioError):
                    Scenario(**kwargs)

    def test_load(self):
        topology = dict(nodes=["nodeA", "nodeB", "coord"],
                        routers=["r0", "r1"],
                        links=[["nodeA", "r0", 1], ["nodeB", "r1", 2], ["coord", "r0", 1], ["r0", "r1", 3]])
        with open(os.path.join(self.tempdir, "topology.json"), "w") as fh:
            json.dump(topology, fh)
        doc = dict(app="fibonacci",
                   steps=8,
                   nodes=["nodeA", "nodeB"],
                   topology="topology.json",
                   events=[dict(at=20, action="checkpoint"),
                           dict(at=40, action="crash", node="all"),
                           dict(at=45, action="restart_all", delays=dict(nodeB=10))],
                   settings=dict(checkpoint_window=500))
        path = os.path.join(self.tempdir, "scenario.json")
        with open(path, "w") as fh:
            json.dump(doc, fh)
        s = Scenario.load(path)
        self.assertEqual(("r0", "r1"), s.build_topology().routers)
        self.assertEqual((("nodeB", 10),), s.events[2].delays)
        self.assertEqual(500, s.settings.checkpoint_window)
        self.assertTrue(s.has_faults)
        self.assertFalse(s.without_faults().has_faults)
        self.assertEqual(s, Scenario.from_dict(s.to_dict()))
        with self.assertRaises(ScenarioError):
            Scenario.from_dict(dict(doc, settings=dict(speed=2)), basedir=self.tempdir)
        with self.assertRaises(ScenarioError):
            Scenario.from_dict(dict(doc, topology="missing.json"), basedir=self.tempdir)

    def test_counter_start_delays(self):
        s = Preset.counter.scenario
        delays = s.start_delays()
        self.assertEqual(delays, replace(s).start_delays())
        self.assertTrue(all(0 <= d <= s.settings.stagger for d in delays.values()))
        self.assertEqual({0}, set(Preset.fibonacci.scenario.start_delays().values()))

    def test_store_must_be_empty(self):
        harness.run_scenario(Preset.fibonacci.scenario, self.tempdir)
        with self.assertRaises(ScenarioError):
            ScenarioRunner(Preset.fibonacci.scenario, self.tempdir)

class TestOracles(unittest.TestCase):
    def test_output_equivalence(self):
        ref = outputs((1, "nodeA", 1, "1"), (7, "nodeB", 2, "1"))
        with self.subTest("identical"):
            self.assertTrue(harness.check_output_equivalence(ref, ref).equal)
        with self.subTest("replayed step"):
            faulty = outputs((1, "nodeA", 1, "1"), (7, "nodeB", 2, "1"), (90, "nodeB", 2, "1"))
            self.assertTrue(harness.check_output_equivalence(ref, faulty).equal)
        with self.subTest("forged output"):
            faulty = outputs((1, "nodeA", 1, "1"), (7, "nodeB", 2, "1"), (13, "nodeC", 3, "2"))
            report = harness.check_output_equivalence(ref, faulty)
            self.assertFalse(report.equal)
            self.assertEqual(("nodeC", 3, None, "2"), report.divergence)
        with self.subTest("conflicting replay"):
            faulty = outputs((1, "nodeA", 1, "1"), (7, "nodeB", 2, "1"), (90, "nodeB", 2, "5"))
            report = harness.check_output_equivalence(ref, faulty)
            self.assertFalse(report.equal)
            self.assertEqual(1, len(report.conflicts))

    def test_eras(self):
        trace = Trace()
        trace.record(0, "rts_issued", node="nodeA")
        trace.record(5, "restart_all", processes=["nodeA"])
        trace.record(6, "rts_issued", node="nodeA")
        self.assertEqual([["rts_issued"], ["restart_all", "rts_issued"]],
                         [[r['ev'] for r in era] for era in harness.eras(trace)])

    def test_blocking_violation(self):
        trace = Trace()
        trace.record(0, "suspend", node="nodeA", epoch=1)
        trace.record(1, "rts_issued", node="nodeA", name="ccnx://fib/nodeB/RTS/nodeA")
        trace.record(2, "resume", node="nodeA", epoch=1)
        trace.record(3, "rts_issued", node="nodeA", name="ccnx://fib/nodeB/RTS/nodeA")
        self.assertEqual(1, len(harness.check_blocking(trace)))

    def test_fail_stop_violation(self):
        trace = Trace()
        trace.record(0, "crash", node="nodeA")
        trace.record(1, "rts_issued", node="nodeA")
        trace.record(2, "restart", node="nodeA")
        trace.record(3, "rts_issued", node="nodeA")
        self.assertEqual(1, len(harness.check_fail_stop(trace)))

class TestScenarios(infra.TempDirMixin, unittest.TestCase):
    def test_deterministic(self):
        s = Preset.fibonacci_crash.scenario
        first = harness.run_scenario(s, os.path.join(self.tempdir, "first"))
        second = harness.run_scenario(s, os.path.join(self.tempdir, "second"))
        self.assertEqual(first.dumps(), second.dumps())
        with open(os.path.join(self.tempdir, "first", "trace.jsonl")) as fh:
            self.assertEqual(first.dumps(), fh.read())
        self.assertEqual(first.digest(), Trace.load(os.path.join(self.tempdir, "second", "trace.jsonl")).digest())

    def test_seeded_runs_are_deterministic(self):
        for preset in (Preset.fibonacci, Preset.fibonacci_crash, Preset.counter, Preset.coordinator_restart):
            for seed in range(5):
                with self.subTest(preset=preset.name, seed=seed):
                    s = harness.seeded_variant(preset.scenario, seed, horizon=100)
                    first = harness.run_scenario(s, os.path.join(self.tempdir, s.name, "first"))
                    second = harness.run_scenario(s, os.path.join(self.tempdir, s.name, "second"))
                    self.assertEqual(first.digest(), second.digest())

    def test_coordinator_restart_preserves_outputs(self):
        tests = [
            ("between epochs", Preset.coordinator_restart.scenario.events),
            ("during an epoch", (ScenarioEvent(30, Action.checkpoint),
                                 ScenarioEvent(33, Action.crash, COORDINATOR),
                                 ScenarioEvent(40, Action.restart, COORDINATOR),
                                 ScenarioEvent(120, Action.checkpoint))),
            ("before the first epoch", (ScenarioEvent(10, Action.crash, COORDINATOR),
                                        ScenarioEvent(20, Action.checkpoint),
                                        ScenarioEvent(50, Action.restart, COORDINATOR),
                                        ScenarioEvent(60, Action.checkpoint))),
        ]
        for label, events in tests:
            with self.subTest(label):
                s = Scenario(app="fibonacci", events=events, name=label.replace(" ", "-"))
                faulty = harness.run_scenario(s, os.path.join(self.tempdir, s.name, "faulty"))
                ref = harness.run_scenario(s.without_faults(), os.path.join(self.tempdir, s.name, "ref"))
                self.assertEqual([COORDINATOR], [r['node'] for r in faulty.select("crash")])
                self.assertTrue(harness.check_output_equivalence(ref, faulty).equal)
                self.assertEqual(harness.project_outputs(ref), harness.project_outputs(faulty))
                self.assertEqual([], harness.check_fibonacci(faulty, s.steps))
                self.assertEqual([], harness.check_blocking(faulty))

    def test_presets(self):
        for preset in Preset:
            with self.subTest(preset=preset.name):
                evaluation = harness.evaluate(preset.scenario, os.path.join(self.tempdir, preset.name))
                self.assertEqual([], evaluation.violations)
                self.assertTrue(evaluation.committed)
                self.assertIn("status:    ok", evaluation.summary())

    def test_fibonacci_final_value(self):
        trace = harness.run_scenario(Preset.fibonacci_crash.scenario, self.tempdir)
        finals = [r['value'] for r in trace.select("app_output", step=20)]
        self.assertEqual("6765", finals[-1])
        self.assertEqual(1, len(list(trace.select("restart_all"))))

    def test_staggered_restart_waits_for_late_peer(self):
        trace = harness.run_scenario(Preset.staggered_restart.scenario, self.tempdir)
        restart = next(trace.select("restart_all"))
        late = next(trace.select("restart", node="nodeC"))
        self.assertEqual(restart['t'] + 150, late['t'])
        for node in ("nodeA", "nodeB"):
            complete = next(trace.select("recovery_complete", node=node))
            self.assertIn("nodeC", complete['discovered'])
            self.assertGreater(complete['t'], late['t'])

    def test_counter_resumes_after_snapshot_value(self):
        s = Preset.counter.scenario
        trace = harness.run_scenario(s, self.tempdir)
        store = SnapshotStore(os.path.join(self.tempdir, "store"))
        self.assertEqual([1], store.committed_epochs())
        self.assertEqual([], harness.check_counter(trace, store))
        restart = next(trace.select("restart_all"))
        for node in s.nodes:
            with self.subTest(node=node):
                value = apps.deserialize(store.get_snapshot(1, node).app_state).value
                after = [r for r in trace.since(restart['seq']) if "app_output" == r['ev'] and node == r['node']]
                self.assertEqual(value + 1, after[0]['step'])
                self.assertEqual(s.steps, after[-1]['step'])

    def test_sweep(self):
        s = replace(Preset.fibonacci.scenario, steps=8)
        evaluations = harness.sweep(s, 3, workers=2, out_root=self.tempdir)
        self.assertEqual([0, 1, 2], [e.scenario.seed for e in evaluations])
        for e in evaluations:
            with self.subTest(seed=e.scenario.seed):
                self.assertEqual([], e.violations)
                self.assertEqual(3, len(e.scenario.events))
                self.assertTrue(os.path.isfile(os.path.join(self.tempdir, f"seed-{e.scenario.seed}", "trace.jsonl")))

    def test_seeded_variant(self):
        s = Preset.fibonacci.scenario
        variant = harness.seeded_variant(s, 7, horizon=100)
        self.assertEqual(variant, harness.seeded_variant(s, 7, horizon=100))
        actions = [ev.action for ev in variant.events]
        self.assertEqual([Action.checkpoint, Action.crash, Action.restart_all], actions)
        self.assertEqual([Action.checkpoint], [ev.action for ev in harness.seeded_variant(s, 7, 100, False).events])
        self.assertEqual(Settings(), variant.settings)

if __name__ == '__main__':
    unittest.main()
