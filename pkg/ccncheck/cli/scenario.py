"""
Run checkpoint and restart scenarios and check their traces
"""
import os
import sys
import logging
import argparse

import ccncheck
from ccncheck import harness
from ccncheck.harness import Scenario
from ccncheck.deployment import Preset
from ccncheck.cli import command, dispatch


# output logging to stdout
# https://stackoverflow.com/a/56144390
logging.basicConfig()
ccncheck.logger.level = logging.INFO

scenario_cli = dispatch.group("scenario", help=__doc__)

def load_scenario(ref: str) -> Scenario:
    if ref in Preset.__members__:
        return Preset[ref].scenario
    if not os.path.isfile(ref):
        raise ValueError(f"'{ref}' is neither a scenario file nor one of {sorted(Preset.__members__)}")
    return Scenario.load(ref)

_RUN_ARGUMENTS = {
    "scenario": dict(type=str, help="scenario JSON file or preset name"),
    "--out": dict(type=str, required=True, help="output directory for trace.jsonl and store/"),
}

@command("run", arguments=_RUN_ARGUMENTS)
@scenario_cli.command("run", arguments=_RUN_ARGUMENTS)
def run(args: argparse.Namespace):
    """
    Run one scenario, then check its trace and every committed epoch.
    """
    evaluation = harness.evaluate(load_scenario(args.scenario), args.out)
    print(evaluation.summary())
    if not evaluation.ok:
        sys.exit(1)

_SWEEP_ARGUMENTS = {
    "--scenario": dict(type=str, required=True, help="scenario JSON file or preset name"),
    "--seeds": dict(type=int, default=100, help="number of seeded variants"),
    "--workers": dict(type=int, default=None, help="concurrent scenarios, defaults to $CCNCHECK_WORKERS"),
    "--no-faults": dict(default=False, action="store_true", help="inject checkpoints only"),
    "--out": dict(type=str, default=None, help="keep each variant's output under this directory"),
}

@command("sweep", arguments=_SWEEP_ARGUMENTS)
@scenario_cli.command("sweep", arguments=_SWEEP_ARGUMENTS)
def sweep(args: argparse.Namespace):
    """
    Run seeded variants with a checkpoint and, unless --no-faults, a crash of everything and a restart.
    """
    evaluations = harness.sweep(load_scenario(args.scenario),
                                args.seeds,
                                workers=args.workers,
                                faults=not args.no_faults,
                                out_root=args.out)
    failed = 0
    for evaluation in evaluations:
        status = "ok" if evaluation.ok else "FAILED"
        print(f"seed {evaluation.scenario.seed:>4} {evaluation.digest} committed={evaluation.committed} {status}")
        for violation in evaluation.violations:
            print(f"    {violation}")
        failed += 0 if evaluation.ok else 1
    print(f"{len(evaluations) - failed}/{len(evaluations)} seeds passed")
    if failed:
        sys.exit(1)

@scenario_cli.command("list")
def list(args: argparse.Namespace):
    """
    List built-in scenarios
    """
    for preset in Preset:
        s = preset.scenario
        print(preset.name, s.app, [f"{ev.action.value}@{ev.at}" for ev in s.events])
