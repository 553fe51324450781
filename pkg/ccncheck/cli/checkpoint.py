"""
Inspect traces and snapshot stores
"""
import sys
import logging
import argparse

import ccncheck
from ccncheck import apps, harness
from ccncheck.trace import Trace
from ccncheck.store import SnapshotStore
from ccncheck.checkpoint import verify_consistency
from ccncheck.recovery import RecoveryError, plan_restart
from ccncheck.cli import command, dispatch


logging.basicConfig()
ccncheck.logger.level = logging.INFO

checkpoint_cli = dispatch.group("checkpoint", help=__doc__)

_VERIFY_ARGUMENTS = {
    "--trace": dict(type=str, required=True, help="trace.jsonl written by `ccncheck run`"),
    "--store": dict(type=str, required=True, help="snapshot store directory"),
}

@command("verify", arguments=_VERIFY_ARGUMENTS)
@checkpoint_cli.command("verify", arguments=_VERIFY_ARGUMENTS)
def verify(args: argparse.Namespace):
    """
    Check handshakes, blocking, drain and fail-stop over a trace, and consistency of every committed epoch.
    """
    trace = Trace.load(args.trace)
    store = SnapshotStore(args.store)
    violations = (harness.check_handshakes(trace)
                  + harness.check_blocking(trace)
                  + harness.check_drain(trace)
                  + harness.check_fail_stop(trace))
    for epoch in store.committed_epochs():
        report = verify_consistency(store.load_global(epoch), trace)
        print(f"epoch {epoch}: {'consistent' if report.consistent else report}")
        if not report.consistent:
            violations.append(f"epoch {epoch} is inconsistent")
    print(f"digest: {trace.digest()}")
    for violation in violations:
        print(f"  {violation}")
    if violations:
        sys.exit(1)

_REPLAY_ARGUMENTS = {
    "--store": dict(type=str, required=True, help="snapshot store directory"),
    "--epoch": dict(type=int, default=None, help="epoch to load, defaults to the latest committed"),
}

@command("replay", arguments=_REPLAY_ARGUMENTS)
@checkpoint_cli.command("replay", arguments=_REPLAY_ARGUMENTS)
def replay(args: argparse.Namespace):
    """
    Load and checksum-verify an epoch, then show what a restart from it would do.
    """
    try:
        plan = plan_restart(SnapshotStore(args.store), args.epoch)
    except RecoveryError as e:
        print(e, file=sys.stderr)
        sys.exit(1)
    print(f"epoch {plan.epoch}: {plan.processes}")
    for process in plan.processes:
        snap = plan.snapshots[process]
        print(f"{process} @ tick {snap.tick}: {apps.to_dict(apps.deserialize(snap.app_state))}")
        print(f"    undelivered: {len(snap.delivered_not_consumed)}, queued: {len(snap.messenger.get('queued', []))}")
        for name in plan.pending_to_reissue[process]:
            print(f"    reissue {name}")
