from enum import Enum
from dataclasses import dataclass
from typing import Tuple

from ccncheck.harness import ALL, COORDINATOR, Action, Scenario, ScenarioEvent


@dataclass(frozen=True)
class _Fibonacci(Scenario):
    app: str = "fibonacci"
    name: str = "fibonacci"
    events: Tuple[ScenarioEvent, ...] = (ScenarioEvent(30, Action.checkpoint),)

@dataclass(frozen=True)
class _FibonacciCrash(Scenario):
    app: str = "fibonacci"
    name: str = "fibonacci_crash"
    events: Tuple[ScenarioEvent, ...] = (ScenarioEvent(30, Action.checkpoint),
                                         ScenarioEvent(80, Action.crash, ALL),
                                         ScenarioEvent(90, Action.restart_all))

@dataclass(frozen=True)
class _StaggeredRestart(Scenario):
    # nodeC comes back after its peers used up their doubling discovery rounds
    app: str = "fibonacci"
    name: str = "staggered_restart"
    events: Tuple[ScenarioEvent, ...] = (ScenarioEvent(30, Action.checkpoint),
                                         ScenarioEvent(80, Action.crash, ALL),
                                         ScenarioEvent(90, Action.restart_all, delays=(("nodeC", 150),)))

@dataclass(frozen=True)
class _Counter(Scenario):
    app: str = "counter"
    name: str = "counter"
    nodes: Tuple[str, ...] = ("counter0", "counter1", "counter2")
    events: Tuple[ScenarioEvent, ...] = (ScenarioEvent(40, Action.checkpoint),
                                         ScenarioEvent(75, Action.crash, ALL),
                                         ScenarioEvent(80, Action.restart_all))

@dataclass(frozen=True)
class _CoordinatorRestart(Scenario):
    app: str = "fibonacci"
    name: str = "coordinator_restart"
    events: Tuple[ScenarioEvent, ...] = (ScenarioEvent(20, Action.checkpoint),
                                         ScenarioEvent(60, Action.crash, COORDINATOR),
                                         ScenarioEvent(65, Action.restart, COORDINATOR),
                                         ScenarioEvent(80, Action.checkpoint))

class Preset(Enum):
    fibonacci = _Fibonacci
    fibonacci_crash = _FibonacciCrash
    staggered_restart = _StaggeredRestart
    counter = _Counter
    coordinator_restart = _CoordinatorRestart

    @property
    def scenario(self) -> Scenario:
        return self.value()
