import dataclasses

import pytest

from rlvr_lab.env import TaskConfig
from rlvr_lab.trainer import TrainConfig

ACCEPTANCE_LINES: list[str] = []


def small_config(**overrides) -> TrainConfig:
    """A few-second configuration for unit and integration tests."""
    task = overrides.pop("task", TaskConfig(count=120))
    base = TrainConfig(prompts_per_step=32, steps=6, task=task, seed=3)
    return dataclasses.replace(base, **overrides)


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
