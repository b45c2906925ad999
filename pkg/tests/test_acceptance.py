"""The eleven acceptance criteria, each owned by exactly one subcommand runner."""

from __future__ import annotations

import pytest

from fourthlab import experiments

OWNER = {n: cmd for cmd, crits in experiments.CRITERIA.items() for n in crits}


def test_every_criterion_has_one_owner():
    owned = [n for crits in experiments.CRITERIA.values() for n in crits]
    assert sorted(owned) == list(range(1, 12))


@pytest.mark.parametrize("criterion", range(1, 12))
def test_criterion(criterion, run_results):
    result = run_results(OWNER[criterion])
    checks = [c for c in result.checks if c.criterion == criterion]
    assert len(checks) == 1
    print()
    print(checks[0].line())
    assert checks[0].passed, checks[0].line()


@pytest.mark.parametrize("command", sorted(experiments.RUNNERS))
def test_diagnostics(command, run_results):
    for c in run_results(command).checks:
        if c.criterion is None:
            print()
            print(c.line())
            assert c.passed, c.line()
