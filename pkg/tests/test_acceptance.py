"""Acceptance criteria at full scale, one test per criterion.

Each test prints a ``[PASS]/[FAIL] criterion N`` line; the lines are
repeated in the terminal summary (see conftest.py).  Expect roughly half
an hour on one core.
"""

import pytest

from singular_sde_lab.runner import csv_body, run_suite
from singular_sde_lab.suite import CheckResult, run_check

# stated wall-clock budgets in seconds
BUDGET = {1: 60.0, 2: 1.0, 3: 300.0, 6: 600.0}

LINES = []


def _record(line):
    LINES.append(line)
    print(line)


@pytest.mark.slow
@pytest.mark.parametrize("number", range(1, 9))
def test_criterion(number):
    res = run_check(number, "full")
    budget = BUDGET.get(number)
    in_time = budget is None or res.seconds < budget
    timing = f" [{res.seconds:.1f} s" + (f", budget {budget:g} s]" if budget else "]")
    _record(CheckResult(number, res.name, res.passed and in_time, res.summary + timing).line())
    assert res.passed, res.summary
    assert in_time, f"took {res.seconds:.1f} s, budget {budget} s"


@pytest.mark.slow
def test_criterion_9_reproducibility(tmp_path):
    runs = []
    for tag in ("a", "b"):
        manifest, _ = run_suite(tmp_path / tag, "quick", log=lambda *_: None)
        runs.append(manifest)
    names = sorted(f for f in runs[0].files if f.endswith(".csv"))
    assert names == sorted(f for f in runs[1].files if f.endswith(".csv"))
    differing = [n for n in names if csv_body(tmp_path / "a" / n) != csv_body(tmp_path / "b" / n)]
    same_hash = runs[0].config_hash == runs[1].config_hash
    ok = not differing and same_hash
    _record(CheckResult(9, "reproducibility", ok,
                        f"{len(names) - len(differing)}/{len(names)} CSV bodies byte-identical "
                        "across two quick-scale suite runs").line())
    assert ok, differing
