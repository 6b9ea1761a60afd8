"""Acceptance suite: one test per numbered criterion, each printing its verdict line.

Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``. Closed-loop runs are shared between
criteria through one :class:`~freqnet.acceptance.RunCache`.
"""

import sys

import pytest

from freqnet.acceptance import CRITERIA, RunCache, format_result, run_acceptance
from freqnet.scenario import builtin_scenario


@pytest.fixture(scope="module")
def cache():
    return RunCache(builtin_scenario())


def _run(cache, number, capsys):
    import time
    t0 = time.perf_counter()
    res = CRITERIA[number](cache)
    res = type(res)(res.number, res.title, res.passed, res.detail, time.perf_counter() - t0)
    with capsys.disabled():
        print("\n" + format_result(res), flush=True)
    assert res.passed, format_result(res)


def test_criterion_1_workload_arithmetic(cache, capsys):
    _run(cache, 1, capsys)


def test_criterion_2_constrained_steady_state(cache, capsys):
    _run(cache, 2, capsys)


def test_criterion_3_oracle_equivalence(cache, capsys):
    _run(cache, 3, capsys)


def test_criterion_4_passivity_identities(cache, capsys):
    _run(cache, 4, capsys)


def test_criterion_5_closed_loop_dissipation(cache, capsys):
    _run(cache, 5, capsys)


def test_criterion_6_mean_square_decay(cache, capsys):
    _run(cache, 6, capsys)


def test_criterion_7_rbc_tracking(cache, capsys):
    _run(cache, 7, capsys)


def test_criterion_8_equilibrium_preservation(cache, capsys):
    _run(cache, 8, capsys)


def test_criterion_9_projection_and_unbiasedness(cache, capsys):
    _run(cache, 9, capsys)


if __name__ == "__main__":
    results = run_acceptance(on_result=lambda r: print(format_result(r), flush=True))
    sys.exit(0 if all(r.passed for r in results) else 1)
