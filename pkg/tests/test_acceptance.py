"""The eleven acceptance criteria, one test each, with a pass/fail line per check."""
import pytest

from storage_poa.verification import CHECKS, run_check


@pytest.mark.parametrize("check", CHECKS, ids=[f"{c.id:02d}-{c.suite}" for c in CHECKS])
def test_acceptance(check, capsys):
    res = run_check(check)
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.detail
