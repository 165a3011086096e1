"""The parts of the long-run bounds that hold under delayed feedback.

The acceptance module reports the undelayed statements over the whole
suite; these tests pin down what is guaranteed.
"""
import pytest

from tests import bounds


def test_one_step_track_stays_in_band():
    # horizon 1 resolves before the next issue, so the classic band holds
    assert bounds.violations("band", horizons=[1]) == []


def test_delay_aware_band_holds_everywhere():
    assert bounds.violations("delayed", tol=1e-12) == []


def test_long_run_bound_holds_at_small_alpha():
    assert bounds.violations("long_run", alphas=[0.1]) == []


def test_one_step_long_run_bound_holds():
    assert bounds.violations("long_run", horizons=[1]) == []


@pytest.mark.parametrize("alpha", bounds.ALPHAS)
def test_suite_covers_every_case(alpha):
    cases = [c for c in bounds.suite() if c[0] == alpha]
    assert {c[3] for c in cases} == set(bounds.STREAMS)
    assert {c[4] for c in cases} == set(bounds.CHOOSERS)
    assert {(c[1], c[2]) for c in cases} == {(e, d) for e in bounds.ETAS for d in bounds.DS}
