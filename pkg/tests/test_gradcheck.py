import math

import numpy as np
import pytest

from dualsplat.gradcheck import MODULES, TOLERANCE, run_gradcheck
from dualsplat.oracle import finite_diff, rel_error


def test_finite_diff_examples():
    g = finite_diff(lambda x: float(x[0] ** 2), np.array([1.0]))
    assert abs(g[0] - 2.0) <= 1e-6
    assert not finite_diff(lambda x: 3.0, np.array([0.5, -2.0])).any()
    with pytest.raises(FloatingPointError):
        finite_diff(lambda x: math.inf, np.array([1.0]))


def test_finite_diff_step_scales_with_parameter():
    # central differences of x^3 give exactly 3x^2 + h^2, which exposes the step
    for x in (0.3, 250.0):
        g = finite_diff(lambda v: float(v[0] ** 3), np.array([x]))
        h = 1e-4 * max(1.0, x)
        assert g[0] == pytest.approx(3 * x**2 + h**2, rel=1e-9)


def test_rel_error_floor():
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_error(np.array([1.0]), np.array([1.001])) == pytest.approx(0.001 / 1.001)


@pytest.mark.parametrize("module", MODULES)
def test_suite_passes(module):
    results = run_gradcheck([module])
    assert results and all(r.module == module for r in results)
    bad = [(r.group, r.error) for r in results if r.error > TOLERANCE]
    assert not bad


def test_corrupted_gradient_is_caught():
    results = run_gradcheck(["sphmip"], corrupt="sphmip")
    assert any(not r.ok for r in results)
