import numpy as np
import pytest

from fann.gradcheck import (
    finite_difference,
    refine_fd_entry,
    relative_error,
    verified_error,
)


def test_finite_difference_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    grad = finite_difference(lambda: float(np.sum(x**2)), x, 1e-5)
    assert relative_error(2.0 * x, grad) < 1e-9
    # x restored after probing
    assert np.array_equal(x, [1.0, -2.0, 0.5])


def test_finite_difference_index_subset():
    x = np.arange(6.0).reshape(2, 3)
    grad = finite_difference(lambda: float(np.sum(x**3)), x, 1e-5, indices=[0, 4])
    flat = grad.ravel()
    assert np.isfinite(flat[[0, 4]]).all()
    assert np.isnan(flat[[1, 2, 3, 5]]).all()
    assert abs(flat[4] - 3 * 16.0) < 1e-3


def test_relative_error_block_scale():
    a = np.array([1.0, 100.0])
    n = np.array([1.0, 100.1])
    assert relative_error(a, n) == pytest.approx(0.1 / 100.1)
    assert relative_error(a, np.full(2, np.nan)) == 0.0


def test_refine_fd_entry_converges_at_kink():
    # f has a ReLU kink at x = c with c inside the nominal probe step;
    # the refined estimate must converge to the true local derivative 0
    c = 3e-5
    x = np.array([0.0])

    def f():
        return float(max(x[0] - c, 0.0))

    coarse = finite_difference(f, x, 1e-4)[0]
    assert coarse > 0.3  # the kink corrupts the plain estimate
    refined = refine_fd_entry(f, x, 0, 1e-4)
    assert abs(refined) < 1e-6


def test_verified_error_repairs_kink_probes():
    c = 3e-5
    x = np.array([0.0, 1.0])

    def f():
        return float(max(x[0] - c, 0.0)) + float(x[1] ** 2)

    analytic = np.array([0.0, 2.0])
    err = verified_error(analytic, f, x, 1e-4, tol=1e-3)
    assert err < 1e-3


def test_verified_error_still_catches_wrong_gradients():
    x = np.array([0.5, -0.25])

    def f():
        return float(np.sum(x**2))

    wrong = np.array([2.0 * x[0], 2.0 * x[1] + 0.5])
    assert verified_error(wrong, f, x, 1e-4, tol=1e-3) > 0.1
