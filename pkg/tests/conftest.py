import numpy as np
import pytest

from camero.tensor import Tensor, finite_diff_gradient

# Gradient agreement tolerance used across the suite: per coordinate,
# |analytic - numeric| <= max(1e-4 * |numeric|, 1e-7).
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7


def assert_grad_close(analytic, numeric, context=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape, context
    bound = np.maximum(GRAD_RTOL * np.abs(numeric), GRAD_ATOL).ravel()
    diff = np.abs(analytic - numeric).ravel()
    assert np.all(diff <= bound), (
        f"{context}: gradient mismatch, max diff {diff.max():.3e}, "
        f"bound there {bound[diff.argmax()]:.3e}")


@pytest.fixture
def gradcheck():
    """Compare reverse-mode gradients against central finite differences.

    ``f`` maps a Tensor to a scalar Tensor. The analytic gradient comes
    from ``backward()``; the numeric one from the finite-difference
    oracle, which never touches the backward path.
    """

    def check(f, x_values, h=1e-5, context=""):
        x = Tensor(np.asarray(x_values, dtype=np.float64), requires_grad=True)
        out = f(x)
        out.backward()
        numeric = finite_diff_gradient(f, Tensor(np.asarray(x_values, dtype=np.float64)), h=h)
        assert_grad_close(x.grad, numeric.data, context=context or getattr(f, "__name__", "f"))
        return x.grad

    return check
