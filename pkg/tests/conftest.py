import numpy as np
import pytest

from softrpn import autograd as ag


def numeric_grad(fn, tensor: ag.Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn wrt one tensor."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    with ag.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn()
            flat[i] = orig - step
            lo = fn()
            flat[i] = orig
            grad[i] = (hi - lo) / (2 * step)
    return grad.reshape(tensor.data.shape)


def assert_grad_matches(fn, tensor: ag.Tensor, rel_tol: float = 1e-3,
                        step: float = 1e-5):
    """Backprop fn() and compare tensor.grad against finite differences."""
    tensor.zero_grad()
    loss = fn()
    loss.backward()
    got = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
    want = numeric_grad(lambda: fn().item(), tensor, step=step)
    np.testing.assert_allclose(got, want, atol=1e-7, rtol=rel_tol,
                               err_msg="backprop gradient disagrees with "
                                       "finite differences")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
