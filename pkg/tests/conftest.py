import numpy as np
import pytest

from condflow.numerics import finite_difference_gradient, max_relative_error


def gradcheck(build_loss, params, h=1e-5, tol=1e-4):
    """Assert reverse-mode gradients match central differences for every
    parameter of a float64 loss builder."""
    loss = build_loss()
    loss.backward()
    grads = {id(p): p.grad.copy() for p in params}
    for p in params:
        def f(values, p=p):
            old = p.data
            p.data = values.copy()
            try:
                return build_loss().item()
            finally:
                p.data = old
        fd = finite_difference_gradient(f, p.data.copy(), h)
        err = max_relative_error(grads[id(p)], fd)
        assert err <= tol, f"gradient mismatch for {getattr(p, 'name', p)}: {err}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
