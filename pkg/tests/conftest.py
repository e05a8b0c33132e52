import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtda import autodiff as ad

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def leaf(arr, dtype=np.float64):
    return ad.Tensor(np.array(arr, dtype=dtype), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def check_grads(f, params, tol=1e-6, **kw):
    rep = ad.grad_check(f, params, tol=tol, **kw)
    assert rep.passed, "\n".join(rep.lines())
    return rep
