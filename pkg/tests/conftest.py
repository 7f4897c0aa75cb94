import numpy as np
import pytest

from eprb.problem import ProblemDefinition, constant_signal


def make_problem(length=1.0, final_time=1.0, u=None, y0=5.0, kappa=None):
    kappa = kappa if kappa is not None else (lambda x: np.ones_like(x))
    return ProblemDefinition(
        length=length,
        final_time=final_time,
        kappa1=kappa,
        kappa2=kappa,
        y_init=lambda x, c=y0: np.full_like(x, c),
        u=u if u is not None else constant_signal(1.0),
        mu_low=np.ones(4),
        mu_high=np.full(4, 5.0),
    )


@pytest.fixture
def unit_problem():
    return make_problem()
