import numpy as np
import pytest

from enkbf_lab.linmodel import ModelParams
from enkbf_lab.riccati import solve_are


@pytest.fixture(scope="session")
def scalar_model():
    """Reference scalar model: a=-1, h=1, sigma_b=1, prior N(0, 1)."""
    return ModelParams.scalar(a=-1.0, h=1.0, sigma_b=1.0, m0=0.0, sigma0=1.0)


@pytest.fixture(scope="session")
def scalar_consts(scalar_model):
    return solve_are(scalar_model)


@pytest.fixture(scope="session")
def diag_model():
    """Decoupled 2x2 model; its ARE splits into scalar quadratics."""
    return ModelParams(
        A=np.diag([-1.0, -2.0]),
        H=np.eye(2),
        sigma_B=np.eye(2),
        m0=np.zeros(2),
        Sigma0=np.eye(2),
    )
