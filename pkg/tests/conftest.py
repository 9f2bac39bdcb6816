import numpy as np
import pytest

from tokendiff.rng import RngStream


@pytest.fixture
def rng():
    return RngStream(20240801)


def expm_taylor(q: np.ndarray, delta: float, terms: int = 50) -> np.ndarray:
    """Truncated Taylor series of exp(delta * q); the independent oracle."""
    out = np.eye(q.shape[0])
    term = np.eye(q.shape[0])
    for k in range(1, terms + 1):
        term = term @ (delta * q) / k
        out = out + term
    return out


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    """Relative error with an absolute floor guarding exactly-zero gradients."""
    return abs(a - b) / max(abs(a), abs(b), floor)
