import numpy as np
import pytest


class FrozenUniformRng:
    """Stub rng whose uniforms are all 1/e, making every Gumbel draw zero."""

    def __init__(self):
        self.calls = 0

    def uniforms(self, count):
        self.calls += count
        return np.full(count, 1.0 / np.e)

    def split(self, *labels):
        return self


@pytest.fixture
def frozen_rng():
    return FrozenUniformRng()
