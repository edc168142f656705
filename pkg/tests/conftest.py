import numpy as np
import pytest

from spikeiaa import numerics as nx
from spikeiaa.spike_io import MetadataRecord


@pytest.fixture
def f64():
    with nx.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def meta():
    return MetadataRecord("Macaque", "M1-CO1", "B", "M1", "center-out", "2024-01-01")
