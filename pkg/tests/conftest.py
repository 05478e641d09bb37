import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coverhead.core import SpeciesRegistry  # noqa: E402
from coverhead.head import HeadParams  # noqa: E402


def registry_of(n):
    return SpeciesRegistry(tuple(f"sp{i}" for i in range(n)))


def random_params(rng, n_species, n_features, scale=1.0):
    params = HeadParams.init(n_features, registry_of(n_species), rng)
    params.W *= scale
    params.b = rng.normal(0.0, 1.0, n_species + 2)
    params.kappa_raw = float(rng.normal(0.0, 1.0))
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
