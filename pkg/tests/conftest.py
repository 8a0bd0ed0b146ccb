import sys
from pathlib import Path

import pytest

from rainunet import precision

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def wide():
    """Run the test in 64-bit precision (finite-difference friendly)."""
    with precision.use_precision("wide"):
        yield


@pytest.fixture(autouse=True)
def _standard_by_default():
    precision.set_precision("standard")
    yield
    precision.set_precision("standard")
