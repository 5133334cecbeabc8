import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from attnfuse import numgrid  # noqa: E402


@pytest.fixture(autouse=True)
def strict_finite_checks():
    # validate the no-NaN/Inf invariant on every op output while testing
    old = numgrid.CHECK_ALL_OPS
    numgrid.CHECK_ALL_OPS = True
    yield
    numgrid.CHECK_ALL_OPS = old
