import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from msafeb.tensor import set_checked


@pytest.fixture(autouse=True, scope="session")
def checked_mode():
    # finiteness assertions on every forward op while testing
    set_checked(True)
    yield
    set_checked(False)
