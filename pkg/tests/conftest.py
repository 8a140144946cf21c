import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from faultforge.fixtures import populated_image  # noqa: E402
from faultforge.runtime import Runtime  # noqa: E402


@pytest.fixture
def rt():
    return Runtime(seed=0)


@pytest.fixture(scope="session")
def populated():
    return populated_image()
