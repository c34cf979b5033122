import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from idla.aggregation import Cluster  # noqa: E402
from idla.lattice import ball_sites  # noqa: E402
from idla.walks import InstructionStacks, RngStream  # noqa: E402


@pytest.fixture
def stream():
    return RngStream(20240611)


@pytest.fixture
def stacks2():
    return InstructionStacks(7, 2)


@pytest.fixture
def ball5():
    """Cluster equal to 𝔹(0,5) in d=2."""
    return Cluster(2, ball_sites(2, 5))
