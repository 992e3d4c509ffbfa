import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """7 classes x 6 utterances on the desk schema, separation 5."""
    from fusionattn.data import synth_generate

    out = tmp_path_factory.mktemp("synth_small")
    return synth_generate(out, 6, 5.0, seed=3)
