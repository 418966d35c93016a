import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from frameselect.frames import TokenGrid
from frameselect.selector import SelectorConfig, init_params

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture
def tiny_config() -> SelectorConfig:
    return SelectorConfig(
        d=16, n_blocks=2, heads=2, m=4, n_max=4, vocab=64,
        d_v=6, l_max=8, r_max=6, score_hidden=8,
    )


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=1, zero_score_out=False)


def random_frames(rng: np.random.Generator, n: int, g: int, d_v: int) -> list[TokenGrid]:
    return [TokenGrid(i, rng.standard_normal((g, g, d_v))) for i in range(n)]
