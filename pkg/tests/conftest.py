import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A 2-tile, 4x4-grid, 16 px corpus shared by dataset/training/cli tests."""
    from temporal_lulc.synth import SynthConfig, generate_synthetic_corpus

    out = tmp_path_factory.mktemp("tiny_corpus")
    cfg = SynthConfig(tiles=2, grid_n=4, patch_px=16, seed=7)
    return generate_synthetic_corpus(cfg, out)
