import numpy as np
import pytest
import torch

from ckdtrack.backbone import ModelConfig
from ckdtrack.data import CropConfig, SampleSource, generate_synthetic_sequence
from ckdtrack.train import build_model, collate

TINY = ModelConfig(depth=2, dim=8, heads=2, patch=8, mlp_ratio=2.0,
                   template_size=16, search_size=24, head_dim=8)
TINY_CROP = CropConfig(template_size=16, search_size=24)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=0, dtype=torch.float64)


@pytest.fixture(scope="session")
def short_sequences():
    return [generate_synthetic_sequence(s, length=12, canvas=96) for s in (11, 12, 13)]


@pytest.fixture
def tiny_batch(short_sequences):
    src = SampleSource(short_sequences, TINY_CROP)
    return collate(src.batch(np.random.default_rng(0), 3), torch.float64)


@pytest.fixture
def default_batch(short_sequences):
    src = SampleSource(short_sequences)
    return collate(src.batch(np.random.default_rng(0), 2))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:]) if k[2:].isdigit() else 99):
            terminalreporter.write_line(ACCEPTANCE[key])
