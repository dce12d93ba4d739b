import numpy as np
import pytest

from simtriplet.augment import AugmentPolicy, NormStats
from simtriplet.model import EncoderConfig
from simtriplet.patch_sampler import MosaicSpec, generate_synthetic_mosaic, sample_pairs
from simtriplet.trainer import PairDataset


def toy_encoder_config(size=8):
    return EncoderConfig(input_size=size, backbone_blocks=[(4, 1), (8, 2)], projection_dims=[32, 32, 32])


@pytest.fixture(scope="session")
def toy_dataset():
    spec = MosaicSpec(grid=(8, 8), patch_size=16, adjacency_target=0.75)
    _, grid = generate_synthetic_mosaic(spec, 11, "toy")
    pairs = sample_pairs(grid, 48, np.random.default_rng(0))
    return PairDataset({"toy": grid}, pairs, AugmentPolicy(output_size=8), NormStats())


# criterion number -> (passed, detail), filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
