import numpy as np
import pytest
import torch

from cloudgap import chipstore, masking

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_chips():
    return chipstore.generate_synthetic_chips(8, 32, 32, seed=11)


@pytest.fixture(scope="session")
def small_masks():
    return chipstore.generate_synthetic_masks(40, 32, 32, seed=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pixel_mask(rng, t=3, h=32, w=32, density=None):
    density = rng.uniform(0.02, 0.6) if density is None else density
    m = (rng.uniform(size=(t, h, w)) < density).astype(np.uint8)
    if not m.any():
        m[rng.integers(t), rng.integers(h), rng.integers(w)] = 1
    return m


def masked_chip_from(chip, pixel_mask, mode="E2", fill=0.0):
    per_scene = [f"m{t}" if pixel_mask[t].any() else None for t in range(pixel_mask.shape[0])]
    assignment = masking.MaskAssignment(mode, per_scene, pixel_mask.astype(np.uint8))
    return masking.apply_mask(chip, assignment, fill)
