import numpy as np
import pytest

from animweave.backbone import load_backbone
from animweave.config import RunConfig
from animweave.generator import AnimationGenerator


def gradient_image(size: int = 32, phase: float = 0.0) -> np.ndarray:
    """Smooth test image; the tiny codec is only accurate on low-frequency content."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    return np.stack([xx, yy, 0.5 + 0.4 * np.sin(3 * xx + 2 * yy + phase)], -1).astype(np.float32)


@pytest.fixture(scope="session")
def tiny():
    return load_backbone("tiny-test")


@pytest.fixture(scope="session")
def image():
    return gradient_image()


@pytest.fixture(scope="session")
def generator(tiny):
    return AnimationGenerator(tiny, RunConfig(n_f=4))


@pytest.fixture(scope="session")
def fast_generator(tiny):
    # 10 steps keep plumbing tests quick; schedules scale with the step count
    return AnimationGenerator(tiny, RunConfig(n_f=3, steps=10))
