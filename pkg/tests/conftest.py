import numpy as np
import pytest
import torch

from glfusion.backbone import BackboneConfig
from glfusion.core import ImageTensor
from glfusion.detector import Detector, DetectorConfig

TINY = BackboneConfig(architecture="tiny", pretrained=False)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return Detector(DetectorConfig(backbone=TINY, seed=0)).eval()


def random_image(seed, size=(224, 224)):
    w, h = size
    return ImageTensor(np.random.default_rng(seed).random((3, h, w)).astype(np.float32), f"rand{seed}.png")


@pytest.fixture
def images():
    return [random_image(i, s) for i, s in enumerate([(224, 224), (300, 260), (500, 180), (96, 128)])]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
