# tests/conftest.py
#
# Общие фикстуры: корень проекта в sys.path (как в скриптах проекта),
# маленькие архитектуры и датасеты, пропуск slow-тестов без FEDPRUNE_SLOW=1.

import os
import sys
import pathlib

import numpy as np
import pytest

BASE_DIR = str(pathlib.Path(__file__).resolve().parents[1])
if BASE_DIR not in sys.path:
    sys.path.insert(0, BASE_DIR)

from Models.ids_cnn import ArchConfig, ConvBlock  # noqa: E402
from data.synthetic import generate_synthetic  # noqa: E402

CONFIGS_DIR = os.path.join(BASE_DIR, "configs")


def pytest_collection_modifyitems(config, items):
    if os.getenv("FEDPRUNE_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="долгий тест: запустите с FEDPRUNE_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_arch(input_length: int = 8, n_classes: int = 3) -> ArchConfig:
    return ArchConfig(
        input_length=input_length,
        n_classes=n_classes,
        conv=[ConvBlock(out_channels=2, kernel_size=3), ConvBlock(out_channels=3, kernel_size=2)],
        hidden=[4],
    )


@pytest.fixture
def small_arch() -> ArchConfig:
    return tiny_arch()


@pytest.fixture
def blobs():
    """4 класса × 8 признаков, хорошо разделимые."""
    return generate_synthetic(4, 8, [60, 50, 40, 30], separation=5.0, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
