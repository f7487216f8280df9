import math

import numpy as np
import pytest
from loguru import logger

from kernels import ModelParams
from operators import TimeGrid


@pytest.fixture
def params() -> ModelParams:
    return ModelParams(1.0, 1.0, 0.75)


@pytest.fixture
def grid() -> TimeGrid:
    return TimeGrid(1.0, 32)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def log_messages():
    """Collect loguru records emitted during a test."""
    messages: list[str] = []
    sink_id = logger.add(lambda message: messages.append(message.record["message"]), level="DEBUG")
    yield messages
    logger.remove(sink_id)


def relative_error(approx, exact) -> float:
    approx, exact = np.asarray(approx, dtype=float), np.asarray(exact, dtype=float)
    return float(np.max(np.abs(approx - exact) / np.abs(exact)))


def standard_error(sample: np.ndarray) -> float:
    return float(np.std(sample, ddof=1) / math.sqrt(sample.size))
