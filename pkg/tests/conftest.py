import numpy as np
import pytest

from wsodkit.geometry import Box, ScoredBox


def random_box(rng: np.random.Generator, lo: float = 0.0, hi: float = 100.0,
               min_size: float = 1.0) -> Box:
    x1 = rng.uniform(lo, hi - min_size)
    y1 = rng.uniform(lo, hi - min_size)
    x2 = rng.uniform(x1 + min_size, hi)
    y2 = rng.uniform(y1 + min_size, hi)
    return Box(x1, y1, x2, y2)


def random_boxes(rng: np.random.Generator, n: int, **kwargs) -> list[Box]:
    return [random_box(rng, **kwargs) for _ in range(n)]


def random_dets(rng: np.random.Generator, n: int, num_classes: int = 3) -> list[ScoredBox]:
    return [
        ScoredBox(
            box=random_box(rng),
            score=float(rng.uniform(0.01, 0.99)),
            class_id=int(rng.integers(0, num_classes)),
        )
        for _ in range(n)
    ]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
