import numpy as np
import pytest
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pnpmix.predictor import ConditioningVector, ToyConfig, ToyDenoiser, ToyPredictor
from pnpmix.schedule import build_schedule
from pnpmix.tensor import BinaryMask, LatentTensor

finite_f32 = st.floats(
    min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False, width=32
)


def latent_arrays(max_side: int = 4, max_channels: int = 3):
    shapes = st.tuples(
        st.integers(1, max_channels), st.integers(1, max_side), st.integers(1, max_side)
    )
    return hnp.arrays(np.float32, shapes, elements=finite_f32)


def random_latent(rng: np.random.Generator, shape: tuple[int, int, int]) -> LatentTensor:
    return LatentTensor(rng.standard_normal(shape, dtype=np.float32))


def random_mask(rng: np.random.Generator, shape: tuple[int, int], p: float = 0.5) -> BinaryMask:
    return BinaryMask(rng.random(shape) < p)


def random_toy(shape: tuple[int, int, int], seed: int = 0, model_width: int = 16) -> ToyPredictor:
    c, h, w = shape
    model = ToyDenoiser(ToyConfig(channels=c, height=h, width=w, model_width=model_width), seed=seed)
    model.init_parameters(seed, zero_output=False)
    return ToyPredictor(model)


@pytest.fixture(scope="session")
def sched50():
    return build_schedule(50, 1e-4, 0.02)


@pytest.fixture(scope="session")
def sched3():
    return build_schedule(3, 0.1, 0.3)


@pytest.fixture(scope="session")
def cond2() -> ConditioningVector:
    return ConditioningVector.one_hot(0, 2)


@pytest.fixture(scope="session")
def toy16() -> ToyPredictor:
    return random_toy((1, 16, 16))
