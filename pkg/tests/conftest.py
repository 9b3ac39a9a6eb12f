import numpy as np
import pytest

from avsearch.fusion import FeatureBundle, LaffModel, init_model


def randomized_model(
    video_dims: dict[str, int],
    text_dims: dict[str, int],
    d: int,
    heads: int,
    seed: int,
    scale: float = 0.5,
) -> LaffModel:
    """A model with every parameter (incl. biases and attention) randomized,
    so attention weights and gradients are non-trivial."""
    model = init_model(video_dims, text_dims, d=d, heads=heads, seed=seed)
    rng = np.random.default_rng(seed + 1)
    return model.with_vector(rng.normal(0.0, scale, model.n_params()))


def random_bundle(item_id: str, dims: dict[str, int], rng) -> FeatureBundle:
    return FeatureBundle(item_id, {name: rng.normal(size=dim) for name, dim in dims.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
