import numpy as np
import pytest

from collimcal import synth
from collimcal.core_geom import ObservationSet


def scene(seed=0, trial=0, **overrides):
    """Poses and observations for one synthetic trial of the given config."""
    config = synth.default_config(**overrides)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))
    poses, observations = synth.make_scene(config, rng)
    return config, poses, observations


def first_images(observations, count):
    return ObservationSet(target=observations.target,
                          images=observations.images[:count])


@pytest.fixture
def noiseless_scene():
    return scene(seed=0)
