import math

import matplotlib
import numpy as np
import pytest

from pyroadfuse import synth

matplotlib.use('Agg')


@pytest.fixture(scope='module')
def flat_spec():
    return synth.SceneSpec(width=96, height=64, a0=2., a1=0.5, theta=0., noise_sigma=0.)


@pytest.fixture(scope='module')
def rolled_spec():
    # negative roll keeps the top-right corner positive at a0 = 2
    return synth.SceneSpec(width=96, height=64, a0=2., a1=0.5, theta=math.radians(-5.), noise_sigma=0.)


@pytest.fixture(scope='module')
def pothole_spec():
    anomalies = [synth.Anomaly(u=30, v=40, width=20, height=10, delta=-12.),
                 synth.Anomaly(u=70, v=20, width=10, height=8, delta=8.)]
    return synth.SceneSpec(width=96, height=64, a0=3., a1=0.6, theta=math.radians(-4.),
                           anomalies=anomalies, noise_sigma=0.25, seed=11)


@pytest.fixture(scope='module')
def camera():
    return synth.default_camera(96, 64)


@pytest.fixture(scope='module')
def flat_scene(flat_spec):
    return synth.generate(flat_spec)


@pytest.fixture(scope='module')
def rolled_scene(rolled_spec):
    return synth.generate(rolled_spec)


@pytest.fixture(scope='module')
def pothole_scene(pothole_spec):
    return synth.generate(pothole_spec, return_rgb=True)


@pytest.fixture(scope='module')
def random_specs():
    rng = np.random.default_rng(2024)
    return [synth.random_spec(rng) for _ in range(6)]
