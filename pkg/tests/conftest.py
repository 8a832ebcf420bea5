import numpy as np
import pytest
from hypothesis import settings

from cococo.comm_channel import CommParams, Link
from cococo.plant import double_integrator
from cococo.sim_engine import EpisodeConfig, X0Sampler

settings.register_profile("repo", deadline=None, max_examples=200, derandomize=True)
settings.load_profile("repo")


def make_template(z=None, horizon=1.0, dt=0.002, disturbance_std=0.2, ul=None, dl=None,
                  controller=None, **kw):
    plant = double_integrator(dt=dt, disturbance_std=disturbance_std)
    z = CommParams(snr_db=5.0, sampling_period_s=0.02) if z is None else z
    ul = Link(z) if ul is None else ul
    dl = Link(z) if dl is None else dl
    return EpisodeConfig(plant, ul, dl, controller, horizon, X0Sampler(mean=(1.0, 0.0)), **kw)


@pytest.fixture
def template():
    return make_template()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
