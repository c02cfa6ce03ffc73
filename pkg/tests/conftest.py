from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lqs_hvroc.lqs import ClosedLoopSpec, HumanPolicy, solve_lqs
from lqs_hvroc.model import Discretization, ModelConfig, NoiseParams, reference_config

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@dataclass
class Problem:
    cfg: ModelConfig
    human: HumanPolicy

    @property
    def model(self):
        return self.cfg.system()

    @property
    def noise(self):
        return self.cfg.noise_model()

    @property
    def cost(self):
        return self.cfg.cost_matrices()

    @property
    def task(self):
        return self.cfg.task()

    def spec(self, automation=None) -> ClosedLoopSpec:
        return ClosedLoopSpec(self.model, self.noise, self.cost, self.human, self.task, automation)


def make_problem(cfg: ModelConfig) -> Problem:
    human = solve_lqs(cfg.system(), cfg.noise_model(), cfg.cost_matrices(), cfg.task())
    return Problem(cfg, human)


@pytest.fixture(scope="session")
def ref() -> Problem:
    return make_problem(reference_config())


@pytest.fixture(scope="session")
def ref_quiet() -> Problem:
    return make_problem(reference_config().replace(noise=NoiseParams((0.0,) * 9)))


@pytest.fixture(scope="session")
def short_ref() -> Problem:
    """Reference parameters over a 1 s horizon, for the slower loops."""
    return make_problem(reference_config().replace(discretization=Discretization(0.01, 100)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
