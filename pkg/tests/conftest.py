import random

import pytest

from gauntlet.clockwork import SimulatedClock
from gauntlet.service import CaptchaService, ServiceConfig
from gauntlet.tiles import SynthSpec


@pytest.fixture(scope="session")
def spec() -> SynthSpec:
    return SynthSpec()


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xC0FFEE)


def build_service(seed: int = 1, clock: SimulatedClock | None = None, **config_kwargs) -> CaptchaService:
    config = ServiceConfig(**config_kwargs)
    return CaptchaService(config, seed=seed, clock=clock or SimulatedClock())


@pytest.fixture
def service() -> CaptchaService:
    return build_service()
