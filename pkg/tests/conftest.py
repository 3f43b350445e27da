from __future__ import annotations

import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from earlywarn.series import EntitySeries, SignalKind  # noqa: E402

settings.register_profile("default", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_series(length: int = 200, map_values=None, eid: str = "p0", seed: int = 0, start: int = 0) -> EntitySeries:
    rng = np.random.default_rng(seed)
    sig = {
        SignalKind.HR: 80 + rng.normal(0, 3, length),
        SignalKind.SBP: 120 + rng.normal(0, 3, length),
        SignalKind.DBP: 80 + rng.normal(0, 3, length),
        SignalKind.MAP: 85 + rng.normal(0, 3, length) if map_values is None else np.asarray(map_values, float),
    }
    return EntitySeries(eid, start, sig)


@pytest.fixture
def series_factory():
    return make_series
