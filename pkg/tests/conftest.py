import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance runs")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_missing(tmp_path_factory):
    """A small Missing bundle on a 32 px canvas, written once per session."""
    from mmal.ingest import write_bundle
    from mmal.pitfalls import MissingnessPolicy, build_missing
    from mmal.quintfeatures import GenConfig

    out = tmp_path_factory.mktemp("bundles") / "missing"
    bundle = build_missing(GenConfig(canvas=32), MissingnessPolicy(), {"train": 120, "test": 40}, seed=3)
    write_bundle(bundle, out)
    return out


@pytest.fixture(scope="session")
def toy_bundle(tmp_path_factory):
    """100 training samples, 16 px canvas: the engine's smallest realistic input."""
    from mmal.ingest import write_bundle
    from mmal.pitfalls import MissingnessPolicy, build_missing
    from mmal.quintfeatures import GenConfig

    out = tmp_path_factory.mktemp("bundles") / "toy"
    bundle = build_missing(GenConfig(canvas=16), MissingnessPolicy((0.5, 0.1)), {"train": 100, "test": 30}, seed=0)
    write_bundle(bundle, out)
    return out
