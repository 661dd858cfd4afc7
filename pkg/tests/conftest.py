"""Shared fixtures: tiny procedural datasets and hypothesis settings."""

import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import mmsynth as mm

settings.register_profile(
    "suite", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("suite")


def pytest_runtest_logreport(report):
    """Print one verdict line per acceptance criterion, whatever happens."""
    if "test_acceptance" not in report.nodeid:
        return
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call":
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\n[ACCEPTANCE] criterion {n}: {verdict}")
    elif report.when == "setup" and not report.passed:
        verdict = "FAIL (setup error)" if report.failed else "SKIP"
        print(f"\n[ACCEPTANCE] criterion {n}: {verdict}")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 phantoms at 16x16, split 16:4:4. Small enough for fast module tests."""
    root = tmp_path_factory.mktemp("tiny-ds")
    return mm.generate_dataset(root, n_samples=24, size=16, seed=11,
                               split_ratio=(16, 4, 4))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """40 phantoms at 32x32, split 28:6:6, for codec and pipeline tests."""
    root = tmp_path_factory.mktemp("small-ds")
    return mm.generate_dataset(root, n_samples=40, size=32, seed=7,
                               split_ratio=(28, 6, 6))


@pytest.fixture(scope="session")
def quick_codec(tiny_dataset):
    """A briefly trained codec over the tiny dataset; good enough to give
    structured latents for pipeline plumbing tests."""
    from mmsynth.codec import CodecTrainConfig, train_codec

    cfg = CodecTrainConfig(steps=300, batch_size=8, seed=0, val_every=100)
    return train_codec(tiny_dataset, cfg)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
