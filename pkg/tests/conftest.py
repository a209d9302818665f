import json
import os
from pathlib import Path

import hypothesis
import pytest

from distill_lab.datasets import CapacityGapBenchmark, gen_synthetic
from distill_lab.nn import MlpSpec, SgdConfig
from distill_lab.trainers import train_teacher

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("dev", max_examples=50, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dev"))

FIXTURES = Path(__file__).parent / "fixtures"
REPO_FIXTURES = Path(__file__).parent.parent / "fixtures"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long acceptance experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


SMALL_BENCHMARK = CapacityGapBenchmark(
    n_classes=3, input_dim=4, cluster_spread=0.6, label_noise_rate=0.0,
    train_size=90, dev_size=30, test_size=30, centroid_scale=2.0, seeds=(1, 2))


@pytest.fixture(scope="session")
def small_data():
    return gen_synthetic(SMALL_BENCHMARK, seed=0)


@pytest.fixture(scope="session")
def teacher_spec():
    return MlpSpec(4, (16,), 3)


@pytest.fixture(scope="session")
def student_spec():
    return MlpSpec(4, (4,), 3)


@pytest.fixture(scope="session")
def sgd():
    return SgdConfig(learning_rate=0.05, grad_clip=1.0, momentum=0.9)


@pytest.fixture(scope="session")
def teacher_checkpoints(small_data, teacher_spec, sgd):
    return train_teacher(teacher_spec, small_data, 3, sgd, seed=1, batch_size=16)


def small_config_dict():
    """A config small enough to run every method in a few seconds."""
    return {
        "config_version": 1,
        "dataset": {"synthetic": dict(SMALL_BENCHMARK.to_dict(), seed=0)},
        "teacher": {"hidden_dims": [16], "activation": "relu"},
        "student": {"hidden_dims": [4], "activation": "relu"},
        "ta": {"hidden_dims": [8], "activation": "relu"},
        "methods": ["no_kd", "vanilla_kd", "takd", "rco", "annealing_kd", "pro_kd"],
        "hyperparameters": {
            "learning_rate": 0.05,
            "batch_size": 16,
            "n_teacher_epochs": 3,
            "tau_max": 3,
            "phase1_epochs": 3,
            "phase2_epochs": 1,
            "student_epochs": 2,
            "rco_epochs_per_anchor": 1,
            "search_epochs": 1,
        },
        "seeds": [1, 2],
        "output_dir": "runs/small",
    }


@pytest.fixture
def small_config():
    return small_config_dict()


@pytest.fixture
def config_file(tmp_path, small_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_config))
    return path
