import numpy as np
import pytest

from coatsim.dataset import DatasetConfig, generate_to_disk, load_group, read_manifest
from coatsim.toyflow import TOY_TRAIN_CONFIG, FlowModel, TrainConfig, train, training_stream

MINI_SEED = 7
_ACCEPTANCE = []


def record_acceptance(name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    _ACCEPTANCE.append(line)
    print(line)


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mini_manifest(tmp_path_factory):
    """24 groups x 8 variants at 32x32, master seed 7, written to disk."""
    out = tmp_path_factory.mktemp("mini")
    return generate_to_disk(DatasetConfig(resolution=32), out, MINI_SEED)


@pytest.fixture(scope="session")
def mini_groups(mini_manifest):
    manifest = read_manifest(mini_manifest)
    return [load_group(manifest, rec) for rec in manifest.groups]


@pytest.fixture(scope="session")
def toy_training(mini_groups):
    config = TrainConfig.from_dict(dict(TOY_TRAIN_CONFIG))
    model = FlowModel(channels=3, patch=config.patch, hidden=config.hidden, seed=config.seed)
    return train(training_stream(mini_groups, config.seed), config, model)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
