from __future__ import annotations

import pytest

from imitlab import envs
from imitlab.active import collect_passive
from imitlab.models import TrainConfig, train_all
from imitlab.numkit import make_rng


@pytest.fixture(scope="session")
def reach_data():
    return collect_passive(envs.POINT_REACH, 40, make_rng(0, 1))


@pytest.fixture(scope="session")
def reach_models(reach_data):
    return train_all(reach_data, TrainConfig().with_seed(0))


@pytest.fixture(scope="session")
def push_data():
    return collect_passive(envs.PUSH_BLOCK, 20, make_rng(0, 1))


@pytest.fixture(scope="session")
def push_models(push_data):
    return train_all(push_data, TrainConfig().with_seed(0))
