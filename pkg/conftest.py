import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src import config as srfm_config  # noqa: E402
from src.network import CovariateTable, DirectedNetwork  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale acceptance runs (set SRFM_RUN_SLOW=1)')


def pytest_collection_modifyitems(config, items):
    if srfm_config.RUN_SLOW:
        return
    skip = pytest.mark.skip(reason='slow; set SRFM_RUN_SLOW=1 to run')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def random_network(rng, n_nodes, density=0.2):
    adj = (rng.random((n_nodes, n_nodes)) < density).astype(np.uint8)
    np.fill_diagonal(adj, 0)
    return DirectedNetwork(adj)


def random_covariates(rng, n_nodes):
    """group: categorical, score: integer-valued, level: continuous."""
    frame = pd.DataFrame({
        'group': rng.choice(['a', 'b', 'c'], size=n_nodes),
        'score': rng.integers(0, 5, size=n_nodes).astype(float),
        'level': rng.normal(size=n_nodes),
    })
    return CovariateTable.from_frame(frame, {'group': 'categorical', 'score': 'continuous',
                                             'level': 'continuous'})


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_network():
    return random_network


@pytest.fixture
def make_covariates():
    return random_covariates
