import numpy as np
import pytest

from metashift import taskgen


@pytest.fixture(scope="session")
def mini_taskset():
    """27-task factorial set, 16 pairs per class, partitioned at N=5."""
    ts = taskgen.generate_taskset(16, master_seed=11, design="mini")
    taskgen.partition_taskset(ts, 5)
    return ts


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
