import numpy as np
import pytest


@pytest.fixture(scope="session")
def reference_trap_position():
    """Location of the default-chip trap minimum, shared across tests."""
    from chiptrap.geometry import build_default_chip
    from chiptrap.trapanalysis import RB87_F2_M2, find_minimum

    return find_minimum(build_default_chip(), RB87_F2_M2, np.array([0, 1e-3, 0]))
