import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kamflow.acceptance import SuiteContext


@pytest.fixture(scope="session")
def ctx():
    """Shared solve cache for the whole run; heavy fields solve once."""
    return SuiteContext()


@pytest.fixture(scope="session")
def pendulum_result(ctx):
    return ctx.pendulum()


@pytest.fixture(scope="session")
def free_c1_result(ctx):
    return ctx.solve("free", c=[1.0])


@pytest.fixture(scope="session")
def separable_result(ctx):
    return ctx.separable()


@pytest.fixture(scope="session")
def ni_result(ctx):
    return ctx.solve("nearly_integrable", c=[1.0], eps=1e-3)


@pytest.fixture(scope="session")
def separable_closed_form():
    """Closed-form separable pendulum solution field (no solve needed)."""
    import numpy as np
    from kamflow.fields import ScalarField
    from kamflow.geometry import TorusGeometry
    from oracles import separable_u0_grid
    return ScalarField(TorusGeometry(2, 128), separable_u0_grid(128), "u0 separable")
