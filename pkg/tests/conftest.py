import pytest

from support import make_program


@pytest.fixture(scope="session")
def nominal_program():
    """The saturating retry-loop system used across the analysis tests."""
    return make_program()


@pytest.fixture
def small_program():
    return make_program(
        lam=3.0, mu=5.0, tau=2.0, retries=2, queue_bound=8, orbit_bound=3, name="small"
    )
