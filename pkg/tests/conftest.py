import pytest

from radiogenomic.data_io import PhantomSpec, generate_phantom_dataset

SMALL_SPEC = dict(grid=(16, 16, 16), wt_radius=(3.0, 5.0), n_genes=60, module_size=5)


@pytest.fixture(scope="session")
def small_cases():
    """Eight 16^3 phantom cases; cheap enough for training smoke tests."""
    return generate_phantom_dataset(PhantomSpec(**SMALL_SPEC, seed=1), 8)


def pytest_terminal_summary(terminalreporter):
    import sys
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS):
            terminalreporter.write_line(line)
