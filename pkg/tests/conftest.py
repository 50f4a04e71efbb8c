import pytest

from beachbot.classifier import make_dataset, train
from beachbot.spectra import default_library


@pytest.fixture(scope="session")
def lib():
    return default_library()


@pytest.fixture(scope="session")
def bench_data(lib):
    return make_dataset(lib, 0)


@pytest.fixture(scope="session")
def model(bench_data):
    return train(bench_data, "SVM3+I", 10.0, seed=0)


@pytest.fixture(scope="session")
def model_plain(bench_data):
    return train(bench_data, "SVM3", 10.0, seed=0)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
