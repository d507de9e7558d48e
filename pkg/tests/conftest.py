import pytest

# acceptance criterion -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def record(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[name] = (bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda k: (len(k.split()[0]), k)):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
