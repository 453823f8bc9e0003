import contextlib

import numpy as np
import pytest

# (criterion number, passed, summary) collected by the acceptance tests
ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records PASS unless the block raises."""

    @contextlib.contextmanager
    def run(number, title):
        note = {}
        try:
            yield note
        except BaseException as exc:
            ACCEPTANCE.append((number, False, f"{title}: {note.get('detail', '')} [{type(exc).__name__}: {exc}]"))
            raise
        ACCEPTANCE.append((number, True, f"{title}: {note.get('detail', '')}"))
    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, text in sorted(ACCEPTANCE):
        first = text.splitlines()[0] if text else ""
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {first}")
