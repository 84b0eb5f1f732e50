from contextlib import contextmanager

import pytest

ACCEPTANCE_LINES: list[str] = []


@contextmanager
def criterion(name: str):
    """Record one PASS/FAIL line for an acceptance criterion.

    The block may set ``detail["text"]`` to explain the measured values; any
    exception (including a failed assert) marks the criterion as failed.
    """
    detail = {"text": ""}
    try:
        yield detail
    except BaseException as exc:
        reason = detail["text"] or f"{type(exc).__name__}: {exc}".splitlines()[0]
        ACCEPTANCE_LINES.append(f"FAIL  {name}: {reason}")
        print(ACCEPTANCE_LINES[-1])
        raise
    ACCEPTANCE_LINES.append(f"PASS  {name}: {detail['text']}")
    print(ACCEPTANCE_LINES[-1])


@pytest.fixture
def acceptance():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
