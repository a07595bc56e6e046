import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


import pytest  # noqa: E402


@pytest.fixture(scope="session")
def tiny_checkpoint():
    """A briefly trained tiny model; shared by evaluation and CLI tests."""
    from helpers import tiny_config
    from splatstego.train import Trainer

    tr = Trainer(tiny_config())
    tr.run(20)
    return tr.checkpoint()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
