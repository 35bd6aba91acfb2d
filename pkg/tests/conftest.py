import pytest

from swfp.trainer import build_env, pretrain, toy_config


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config()


@pytest.fixture(scope="session")
def toy_env(toy_cfg):
    return build_env(toy_cfg)


@pytest.fixture(scope="session")
def pretrained_toy(toy_cfg, toy_env):
    """Behaviour-cloned 6-block flow on the 8-mode bandit (shared, do not mutate)."""
    stack, losses = pretrain(toy_cfg, toy_env)
    return stack, losses


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts collected by tests/test_acceptance.py."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
