import pytest

from mdmm_lab.config import build_config


def tiny(**over):
    """A seconds-scale config for plumbing tests."""
    data = {
        "name": "tiny",
        "steps": 300,
        "batch_size": 16,
        "alpha_grid": [0.5, 5.0, 50.0],
        "generator": {"n_train": 128, "n_heldout": 48},
        "model": {"encoder_hidden": [16], "code_dim": 3},
        "optimizer": {"lr_theta": 3e-3},
        "eval": {"n_gen": 48, "ema_window": 50, "trace_every": 50},
    }
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return build_config(data)


@pytest.fixture
def tiny_config():
    return tiny()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
