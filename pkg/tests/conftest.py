import pytest

from moelab.config import config_from_dict
from moelab.data import TokenData
from moelab.trainer import train

TINY = {
    "run": {"steps": 6, "batch_size": 4, "log_every": 2, "eval_batches": 1, "seed": 0},
    "model": {"kind": "dense", "layers": 2, "hidden_dim": 16, "ffn_dim": 32, "heads": 2, "vocab_size": 32,
              "seq_len": 8, "n_experts": 4, "precision": "float64"},
    "schedule": {"peak_lr": 1e-2, "min_lr": 1e-3},
    "data": {"train_tokens": 4000, "eval_tokens": 1000, "doc_len_min": 8, "doc_len_max": 32},
}


def tiny_config(*overrides):
    return config_from_dict(TINY, list(overrides))


@pytest.fixture(scope="session")
def tiny_data():
    cfg = tiny_config()
    return TokenData(cfg.data, cfg.model.vocab_size)


@pytest.fixture(scope="session")
def tiny_dense(tiny_data):
    """A briefly trained dense checkpoint, so its FFNs are not at initialization."""
    return train(tiny_config(), data=tiny_data).checkpoint


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(LINES, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
            terminalreporter.write_line(LINES[key])
