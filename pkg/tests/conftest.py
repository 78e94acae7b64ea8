import numpy as np
import pytest

from macvae.corpus import prepare_dataset
from macvae.synth import SynthConfig, write_raw


def prepared(tmp_path_factory, name, **synth):
    raw = tmp_path_factory.mktemp(name)
    cfg = SynthConfig(**synth)
    write_raw(raw, cfg)
    n_cold = max(1, cfg.n_items // 10)
    data, _ = prepare_dataset(raw, vocab_size=400, n_cold=n_cold, seed=cfg.seed)
    return data


@pytest.fixture(scope="session")
def synth_data(tmp_path_factory):
    """The default synthetic corpus (about 500 items, 80 tags, 50 cold)."""
    return prepared(tmp_path_factory, "synth")


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """A 120-item corpus for quick training checks."""
    return prepared(tmp_path_factory, "small", n_items=120, n_users=600)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
