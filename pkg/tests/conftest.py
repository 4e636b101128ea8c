import numpy as np
import pytest

from mfae import model as M


def small_arch(**overrides) -> M.ArchConfig:
    kw = dict(feat_dim=5, n_mixtures=3, embed_dim=4, tdnn_hidden=6, ff_hidden=6, decoder_hidden=6)
    kw.update(overrides)
    return M.ArchConfig(**kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def arch():
    return small_arch()


@pytest.fixture
def params(arch):
    return M.init_params(arch, seed=3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
