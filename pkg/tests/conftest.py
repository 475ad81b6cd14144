import numpy as np
import pytest

from dlanac import autoencoder as ae
from dlanac import data
from dlanac import training as tr


def tiny_config(**kw) -> tr.TrainConfig:
    """A model small enough to train in seconds on 16px frames."""
    base = dict(
        stage1_epochs=2, stage2_epochs=3, batch_size=4, lr0=1e-3,
        ae=ae.AeConfig(frame_size=16, depth=2, base_width=4, feat_channels=8),
        som=tr.SomConfig(L=9, k=40),
    )
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    data.generate_synthetic(data.preset("tiny", seed=5), root)
    return root


@pytest.fixture(scope="session")
def tiny_videos(tiny_root):
    m = data.load_manifest(tiny_root)
    return data.load_split(m, "train"), data.load_split(m, "test")


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_videos):
    cfg = tiny_config()
    return cfg, tr.pretrain(cfg, tiny_videos[0])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def accept():
    """Record one verdict line per acceptance criterion; printed in the session summary."""
    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"ACCEPT C{number} {'PASS' if passed else 'FAIL'}: {name} | {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1][1:])):
            terminalreporter.write_line(line)
