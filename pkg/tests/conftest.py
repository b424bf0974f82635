import numpy as np
import pytest

from qtuning.backbone import BackboneConfig, build_backbone
from qtuning.taskstream import StreamConfig, generate_stream
from qtuning.trainer import TrainConfig

TINY_BACKBONE = BackboneConfig(vocab_size=64, d_model=8, n_layers=2, n_heads=2, ffn_hidden=16, max_seq_len=64, seed=0)
TINY_STREAM = StreamConfig(n_tasks=6, vocab_size=64, seq_len=6, support=8, k_shot=6, k_val=3, k_test=10, seed=0)
TINY_TRAIN = TrainConfig(epochs=3, batch_size=4, patience=2, prompt_len=2, q_size=2, prefix_len=2, mlp_hidden=4,
                         disc_hidden=4, probe_epochs=2, seed=0)


@pytest.fixture(scope="session")
def tiny_backbone():
    return build_backbone(TINY_BACKBONE)[0]


@pytest.fixture(scope="session")
def tiny_tasks():
    return generate_stream(TINY_STREAM)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
